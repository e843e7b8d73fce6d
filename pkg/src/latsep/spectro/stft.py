"""STFT pipeline mapping waveforms to complex-as-channels spectrograms.

Frames are reflect-padded by n_fft/2 on both ends and Hann-windowed at 50%
hop, so T = 1 + floor(n_samples / hop). Retained bins are 1..n_fft/2 (the DC
bin is dropped and restored as zero on inverse), which keeps F = n_fft/2 — a
power of two, as the U-Net's repeated stride-2 downsampling requires.

Channel layout: [re(ch0), re(ch1), im(ch0), im(ch1)] for stereo, [re, im]
for mono. The inverse applies a synthesis Hann window and normalizes the
overlap-add by the accumulated squared window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, InputError
from ..numerics.tensor import Tensor
from .wavio import AudioClip


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    hop: int = 1024

    def __post_init__(self):
        n = self.n_fft
        if n < 4 or (n & (n - 1)) != 0:
            raise ConfigError(f"n_fft must be a power of two >= 4, got {n}")
        if self.hop != n // 2:
            raise ConfigError(f"hop must be n_fft/2 (= {n // 2}), got {self.hop}")

    @property
    def freq_dim(self) -> int:
        return self.n_fft // 2


@dataclass
class Spectrogram:
    """data[C, F, T] with C = 2 x audio channels (real parts then imaginary)."""

    data: Tensor
    stft_config: StftConfig
    sample_rate: int
    n_samples: int

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        C, F, _T = self.data.shape
        if C % 2 != 0:
            raise InputError(f"spectrogram channel count must be even, got {C}")
        if F != self.stft_config.freq_dim:
            raise InputError(f"spectrogram has F={F}, config expects "
                             f"{self.stft_config.freq_dim}")
        if not np.isfinite(self.data.data).all():
            raise InputError("spectrogram entries must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    @property
    def audio_channels(self) -> int:
        return self.data.shape[0] // 2


def hann_window(n_fft: int) -> np.ndarray:
    k = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n_fft)


def num_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft(clip: AudioClip, cfg: StftConfig, dtype=np.float32) -> Spectrogram:
    """Hann-windowed frames -> rFFT -> bins 1..n_fft/2 split into re/im channels."""
    n = clip.n_samples
    if n < cfg.n_fft:
        raise InputError(f"clip has {n} samples, shorter than one {cfg.n_fft}-sample window")
    pad = cfg.n_fft // 2
    x = np.pad(clip.samples.astype(np.float64), ((0, 0), (pad, pad)), mode="reflect")
    T = num_frames(n, cfg.hop)
    offsets = np.arange(T) * cfg.hop
    frames = x[:, offsets[:, None] + np.arange(cfg.n_fft)[None, :]]  # [ch, T, n_fft]
    spec = np.fft.rfft(frames * hann_window(cfg.n_fft))[..., 1:]  # drop DC
    re = spec.real.transpose(0, 2, 1)  # [ch, F, T]
    im = spec.imag.transpose(0, 2, 1)
    data = np.concatenate([re, im], axis=0).astype(dtype)
    return Spectrogram(Tensor(data), cfg, clip.sample_rate, n)


def istft(spec: Spectrogram) -> AudioClip:
    """Inverse DFT per frame (DC restored as zero), Hann-squared overlap-add."""
    cfg = spec.stft_config
    data = spec.data.data.astype(np.float64)
    ch = spec.audio_channels
    T = spec.n_frames
    z = (data[:ch] + 1j * data[ch:]).transpose(0, 2, 1)  # [ch, T, F]
    full = np.zeros((ch, T, cfg.freq_dim + 1), dtype=np.complex128)
    full[..., 1:] = z
    frames = np.fft.irfft(full, n=cfg.n_fft)  # [ch, T, n_fft]

    w = hann_window(cfg.n_fft)
    padded_len = spec.n_samples + cfg.n_fft
    acc = np.zeros((ch, padded_len))
    wsum = np.zeros(padded_len)
    frames = frames * w
    w2 = w * w
    for t in range(T):
        lo = t * cfg.hop
        acc[:, lo:lo + cfg.n_fft] += frames[:, t]
        wsum[lo:lo + cfg.n_fft] += w2
    live = wsum > 1e-10
    acc[:, live] /= wsum[live]
    pad = cfg.n_fft // 2
    return AudioClip(acc[:, pad:pad + spec.n_samples], spec.sample_rate)
