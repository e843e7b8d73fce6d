"""Audio I/O and the waveform <-> spectrogram pipeline."""

from .wavio import AudioClip, read_wav, write_wav
from .stft import StftConfig, Spectrogram, stft, istft, hann_window, num_frames

__all__ = [
    "AudioClip", "read_wav", "write_wav",
    "StftConfig", "Spectrogram", "stft", "istft", "hann_window", "num_frames",
]
