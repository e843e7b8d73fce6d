"""Minimal RIFF/WAVE reader and writer.

Reads PCM 16-bit and IEEE float 32-bit mono/stereo files; writes IEEE
float 32-bit. Malformed files raise FormatError naming the offending chunk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, InputError

_PCM = 1
_IEEE_FLOAT = 3


@dataclass
class AudioClip:
    """samples[channels, n_samples] in [-1, 1) nominal range, plus the rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.samples.ndim != 2 or self.samples.shape[0] not in (1, 2):
            raise InputError(f"AudioClip needs [channels, n] with 1-2 channels, "
                             f"got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise InputError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def _chunks(data: bytes):
    """Yield (chunk_id, payload) pairs; chunks are word-aligned per RIFF."""
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"truncated {cid.decode('ascii', 'replace')!r} chunk: "
                              f"declared {size} bytes, {len(body)} available")
        yield cid, body
        pos += 8 + size + (size & 1)
    if pos < len(data) and pos + 8 > len(data):
        raise FormatError("trailing bytes do not form a chunk header")


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF":
        raise FormatError("missing 'RIFF' chunk id")
    if data[8:12] != b"WAVE":
        raise FormatError("missing 'WAVE' form type in 'RIFF' chunk")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise FormatError("'fmt ' chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
            break
    if fmt is None:
        raise FormatError("no 'fmt ' chunk before 'data'")
    if payload is None:
        raise FormatError("no 'data' chunk")

    tag, channels, rate, _byte_rate, block_align, bits = fmt
    if channels not in (1, 2):
        raise FormatError(f"'fmt ' chunk declares {channels} channels, expected 1-2")
    if tag == _PCM and bits == 16:
        raw = np.frombuffer(payload[:len(payload) - len(payload) % (2 * channels)],
                            dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[:len(payload) - len(payload) % (4 * channels)],
                            dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise FormatError(f"unsupported codec in 'fmt ' chunk: format tag {tag}, "
                          f"{bits}-bit")
    if samples.size == 0:
        raise FormatError("'data' chunk holds no complete frame")
    samples = samples.reshape(-1, channels).T.copy()
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write an IEEE float-32 WAV (format tag 3, with a fact chunk)."""
    samples = np.ascontiguousarray(clip.samples.T.astype("<f4"))
    channels = clip.n_channels
    data_bytes = samples.tobytes()
    byte_rate = clip.sample_rate * channels * 4
    fmt = struct.pack("<HHIIHH", _IEEE_FLOAT, channels, clip.sample_rate,
                      byte_rate, channels * 4, 32)
    fact = struct.pack("<I", clip.n_samples)
    body = (b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"fact" + struct.pack("<I", len(fact)) + fact
            + b"data" + struct.pack("<I", len(data_bytes)) + data_bytes)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
