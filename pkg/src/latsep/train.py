"""Toy dataset synthesis, cross-track mixing augmentation, MSE-on-STFT loss,
optimizers, and the training loop.

Every random draw flows from integer seeds through numpy Generators; the
per-step batch generator is derived statelessly from (seed, step), so a run
resumed from a checkpoint replays the uninterrupted batch stream exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, DimensionError, InputError, TrainingDiverged
from .model import CONDITION_NAMES, ConditionedUNet
from .numerics import ops
from .numerics.tensor import Tensor, no_grad
from .spectro import AudioClip, StftConfig, stft

STEM_NAMES = CONDITION_NAMES

_VALID_STREAM = 0x5EED


@dataclass
class StemSet:
    """The four aligned stems of one track; the mixture is their exact sum."""

    stems: dict
    track_id: str

    def __post_init__(self):
        missing = [n for n in STEM_NAMES if n not in self.stems]
        if missing:
            raise InputError(f"track {self.track_id}: missing stems {missing}")
        lengths = {clip.n_samples for clip in self.stems.values()}
        rates = {clip.sample_rate for clip in self.stems.values()}
        if len(lengths) != 1 or len(rates) != 1:
            raise InputError(f"track {self.track_id}: stems disagree on length or rate")

    @property
    def sample_rate(self) -> int:
        return self.stems["vocals"].sample_rate

    @property
    def n_samples(self) -> int:
        return self.stems["vocals"].n_samples

    def mixture(self) -> AudioClip:
        total = sum(self.stems[n].samples for n in STEM_NAMES)
        return AudioClip(total, self.sample_rate)


@dataclass
class Dataset:
    tracks: list
    split: str = "train"

    def __post_init__(self):
        if not self.tracks:
            raise InputError("dataset must hold at least one track")

    def __len__(self) -> int:
        return len(self.tracks)


# ---------------------------------------------------------------------------
# synthetic stems

def _envelope(rng, n: int, sr: int, rate_hz: float) -> np.ndarray:
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    return 0.6 + 0.4 * np.sin(2 * np.pi * rate_hz * t + phase)


def _vocals(rng, n: int, sr: int) -> np.ndarray:
    """Harmonic tone with vibrato: f0 in 200-380 Hz, four decaying partials."""
    t = np.arange(n) / sr
    f0 = rng.uniform(200.0, 380.0)
    vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 6.5) * t
                              + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    out = np.zeros(n)
    for k in range(1, 5):
        if k * f0 * 1.03 < sr / 2:
            out += np.sin(k * phase) / k ** 1.3
    return out * _envelope(rng, n, sr, rng.uniform(0.2, 0.5))


def _drums(rng, n: int, sr: int) -> np.ndarray:
    """Decaying broadband noise bursts on a regular grid."""
    period = rng.uniform(0.22, 0.4)
    decay = rng.uniform(18.0, 40.0)
    env = np.zeros(n)
    t0 = rng.uniform(0.0, period)
    while t0 * sr < n:
        i = int(t0 * sr)
        length = min(n - i, int(0.25 * sr))
        env[i:i + length] = np.maximum(env[i:i + length],
                                       np.exp(-decay * np.arange(length) / sr))
        t0 += period
    return env * rng.standard_normal(n)


def _bass(rng, n: int, sr: int) -> np.ndarray:
    """Low sinusoid below 200 Hz with occasional octave hops."""
    t = np.arange(n) / sr
    f = rng.uniform(50.0, 95.0)
    hop = (1.0 + (rng.random(np.maximum(1, int(t[-1] / 0.75)) + 1) > 0.5))
    freq = f * hop[np.minimum((t / 0.75).astype(int), len(hop) - 1)]
    phase = 2 * np.pi * np.cumsum(freq) / sr
    return np.sin(phase) * _envelope(rng, n, sr, rng.uniform(0.1, 0.3))


def _other(rng, n: int, sr: int) -> np.ndarray:
    """Stationary band-passed noise pad above the vocal harmonics."""
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    lo = rng.uniform(1900.0, 2200.0)
    hi = rng.uniform(3000.0, 3500.0)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    out = np.fft.irfft(spec, n=n)
    out /= max(np.abs(out).max(), 1e-9)
    return out * _envelope(rng, n, sr, rng.uniform(0.05, 0.2))


_SYNTHS = {"vocals": _vocals, "drums": _drums, "bass": _bass, "other": _other}


def make_toy_dataset(n_tracks: int, seconds: float = 6.0, sample_rate: int = 8000,
                     seed: int = 0, split: str = "train") -> Dataset:
    """Four spectrally separable synthetic stems per track, deterministic per seed."""
    if n_tracks < 2:
        raise ConfigError("toy dataset needs n_tracks >= 2 (augmentation draws "
                          "stems from distinct tracks)")
    n = int(round(seconds * sample_rate))
    tracks = []
    for t in range(n_tracks):
        rng = np.random.default_rng([seed, t])
        stems = {}
        for name in STEM_NAMES:
            # RMS-normalized so every stem carries comparable energy; peak
            # normalization would bury sparse stems (drum bursts) in the loss
            gain = rng.uniform(0.08, 0.14)
            raw = _SYNTHS[name](rng, n, sample_rate)
            rms = max(float(np.sqrt(np.mean(raw * raw))), 1e-9)
            stems[name] = (gain * raw / rms).astype(np.float32)[None, :]
        total_peak = np.abs(sum(stems.values())).max()
        if total_peak > 0.95:
            for name in STEM_NAMES:
                stems[name] = stems[name] * np.float32(0.95 / total_peak)
        tracks.append(StemSet(
            {name: AudioClip(stems[name], sample_rate) for name in STEM_NAMES},
            track_id=f"toy_{seed}_{t:03d}"))
    return Dataset(tracks, split=split)


def split_dataset(dataset: Dataset, n_test: int):
    """Deterministic tail split with disjoint track ids."""
    if not 0 < n_test < len(dataset):
        raise ConfigError(f"n_test must be in (0, {len(dataset)})")
    return (Dataset(dataset.tracks[:-n_test], split="train"),
            Dataset(dataset.tracks[-n_test:], split="test"))


# ---------------------------------------------------------------------------
# batching and loss

def sample_batch(dataset: Dataset, batch: int, segment_seconds: float,
                 rng: np.random.Generator, stft_cfg: StftConfig):
    """Cross-track mixing: each stem of an example comes from its own track.

    Per example the draw order is fixed (condition, then per stem in
    vocals/drums/bass/other order: track index, then offset), so a given
    generator state always yields the same batch. Returns the mixture and
    target spectrogram batches [B, C, F, T] plus the condition ids.
    """
    sr = dataset.tracks[0].sample_rate
    seg = int(round(segment_seconds * sr))
    if seg < stft_cfg.n_fft:
        raise InputError(f"segment of {seg} samples is shorter than one STFT window")
    shortest = min(t.n_samples for t in dataset.tracks)
    if seg > shortest:
        raise InputError(f"segment of {seg} samples exceeds shortest track ({shortest})")

    mixes, targets, cond_ids = [], [], []
    for _ in range(batch):
        cond = int(rng.integers(len(STEM_NAMES)))
        drawn = {}
        for name in STEM_NAMES:
            track = dataset.tracks[int(rng.integers(len(dataset.tracks)))]
            off = int(rng.integers(track.n_samples - seg + 1))
            drawn[name] = track.stems[name].samples[:, off:off + seg]
        mix = sum(drawn.values())
        target = drawn[STEM_NAMES[cond]]
        mixes.append(stft(AudioClip(mix, sr), stft_cfg).data.data)
        targets.append(stft(AudioClip(target, sr), stft_cfg).data.data)
        cond_ids.append(cond)
    return (Tensor(np.stack(mixes)), Tensor(np.stack(targets)), cond_ids)


def mse_loss(est: Tensor, target: Tensor) -> Tensor:
    est, target = ops.as_tensor(est), ops.as_tensor(target)
    if est.shape != target.shape:
        raise DimensionError(f"mse_loss: operand 'est' {est.shape} != "
                             f"operand 'target' {target.shape}")
    diff = ops.sub(est, target)
    return ops.mean(ops.mul(diff, diff))


# ---------------------------------------------------------------------------
# optimizers

class Sgd:
    """Gradient descent with optional momentum."""

    kind = "sgd"

    def __init__(self, model, lr: float = 1e-3, momentum: float = 0.0, t: int = 0):
        self.lr = lr
        self.momentum = momentum
        self.t = t
        self._params = list(model.named_parameters())
        self.velocity = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self):
        self.t += 1
        for name, p in self._params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= np.asarray(self.lr, dtype=p.data.dtype) * v

    def describe(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum,
                "t": self.t}

    def slot_arrays(self) -> dict:
        return {"velocity": dict(self.velocity)}


class Adam:
    """Adaptive-moments optimizer with bias correction."""

    kind = "adam"

    def __init__(self, model, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, t: int = 0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = t
        self._params = list(model.named_parameters())
        self.m = {name: np.zeros_like(p.data) for name, p in self._params}
        self.v = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self._params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def describe(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "t": self.t}

    def slot_arrays(self) -> dict:
        return {"m": dict(self.m), "v": dict(self.v)}


def make_optimizer(model, kind: str = "adam", **kwargs):
    if kind == "adam":
        return Adam(model, **kwargs)
    if kind == "sgd":
        return Sgd(model, **kwargs)
    raise ConfigError(f"unknown optimizer {kind!r}; valid: adam, sgd")


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 3
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    segment_seconds: float = 1.5
    checkpoint_every: int = 500
    validate_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid training config: {self}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "steps", "batch_size", "lr", "optimizer", "momentum", "seed",
            "segment_seconds", "checkpoint_every", "validate_every")}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (step, loss, wall_ms)
    valid_history: list = field(default_factory=list)  # (step, valid_loss)
    checkpoints: list = field(default_factory=list)
    final_checkpoint: str | None = None


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step generator; resume replays the same stream."""
    return np.random.default_rng([seed, step])


def train_loop(model: ConditionedUNet, dataset: Dataset, cfg: TrainConfig,
               out_dir=None, optimizer=None, start_step: int = 0,
               callbacks=()) -> TrainResult:
    """sample_batch -> forward -> mse -> backward -> update, with periodic
    checkpoints and a fixed held-out validation batch every validate_every steps.

    A non-finite loss aborts with TrainingDiverged; the last good checkpoint
    stays on disk. loss_log.txt carries only (step, loss) so identical seeds
    reproduce it byte-for-byte; wall-clock times go to train_log.jsonl.
    """
    if optimizer is None:
        optimizer = make_optimizer(
            model, cfg.optimizer, lr=cfg.lr,
            **({"momentum": cfg.momentum} if cfg.optimizer == "sgd" else {}))
    result = TrainResult()

    out = Path(out_dir) if out_dir is not None else None
    loss_log = train_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_log = open(out / "loss_log.txt", "a" if start_step else "w")
        train_log = open(out / "train_log.jsonl", "a" if start_step else "w")

    valid_batch = sample_batch(dataset, cfg.batch_size, cfg.segment_seconds,
                               step_rng(cfg.seed, _VALID_STREAM), model.cfg.stft)

    def checkpoint(step: int) -> str:
        path = str(out / f"ckpt_{step:06d}.lsft")
        save_checkpoint(path, model, optimizer, step)
        result.checkpoints.append(path)
        return path

    model.train()
    try:
        for step in range(start_step, cfg.steps):
            t0 = time.perf_counter()
            mix, target, cond_ids = sample_batch(
                dataset, cfg.batch_size, cfg.segment_seconds,
                step_rng(cfg.seed, step), model.cfg.stft)
            model.zero_grad()
            est = model(mix, cond_ids)
            loss = mse_loss(est, target)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            loss.backward()
            optimizer.step()
            wall_ms = (time.perf_counter() - t0) * 1e3

            result.history.append((step, loss_val, wall_ms))
            if loss_log is not None:
                loss_log.write(f"{step} {loss_val!r}\n")
                train_log.write(json.dumps(
                    {"step": step, "loss": loss_val, "wall_ms": round(wall_ms, 3)}) + "\n")
            for cb in callbacks:
                cb(step, loss_val)

            if cfg.validate_every and (step + 1) % cfg.validate_every == 0:
                model.eval()
                with no_grad():
                    v_est = model(valid_batch[0], valid_batch[2])
                    v_loss = float(mse_loss(v_est, valid_batch[1]).data)
                model.train()
                result.valid_history.append((step, v_loss))
                if train_log is not None:
                    train_log.write(json.dumps(
                        {"step": step, "valid_loss": v_loss}) + "\n")

            if out is not None and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < cfg.steps:
                checkpoint(step + 1)
        if out is not None:
            result.final_checkpoint = checkpoint(cfg.steps)
    finally:
        if loss_log is not None:
            loss_log.close()
            train_log.close()
    return result
