"""SDR scoring, dataset-level evaluation, and the wall-clock budget check.

The SDR here is the simple global-ratio form 10*log10((sum s^2 + eps) /
(sum (s - s_hat)^2 + eps)), not the full BSS-Eval decomposition with allowed
distortion filters. Scores are comparable between runs of this toolkit but
must not be read as BSS-Eval SDR.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import CONDITION_NAMES, Condition, ConditionedUNet, condition, separate_track
from .spectro import AudioClip
from .train import Dataset, StemSet

SDR_CAP_DB = 100.0
SDR_EPS = 1e-7


def sdr(reference: AudioClip, estimate: AudioClip, eps: float = SDR_EPS) -> float:
    """Global energy-ratio SDR in dB, capped at +100 for near-zero error.

    A bit-perfect estimate has zero error energy (mathematically +inf dB) and
    reports the cap directly; otherwise 10*log10((sum s^2 + eps)/(sum e^2 + eps)).
    """
    if reference.samples.shape != estimate.samples.shape:
        raise InputError(
            f"sdr: reference shape {reference.samples.shape} != estimate "
            f"shape {estimate.samples.shape}")
    ref = reference.samples.astype(np.float64)
    err = ref - estimate.samples.astype(np.float64)
    err_energy = float(np.sum(err * err))
    if err_energy == 0.0:
        return SDR_CAP_DB
    value = 10.0 * np.log10((np.sum(ref * ref) + eps) / (err_energy + eps))
    return float(min(value, SDR_CAP_DB))


@dataclass
class SdrReport:
    """Per-source means over tracks; average is the mean of the four means."""

    per_source: dict
    per_track: list  # (track_id, {source: sdr})
    average: float

    def to_json_dict(self) -> dict:
        return {
            "per_source": {k: self.per_source[k] for k in CONDITION_NAMES},
            "average": self.average,
            "per_track": [{"track_id": tid, "scores": scores}
                          for tid, scores in self.per_track],
        }

    def format_table(self) -> str:
        header = f"{'track':<16}" + "".join(f"{n:>10}" for n in CONDITION_NAMES) \
            + f"{'Avg':>10}"
        lines = [header, "-" * len(header)]
        for tid, scores in self.per_track:
            row_avg = sum(scores[n] for n in CONDITION_NAMES) / len(CONDITION_NAMES)
            lines.append(f"{tid:<16}" + "".join(
                f"{scores[n]:>10.3f}" for n in CONDITION_NAMES) + f"{row_avg:>10.3f}")
        lines.append("-" * len(header))
        lines.append(f"{'mean':<16}" + "".join(
            f"{self.per_source[n]:>10.3f}" for n in CONDITION_NAMES)
            + f"{self.average:>10.3f}")
        return "\n".join(lines)


class ModelSeparator:
    """Runs the model on each track's mixture."""

    def __init__(self, model: ConditionedUNet, chunk_seconds: float = 6.0,
                 overlap_fraction: float = 0.25):
        self.model = model
        self.chunk_seconds = chunk_seconds
        self.overlap_fraction = overlap_fraction

    def separate(self, stems: StemSet, cond: Condition) -> AudioClip:
        return separate_track(self.model, stems.mixture(), cond,
                              self.chunk_seconds, self.overlap_fraction)


class OracleSeparator:
    """Test stub returning the true stem; upper-bounds every real model."""

    def separate(self, stems: StemSet, cond: Condition) -> AudioClip:
        ref = stems.stems[cond.name]
        return AudioClip(ref.samples.copy(), ref.sample_rate)


class ZeroSeparator:
    """Test stub returning silence (0 dB under the global-ratio SDR)."""

    def separate(self, stems: StemSet, cond: Condition) -> AudioClip:
        return AudioClip(np.zeros_like(stems.stems[cond.name].samples),
                         stems.sample_rate)


def evaluate(separator, dataset: Dataset, conditions=CONDITION_NAMES) -> SdrReport:
    """separate each track under each condition and score against its stem."""
    conds = [condition(c) for c in conditions]
    per_track = []
    for stems in dataset.tracks:
        scores = {}
        for cnd in conds:
            est = separator.separate(stems, cnd)
            scores[cnd.name] = sdr(stems.stems[cnd.name], est)
        per_track.append((stems.track_id, scores))
    per_source = {c.name: sum(s[c.name] for _, s in per_track) / len(per_track)
                  for c in conds}
    average = sum(per_source.values()) / len(per_source)
    return SdrReport(per_source=per_source, per_track=per_track, average=average)


@dataclass
class BudgetReport:
    """Timing of chunked CPU separation against a real-time-factor budget."""

    track_seconds: float
    wall_seconds: float
    budget_rtf: float
    threads: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rtf(self) -> float:
        return self.wall_seconds / self.track_seconds

    @property
    def passed(self) -> bool:
        return self.rtf <= self.budget_rtf

    def to_json_dict(self) -> dict:
        return {"track_seconds": self.track_seconds,
                "wall_seconds": self.wall_seconds,
                "rtf": self.rtf, "budget_rtf": self.budget_rtf,
                "passed": self.passed, "threads": self.threads, **self.extra}


def throughput_check(model: ConditionedUNet, seconds_of_audio: float = 10.0,
                     budget_rtf: float = 1.0, sample_rate: int = 8000,
                     threads: int | None = None) -> BudgetReport:
    """Time separate_track on synthetic audio; pass iff wall/track <= budget."""
    rng = np.random.default_rng(0)
    n = int(round(seconds_of_audio * sample_rate))
    clip = AudioClip(0.1 * rng.standard_normal(
        (model.cfg.audio_channels, n)).astype(np.float32), sample_rate)
    separate_track(model, clip, "vocals")  # warm caches before timing
    t0 = time.perf_counter()
    separate_track(model, clip, "vocals")
    wall = time.perf_counter() - t0
    return BudgetReport(track_seconds=n / sample_rate, wall_seconds=wall,
                        budget_rtf=budget_rtf, threads=threads,
                        extra={"variant": model.cfg.variant})


def write_report(path, report) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
