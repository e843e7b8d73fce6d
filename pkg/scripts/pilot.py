"""Pilot run for the end-to-end toy separation gate.

Trains the desk-scale lightsaft_plus model for 2000 steps on the synthetic
8-track training split (seed 1234), then scores every test-track/condition
pair against all four reference stems. The committed numbers in
docs/pilot_run.json freeze the thresholds the acceptance suite asserts.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np

from latsep.eval import ModelSeparator, sdr, throughput_check
from latsep.model import CONDITION_NAMES, build, condition, desk_config
from latsep.train import TrainConfig, make_toy_dataset, split_dataset, train_loop

DATASET_SEED = 1234
MODEL_SEED = 0
TRAIN_SEED = 0
STEPS = 2000
WINDOW = 50


def run_toy_separation(steps=STEPS, log=print):
    dataset = make_toy_dataset(10, seconds=6.0, sample_rate=8000, seed=DATASET_SEED)
    train_split, test_split = split_dataset(dataset, 2)
    model = build(desk_config("lightsaft_plus", seed=MODEL_SEED))
    cfg = TrainConfig(steps=steps, seed=TRAIN_SEED)

    t0 = time.perf_counter()
    done = [0]

    def progress(step, loss):
        done[0] = step
        if (step + 1) % 200 == 0:
            log(f"step {step + 1}/{steps}: loss {loss:.5f} "
                f"({time.perf_counter() - t0:.0f}s)")

    result = train_loop(model, train_split, cfg, callbacks=(progress,))
    losses = [l for _s, l, _w in result.history]
    first = float(np.mean(losses[:WINDOW]))
    last = float(np.mean(losses[-WINDOW:]))
    train_seconds = time.perf_counter() - t0
    log(f"loss window means: first {first:.5f}, last {last:.5f}, "
        f"ratio {last / first:.3f} ({train_seconds:.0f}s)")

    separator = ModelSeparator(model, chunk_seconds=6.0)
    matrix = {}
    mse_matrix = {}
    selective = {}
    mse_selective = {}
    for stems in test_split.tracks:
        rows = {}
        mse_rows = {}
        wins = 0
        mse_wins = 0
        for name in CONDITION_NAMES:
            est = separator.separate(stems, condition(name))
            scores = {ref: sdr(stems.stems[ref], est) for ref in CONDITION_NAMES}
            errors = {ref: float(np.mean(
                (stems.stems[ref].samples - est.samples) ** 2))
                for ref in CONDITION_NAMES}
            rows[name] = scores
            mse_rows[name] = errors
            others = [o for o in CONDITION_NAMES if o != name]
            if all(scores[name] > scores[o] for o in others):
                wins += 1
            if all(errors[name] < errors[o] for o in others):
                mse_wins += 1
        matrix[stems.track_id] = rows
        mse_matrix[stems.track_id] = mse_rows
        selective[stems.track_id] = wins
        mse_selective[stems.track_id] = mse_wins
        log(f"{stems.track_id}: {wins}/4 sdr-selective, {mse_wins}/4 mse-selective")

    return {
        "dataset_seed": DATASET_SEED,
        "model_seed": MODEL_SEED,
        "train_seed": TRAIN_SEED,
        "steps": steps,
        "window": WINDOW,
        "train_config": cfg.to_dict(),
        "first_window_mean_loss": first,
        "last_window_mean_loss": last,
        "loss_ratio": last / first,
        "train_seconds": round(train_seconds, 1),
        "sdr_matrix": matrix,
        "mse_matrix": mse_matrix,
        "selective_conditions_per_track": selective,
        "mse_selective_conditions_per_track": mse_selective,
    }, model


def run_throughput(log=print):
    rtf = {}
    for variant in ("lasaft", "lightsaft", "lightsaft_plus"):
        model = build(desk_config(variant, seed=MODEL_SEED))
        report = throughput_check(model, seconds_of_audio=10.0, budget_rtf=1.0)
        rtf[variant] = round(report.rtf, 4)
        log(f"{variant}: rtf {report.rtf:.4f} "
            f"({report.wall_seconds:.2f}s for {report.track_seconds:.0f}s audio)")
    return rtf


def main():
    docs = Path(__file__).resolve().parents[1] / "docs"
    docs.mkdir(exist_ok=True)
    record, _model = run_toy_separation()
    record["measured_rtf"] = run_throughput()
    out = docs / "pilot_run.json"
    with open(out, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out}")
    ratio_ok = record["loss_ratio"] < 0.5
    sel_ok = all(v >= 3 for v in record["selective_conditions_per_track"].values())
    print(f"loss ratio {record['loss_ratio']:.3f} < 0.5: {ratio_ok}")
    print(f"selectivity >= 3/4 per track: {sel_ok}")
    return 0 if ratio_ok and sel_ok else 1


if __name__ == "__main__":
    sys.exit(main())
