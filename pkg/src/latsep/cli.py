"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 runtime check failure.
Only stdlib is imported at module level so --threads can pin the BLAS
thread-count environment before numpy loads; --threads 1 guarantees
byte-identical artifacts for identical seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import (CheckpointError, ConditionError, ConfigError, FormatError,
                     GradCheckError, InputError, LatsepError, TrainingDiverged)

USAGE_EXIT = 2
CHECK_EXIT = 3


# ---------------------------------------------------------------------------
# config document

_EVAL_DEFAULTS = {"budget_rtf": 1.0, "eps": 1e-7, "chunk_seconds": 6.0,
                  "overlap_fraction": 0.25, "throughput_seconds": 10.0,
                  "sample_rate": 8000}
_IO_KEYS = {"data_dir", "out_dir"}


def load_cli_config(path):
    """Parse the JSON config with sections model/train/eval/io; unknown keys
    are rejected at every level, and the fully-resolved document is returned
    alongside the parsed dataclasses."""
    from .model import ModelConfig
    from .train import TrainConfig

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno} col {exc.colno}: "
                          f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - {"model", "train", "eval", "io"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    eval_cfg = dict(_EVAL_DEFAULTS)
    for key, value in doc.get("eval", {}).items():
        if key not in _EVAL_DEFAULTS:
            raise ConfigError(f"unknown eval config key: {key!r}")
        eval_cfg[key] = value
    io_cfg = doc.get("io", {})
    bad = set(io_cfg) - _IO_KEYS
    if bad:
        raise ConfigError(f"unknown io config keys: {sorted(bad)}")

    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "eval": eval_cfg, "io": io_cfg}
    return model_cfg, train_cfg, eval_cfg, io_cfg, resolved


def _log_resolved(resolved: dict, out_dir=None):
    line = json.dumps(resolved, sort_keys=True)
    print(f"config: {line}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "resolved_config.json", "w") as fh:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# dataset directory layout

def write_dataset_dir(out_dir, dataset, seed: int, n_test: int = 0):
    from .spectro import write_wav
    from .train import STEM_NAMES

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, stems in enumerate(dataset.tracks):
        tdir = out / f"track_{i:03d}"
        tdir.mkdir(exist_ok=True)
        for name in STEM_NAMES:
            write_wav(tdir / f"{name}.wav", stems.stems[name])
        split = "test" if i >= len(dataset.tracks) - n_test else "train"
        entries.append({"id": stems.track_id, "dir": tdir.name, "split": split})
    manifest = {"sample_rate": dataset.tracks[0].sample_rate,
                "n_samples": dataset.tracks[0].n_samples,
                "seed": seed, "tracks": entries}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset_dir(data_dir, split=None):
    from .spectro import read_wav
    from .train import Dataset, STEM_NAMES, StemSet

    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tracks = []
    for entry in manifest["tracks"]:
        if split is not None and entry.get("split", "train") != split:
            continue
        tdir = root / entry["dir"]
        stems = {name: read_wav(tdir / f"{name}.wav") for name in STEM_NAMES}
        tracks.append(StemSet(stems, track_id=entry["id"]))
    if not tracks:
        raise InputError(f"no tracks for split {split!r} under {root}")
    return Dataset(tracks, split=split or "train")


# ---------------------------------------------------------------------------
# commands

def cmd_make_dataset(args) -> int:
    from .train import make_toy_dataset

    if args.tracks < 2:
        raise ConfigError("--tracks must be >= 2 (augmentation needs distinct tracks)")
    if args.test_tracks >= args.tracks:
        raise ConfigError("--test-tracks must leave at least one training track")
    dataset = make_toy_dataset(args.tracks, seconds=args.seconds,
                               sample_rate=args.sample_rate, seed=args.seed)
    manifest = write_dataset_dir(args.out, dataset, seed=args.seed,
                                 n_test=args.test_tracks)
    print(f"wrote {len(manifest['tracks'])} tracks "
          f"({4 * len(manifest['tracks'])} stems) under {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import build
    from .train import train_loop

    model_cfg, train_cfg, _evalc, io_cfg, resolved = load_cli_config(args.config)
    data_dir = args.data or io_cfg.get("data_dir")
    out_dir = args.out or io_cfg.get("out_dir")
    if data_dir is None or out_dir is None:
        raise ConfigError("train needs --data and --out (or io.data_dir/io.out_dir)")
    _log_resolved(resolved, out_dir)
    dataset = load_dataset_dir(data_dir, split="train")

    start_step = 0
    optimizer = None
    if args.resume:
        model, optimizer, start_step = load_checkpoint(args.resume,
                                                       expected_config=model_cfg)
        print(f"resumed from {args.resume} at step {start_step}")
    else:
        model = build(model_cfg)

    result = train_loop(model, dataset, train_cfg, out_dir=out_dir,
                        optimizer=optimizer, start_step=start_step)
    first = result.history[0][1] if result.history else float("nan")
    last = result.history[-1][1] if result.history else float("nan")
    print(f"trained {len(result.history)} steps: loss {first:.6f} -> {last:.6f}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_separate(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import condition, separate_track
    from .spectro import read_wav, write_wav

    cond = condition(args.source)
    model, _opt, _step = load_checkpoint(args.ckpt)
    clip = read_wav(args.infile)
    out = separate_track(model, clip, cond, chunk_seconds=args.chunk_seconds,
                         overlap_fraction=args.overlap_fraction)
    write_wav(args.out, out)
    print(f"wrote {cond.name} estimate ({out.duration:.2f}s) to {args.out}")
    return 0


def cmd_params(args) -> int:
    import dataclasses

    from .model import build, count_parameters

    model_cfg, _t, _e, _io, resolved = load_cli_config(args.config)
    _log_resolved(resolved)
    variants = ("lasaft", "lightsaft", "lightsaft_plus") \
        if args.variant == "all" else (args.variant,)
    totals = {}
    for variant in variants:
        cfg = dataclasses.replace(model_cfg, variant=variant)
        audit = count_parameters(build(cfg))
        totals[variant] = audit["total"]
        print(f"\n[{variant}]")
        for name, count in audit["by_module"].items():
            print(f"  {name:<24} {count:>12,}")
        print(f"  {'total':<24} {audit['total']:>12,}")
    if args.variant == "all":
        ordered = totals["lasaft"] > totals["lightsaft"] > totals["lightsaft_plus"]
        ratio = totals["lightsaft_plus"] / totals["lightsaft"]
        print(f"\nordering lasaft > lightsaft > lightsaft_plus: "
              f"{'PASS' if ordered else 'FAIL'}")
        print(f"lightsaft_plus/lightsaft = {ratio:.3f}")
        if not ordered:
            return CHECK_EXIT
    return 0


def _run_gradcheck(seeds: int, verbose: bool = True) -> bool:
    import numpy as np

    from .model import build, gradcheck_config
    from .numerics import Tensor, grad_check
    from .numerics import ops
    from .train import mse_loss

    ok = True

    def report(name, rep):
        nonlocal ok
        ok &= rep.passed
        if verbose:
            print(f"{'PASS' if rep.passed else 'FAIL'} {name}: "
                  f"max rel err {rep.max_rel_err:.3e}")

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        report(f"linear seed {seed}", grad_check(
            lambda: ops.mean(ops.mul(ops.linear(x, w, b), ops.linear(x, w, b))),
            [("x", x), ("w", w), ("b", b)], h=1e-4, tol=1e-4))

        xc = Tensor(rng.standard_normal((2, 6, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        bc = Tensor(rng.standard_normal(3), requires_grad=True)
        report(f"conv2d seed {seed}", grad_check(
            lambda: ops.mean(ops.mul(ops.conv2d(xc, k, bc, (1, 1), (1, 1)),
                                     ops.conv2d(xc, k, bc, (1, 1), (1, 1)))),
            [("x", xc), ("k", k), ("b", bc)], h=1e-4, tol=1e-4))

    cfg = gradcheck_config("lightsaft", seed=0)
    model = build(cfg, dtype=np.float64)
    rng = np.random.default_rng(1234)
    x = Tensor(rng.standard_normal((cfg.spec_channels, cfg.freq_dim, 4)))
    target = Tensor(rng.standard_normal((cfg.spec_channels, cfg.freq_dim, 4)))
    report("desk model", grad_check(
        lambda: mse_loss(model(x, "vocals"), target),
        list(model.named_parameters()), h=1e-4, tol=1e-3))
    return ok


def cmd_gradcheck(args) -> int:
    ok = _run_gradcheck(args.seeds)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else CHECK_EXIT


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .eval import ModelSeparator, OracleSeparator, evaluate, throughput_check, write_report

    if not args.oracle and not args.ckpt:
        raise ConfigError("eval needs --ckpt (or --oracle)")
    dataset = load_dataset_dir(args.data, split=args.split)
    model = None
    if args.ckpt:
        model, _opt, _step = load_checkpoint(args.ckpt)
    separator = OracleSeparator() if args.oracle else ModelSeparator(model)
    report = evaluate(separator, dataset)
    print(report.format_table())
    if args.out:
        write_report(args.out, report)
        print(f"wrote report to {args.out}")

    failed = False
    if model is not None:
        budget = throughput_check(model, budget_rtf=args.budget_rtf,
                                  sample_rate=dataset.tracks[0].sample_rate,
                                  threads=args.threads)
        print(f"throughput: {budget.track_seconds:.1f}s audio in "
              f"{budget.wall_seconds:.2f}s wall, rtf {budget.rtf:.3f} "
              f"(budget {budget.budget_rtf}) -> "
              f"{'PASS' if budget.passed else 'FAIL'}")
        failed = not budget.passed
    return CHECK_EXIT if failed else 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latsep",
        description="Conditioned source separation toolkit (toy scale, CPU).")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads; 1 guarantees determinism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="synthesize a toy stem dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tracks", type=int, required=True)
    p.add_argument("--seconds", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--test-tracks", type=int, default=0)
    p.set_defaults(handler=cmd_make_dataset)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("separate", help="separate one source from a WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--source", required=True,
                   choices=["vocals", "drums", "bass", "other"])
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-seconds", type=float, default=6.0)
    p.add_argument("--overlap-fraction", type=float, default=0.25)
    p.set_defaults(handler=cmd_separate)

    p = sub.add_parser("params", help="parameter audit per variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", default="all",
                   choices=["all", "lasaft", "lightsaft", "lightsaft_plus"])
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scale", default="desk", choices=["desk"])
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("eval", help="SDR report and throughput budget check")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--budget-rtf", type=float, default=1.0)
    p.add_argument("--oracle", action="store_true",
                   help="score the true-stem oracle stub instead of a model")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return USAGE_EXIT
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.handler(args)
    except (ConfigError, FormatError, InputError, ConditionError,
            CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainingDiverged, GradCheckError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return CHECK_EXIT
    except LatsepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CHECK_EXIT


if __name__ == "__main__":
    sys.exit(main())
