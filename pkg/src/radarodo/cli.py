"""Command line entry point: ``radarodo simulate|run|evaluate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import BadSpec, ConfigError, EmptyStream, NoOverlap, ParseError, RadarOdoError, TooShort
from .evaluation import evaluate, read_tum, write_per_length_csv
from .pipeline import run_files
from .simulator import write_dataset

log = logging.getLogger("radarodo")

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_INPUT = 2
EXIT_EVAL = 3


def _load(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    run, noise, world = {}, {}, {}
    if getattr(args, "model", None):
        run["model"] = args.model
    if getattr(args, "seed", None) is not None:
        noise["seed"] = args.seed
        world["seed"] = args.seed
    overrides = {k: v for k, v in (("run", run), ("noise", noise), ("world", world)) if v}
    if getattr(args, "window", None) is not None:
        overrides["odom"] = {"window": args.window}
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    paths = write_dataset(cfg.sim_config(), args.out_dir)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def _dataset_path(args, explicit: str | None, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    if args.dataset is None:
        raise FileNotFoundError(default_name)
    return Path(args.dataset) / default_name


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    radar = _dataset_path(args, args.radar, cfg.run.radar_file)
    imu = _dataset_path(args, args.imu, cfg.run.imu_file)
    out = Path(args.out)
    raw = out.with_name(out.stem + "_raw.tum") if args.emit_raw else None
    diag = out.with_name(out.stem + "_diag.jsonl") if args.diagnostics else None
    summary = run_files(cfg, radar, imu, out, raw, diag, threaded=not args.single_thread)
    report = {k: v for k, v in dataclasses.asdict(summary).items() if k != "trajectory"}
    print(json.dumps(report))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    est = read_tum(args.estimate)
    gt = read_tum(args.groundtruth)
    lengths = tuple(args.lengths) if args.lengths else cfg.eval.subtraj_lengths
    report = evaluate(est, gt, align=cfg.eval.align and not args.no_align, max_dt=cfg.eval.max_dt, subtraj_lengths=lengths)
    print(report.to_json())
    if args.csv:
        write_per_length_csv(args.csv, report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarodo", description="4D radar-inertial odometry toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", metavar="PATH", help="TOML configuration file")
        sp.add_argument("--seed", type=int, help="override noise and world seeds")

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("out_dir")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="estimate a trajectory from radar + IMU files")
    common(sp)
    sp.add_argument("dataset", nargs="?", help="directory holding the radar and IMU files")
    sp.add_argument("--radar", help="radar JSONL file (overrides the dataset directory)")
    sp.add_argument("--imu", help="IMU CSV file (overrides the dataset directory)")
    sp.add_argument("-o", "--out", default="trajectory.tum", help="estimated TUM trajectory")
    sp.add_argument("--model", choices=["unconstrained", "holonomic", "nonholonomic"])
    sp.add_argument("--window", type=int, help="sliding-window size")
    sp.add_argument("--diagnostics", action="store_true", help="write <out>_diag.jsonl")
    sp.add_argument("--emit-raw", action="store_true", help="write raw odometry to <out>_raw.tum")
    sp.add_argument("--single-thread", action="store_true", help="run both stages in one thread")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="compare a TUM trajectory against ground truth")
    common(sp)
    sp.add_argument("estimate")
    sp.add_argument("groundtruth")
    sp.add_argument("--no-align", action="store_true", help="report unaligned errors")
    sp.add_argument("--lengths", type=float, nargs="+", help="sub-trajectory lengths in meters")
    sp.add_argument("--csv", help="write per-length errors to this CSV")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ParseError, ConfigError, EmptyStream, BadSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NoOverlap, TooShort) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except RadarOdoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
