"""Command-line entry point: ``tofdenoise <command> [--config cfg.json] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .calib import CalibFormatError, UnderdeterminedPixelError
from .imagecore import AmplitudeImage, RangeImage, read_image
from .mlp import ModelFormatError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, dotted keys allowed (repeatable)")
    p.add_argument("--run-dir", help="shortcut for --set run_dir=DIR")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tofdenoise", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="generate scenes, captures and calibration frames"))
    _common(sub.add_parser("fit-calib", help="fit the per-pixel calibration model"))
    p = sub.add_parser("train", help="train the range or boundary networks")
    p.add_argument("--target", choices=("range", "boundary"), required=True)
    _common(p)
    p = sub.add_parser("infer", help="run calibrate -> F -> G -> geodesic filter")
    p.add_argument("--split", default="test", help="manifest split to process (default: test)")
    p.add_argument("--range", dest="range_path", help="single raw range image instead of a split")
    p.add_argument("--amplitude", help="amplitude image paired with --range")
    p.add_argument("--out-prefix", help="output path prefix for a single image")
    _common(p)
    p = sub.add_parser("eval", help="accuracy curves, edge precision/recall and the report")
    p.add_argument("--split", default="test")
    _common(p)
    p = sub.add_parser("run", help="all stages in sequence")
    _common(p)
    p = sub.add_parser("show-config", help="print the resolved configuration")
    _common(p)
    return ap


def _stage(name: str, fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    print(f"[{name}] {1e3 * (time.perf_counter() - t0):.1f} ms")
    return out


def _print_timings(timings: dict):
    for sid, t in timings.items():
        parts = " ".join(f"{k}={v:.1f}ms" for k, v in t.items())
        print(f"  {sid}: {parts}")


def _print_report(report: dict):
    print(f"accuracy at {report['tau_mm']:g} mm ({report['n_scenes']} scenes):")
    for row in report["rows"]:
        print(f"  {row['method']:<11} {row['region']:<9} {row['accuracy_at_tau']:.4f}")
    print(f"relative improvement vs distorted:  {report['relative_improvement']:+.4f}")
    print(f"relative improvement vs calibrated: {report['relative_improvement_vs_calibrated']:+.4f}")
    pr = report["edge_pr"]
    print(f"edge best F1 @ {pr['tolerance_px']:g} px: detector {pr['detector']['best_f1']:.4f}, "
          f"canny calibrated {pr['canny_on_calibrated']['best_f1']:.4f}, "
          f"canny distorted {pr['canny_on_distorted']['best_f1']:.4f}")


def _infer_single(cfg, args):
    if not (args.range_path and args.amplitude and args.out_prefix):
        raise pipeline.ConfigError("--range, --amplitude and --out-prefix go together")
    raw = read_image(args.range_path)
    amp = read_image(args.amplitude)
    if not isinstance(raw, RangeImage) or not isinstance(amp, AmplitudeImage):
        raise pipeline.DataError("expected a range image and an amplitude image")
    cmodel = pipeline.load_calibration(cfg)
    rmodel, bmodels = pipeline.load_models(cfg)
    res = pipeline.infer_frame(cfg, raw, amp, cmodel, rmodel, bmodels)
    paths = pipeline.write_infer_outputs(res, Path(args.out_prefix))
    _print_timings({Path(args.range_path).name: res.timings_ms})
    for k, v in paths.items():
        print(f"  {k}: {v}")


def run(args) -> int:
    overrides = list(args.overrides)
    if args.run_dir:
        overrides.insert(0, f"run_dir={json.dumps(args.run_dir)}")
    cfg = pipeline.load_config(args.config, overrides)
    cmd = args.command
    if cmd == "show-config":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    elif cmd == "simulate":
        m = _stage("simulate", pipeline.simulate_dataset, cfg)
        print(f"wrote {len(m['scenes'])} scenes to {cfg.data_path}")
    elif cmd == "fit-calib":
        _stage("fit-calib", pipeline.fit_calibration_stage, cfg)
        print(f"wrote {cfg.model_path / 'calib.tfc'}")
    elif cmd == "train":
        if args.target == "range":
            m = _stage("train-range", pipeline.train_range_stage, cfg)
            print(f"range loss: epoch 1 {m.epoch_losses[0]:.4f}, final {m.epoch_losses[-1]:.4f}")
        else:
            m = _stage("train-boundary", pipeline.train_boundary_stage, cfg)
            for g, losses in enumerate(m.epoch_losses):
                if losses:
                    print(f"group {g} loss: epoch 1 {losses[0]:.4f}, final {losses[-1]:.4f}")
    elif cmd == "infer":
        if args.range_path or args.amplitude or args.out_prefix:
            _infer_single(cfg, args)
        else:
            _print_timings(_stage("infer", pipeline.infer_stage, cfg, args.split))
    elif cmd == "eval":
        _print_report(_stage("eval", pipeline.evaluate_stage, cfg, args.split))
    elif cmd == "run":
        _stage("simulate", pipeline.simulate_dataset, cfg)
        _stage("fit-calib", pipeline.fit_calibration_stage, cfg)
        _stage("train-range", pipeline.train_range_stage, cfg)
        _stage("train-boundary", pipeline.train_boundary_stage, cfg)
        _print_timings(_stage("infer", pipeline.infer_stage, cfg))
        _print_report(_stage("eval", pipeline.evaluate_stage, cfg))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, UnderdeterminedPixelError, CalibFormatError, ModelFormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
