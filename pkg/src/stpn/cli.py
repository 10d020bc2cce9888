"""Command-line entry point: ``stpn {gen-data,train,eval,sweep,gradcheck}``.

stdout carries machine-readable CSV; human logs (with timestamps) go to
stderr. Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric
failure.
"""
import argparse
import logging
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

from . import harness
from .config import RunConfig, load_config
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .synthvid import SPEED_CATEGORIES, DegradationSpec, gen_dataset, motion_iou_category, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_epilog():
    lines = ["config keys (key = value; defaults shown):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name} = {f.default!r}")
    return "\n".join(lines)


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _bounded(lo, hi, kind=float):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} {text!r}") from None
        if not lo <= v <= hi:
            raise argparse.ArgumentTypeError(f"{v} not in [{lo}, {hi}]")
        return v
    return parse


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="stpn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic video dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output dataset file")
    g.add_argument("--clips", type=_bounded(0, 10**7, int), default=200, help="number of clips")
    g.add_argument("--frames", type=_bounded(1, 10**5, int), default=8, help="frames per clip")
    g.add_argument("--size", type=_size, default=(32, 32), help="frame size HxW")
    g.add_argument("--classes", type=_bounded(1, 10**4, int), default=4, help="number of sprite classes")
    g.add_argument("--seed", type=_bounded(0, 2**64 - 1, int), default=0, help="dataset seed")
    g.add_argument("--blur-len", type=_bounded(1, 10**4, int), default=7, help="motion blur length in pixels")
    g.add_argument("--occl-frac", type=_bounded(0.0, 1.0), default=1.0, help="occluder area as a fraction of the box")
    g.add_argument("--degrade-prob", type=_bounded(0.0, 1.0), default=0.5, help="per-frame degradation probability")

    t = sub.add_parser("train", help="train a model into a run directory", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=_config_epilog())
    t.add_argument("--config", help="config file (key = value lines or JSON); default: all defaults")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable; wins over the file)")
    t.add_argument("--out", help="run directory (default: config 'out', else ./run)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint archive (final.ckpt)")
    e.add_argument("--data", required=True, help="dataset file to evaluate on")
    e.add_argument("--config", help="config file used for training")
    e.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    e.add_argument("--csv", help="also write the metric row to this CSV file")

    s = sub.add_parser("sweep", help="train/evaluate over a grid of S, K or NP", formatter_class=fmt)
    s.add_argument("--config", help="base config file")
    s.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMS), help="swept hyper-parameter")
    s.add_argument("--values", required=True, help="comma-separated integer values")
    s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", help="run directory for sweep.csv (default: config 'out', else ./run)")

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="seed for the tiny model and inputs")
    return p


def cmd_gen_data(args):
    h, w = args.size
    spec = DegradationSpec(blur_len=args.blur_len, occluder_fraction=args.occl_frac,
                           degrade_prob=args.degrade_prob)
    try:
        clips = gen_dataset(args.clips, args.frames, h, w, args.classes, spec, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_dataset(clips, args.out)
    speeds = Counter(motion_iou_category(c.boxes)[0] for c in clips if c.T >= 2)
    print("clips," + ",".join(SPEED_CATEGORIES))
    print(f"{len(clips)}," + ",".join(str(speeds.get(k, 0)) for k in SPEED_CATEGORIES))
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config, args.override)
    out = args.out or config.out or "run"
    result = harness.run_training(config, out)
    print(harness.METRICS_HEADER)
    for rec in result.history:
        print(rec.csv_row(config.log_wallclock))
    return EXIT_OK


def cmd_eval(args):
    config = load_config(args.config, args.override)
    if not Path(args.data).exists():
        raise FormatError(f"dataset not found: {args.data}")
    params = harness.load_checkpoint(args.ckpt)
    clips = harness.read_dataset(args.data)
    rec = harness.evaluate(params, clips, config)
    print(harness.METRICS_HEADER)
    print(rec.csv_row(False))
    if args.csv:
        harness.write_metrics(args.csv, [rec])
    return EXIT_OK


def cmd_sweep(args):
    config = load_config(args.config, args.override)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    rows = harness.ablation_sweep(config, args.param, values)
    out = Path(args.out or config.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config.to_text(), encoding="utf-8")
    harness.write_sweep(out / "sweep.csv", rows)
    print(harness.SWEEP_HEADER)
    for r in rows:
        print(r.csv_row())
    return EXIT_OK


def cmd_gradcheck(args):
    entries = harness.gradcheck_suite(seed=args.seed)
    print("group,max_rel_error,coords,status")
    for e in entries:
        print(f"{e.group},{e.max_rel_error:.3e},{e.coords},{'pass' if e.ok else 'FAIL'}")
    return EXIT_OK if all(e.ok for e in entries) else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"stpn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, FileNotFoundError) as exc:
        print(f"stpn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"stpn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
