"""Command-line interface: gen-data | train | upsample | eval | grad-check.

Exit codes: 0 success, 1 contract/runtime error, 2 usage error. Error
paths print a single `dbpnet: error[<code>]: ...` line, never a stack
trace. `DBPNET_CHECKPOINT_DIR` supplies a default directory for bare
checkpoint filenames.
"""

from __future__ import annotations

import argparse
import os
import sys

from .cloud_io import read_ply_ascii, read_xyz, write_xyz
from .errors import ConfigError, DbpnetError
from .geometry import Plane, Sphere, Torus
from .gradient_suite import run_gradient_suite
from .metrics import MetricsReport
from .pipeline import evaluate, load_checkpoint, load_config, sample_surface, train, upsample_cloud

import numpy as np

CHECKPOINT_DIR_ENV = "DBPNET_CHECKPOINT_DIR"


def parse_surface(text):
    """`kind:params` strings: sphere:RADIUS, torus:MAJOR,MINOR, plane[:HALF]."""
    kind, _, raw = text.partition(":")
    args = [p for p in raw.split(",") if p] if raw else []
    try:
        values = [float(p) for p in args]
    except ValueError as exc:
        raise ConfigError(f"bad surface parameters in {text!r}") from exc
    if kind == "sphere":
        if len(values) != 1:
            raise ConfigError("sphere needs exactly one radius, e.g. sphere:1.0")
        return Sphere(values[0])
    if kind == "torus":
        if len(values) != 2:
            raise ConfigError("torus needs two radii, e.g. torus:1.0,0.3")
        return Torus(values[0], values[1])
    if kind == "plane":
        if len(values) > 1:
            raise ConfigError("plane takes at most one half-extent, e.g. plane:1.0")
        return Plane(values[0] if values else 1.0)
    raise ConfigError(f"unknown surface kind {kind!r}")


def resolve_checkpoint_path(path):
    base = os.environ.get(CHECKPOINT_DIR_ENV)
    if base and not os.path.dirname(path):
        return os.path.join(base, path)
    return path


def _read_cloud(path):
    if path.endswith(".ply"):
        return read_ply_ascii(path)
    return read_xyz(path)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dbpnet", description="Point cloud upsampling toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="sample a synthetic surface cloud")
    gen.add_argument("--surface", required=True, help="e.g. sphere:1.0 or torus:1.0,0.3")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", required=True)

    up = sub.add_parser("upsample", help="arbitrary-scale inference")
    up.add_argument("--in", dest="input", required=True)
    up.add_argument("--ckpt", required=True)
    up.add_argument("--factor", type=float, required=True)
    up.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="metrics of a prediction vs target + surface")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--target", required=True)
    ev.add_argument("--surface", required=True)
    ev.add_argument("--name", default=None, help="row label, default: pred file stem")
    ev.add_argument("--header", action="store_true", help="also print the CSV header")

    gc = sub.add_parser("grad-check", help="finite-difference gradient verification")
    gc.add_argument("--n", type=int, default=8)
    gc.add_argument("--up-ratio", type=int, default=2)
    gc.add_argument("--channels", type=int, default=8)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _cmd_gen_data(args):
    surface = parse_surface(args.surface)
    points = sample_surface(surface, args.n, np.random.default_rng(args.seed))
    write_xyz(points, args.out)
    print(f"wrote {len(points)} points to {args.out}")
    return 0


def _cmd_train(args):
    config = load_config(args.config)
    config.checkpoint_path = resolve_checkpoint_path(config.checkpoint_path)
    result = train(config)
    final_step, final_loss, final_cd = result.log[-1]
    print(
        f"trained {final_step} steps: loss={final_loss:.6g} val_cd={final_cd:.6g}; "
        f"checkpoint at {config.checkpoint_path}, log at {config.log_path}"
    )
    return 0


def _cmd_upsample(args):
    cloud = _read_cloud(args.input)
    checkpoint = load_checkpoint(resolve_checkpoint_path(args.ckpt))
    dense = upsample_cloud(cloud.points, args.factor, checkpoint)
    write_xyz(dense, args.out)
    print(f"wrote {len(dense)} points to {args.out}")
    return 0


def _cmd_eval(args):
    pred = _read_cloud(args.pred)
    target = _read_cloud(args.target)
    surface = parse_surface(args.surface)
    report = evaluate(pred.points, target.points, surface)
    name = args.name or os.path.splitext(os.path.basename(args.pred))[0]
    if args.header:
        print(MetricsReport.csv_header())
    print(report.csv_row(name))
    return 0


def _cmd_grad_check(args):
    results = run_gradient_suite(
        n=args.n, up_ratio=args.up_ratio, channels=args.channels, seed=args.seed
    )
    failed = 0
    for name, err in results:
        status = "ok" if err <= args.tolerance else "FAIL"
        failed += status == "FAIL"
        print(f"{status:4s} {name:28s} max_rel_err={err:.3e}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "upsample": _cmd_upsample,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
}


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors with code 2
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except DbpnetError as exc:
        print(f"dbpnet: error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dbpnet: error[io-error]: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
