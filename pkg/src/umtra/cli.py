"""``umtra`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .biasvar import ToySpec, bias_variance_estimate
from .config import ConfigError, load_config
from .harness import build_report, report_text, run_curve, run_meta_train, run_sweep, workers_from_env
from .rng import MONTE_CARLO, stream
from .taskgen import collision_probability, monte_carlo_collision


def _config(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_meta_train(args) -> int:
    cfg = _config(args)
    summary = run_meta_train(cfg, workers=workers_from_env())
    print(f"{summary['algorithm']} ({cfg.n_way}-way {cfg.k_shot_target}-shot): "
          f"accuracy {summary['accuracy']:.4f} +- {summary['ci']:.4f} -> {cfg.output_dir}")
    return 0


def cmd_collision(args) -> int:
    p = collision_probability(args.c, args.m, args.n_way)
    print(f"closed_form {p:.4f}")
    if args.mc:
        est, se = monte_carlo_collision(args.c, args.m, args.n_way, args.mc, stream(args.seed, 0, MONTE_CARLO))
        print(f"monte_carlo {est:.4f} stderr {se:.6f} trials {args.mc}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.grid}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    path = run_sweep(cfg, grid, workers=workers_from_env())
    print(Path(path).parent.joinpath("sweep.txt").read_text(), end="")
    return 0


def cmd_curve(args) -> int:
    cfg = _config(args)
    if args.plots:
        cfg = cfg.with_overrides({"emit_plots": True})
    path = run_curve(cfg, args.checkpoints, steps=args.steps, workers=workers_from_env())
    print(f"wrote {path}")
    return 0


def cmd_biasvar(args) -> int:
    toy = ToySpec.load(args.toy)
    result = bias_variance_estimate(toy, args.n_datasets, args.n_test_points, args.seed)
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    if args.out:
        io.atomic_write(args.out, text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    header, rows = build_report(args.run_dirs)
    text = report_text(header, rows)
    if args.out:
        out = Path(args.out)
        io.write_csv(out / "report.csv", header, rows)
        io.atomic_write(out / "report.txt", text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umtra", description="Unsupervised meta-learning with synthetic tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("meta-train", help="meta-train, evaluate and write a run directory")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("collision", help="probability that an N-sample episode has N distinct classes")
    s.add_argument("c", type=int)
    s.add_argument("m", type=int)
    s.add_argument("n_way", type=int)
    s.add_argument("--mc", type=int, default=0, metavar="TRIALS")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_collision)

    s = sub.add_parser("sweep", help="run a hyperparameter grid")
    s.add_argument("config")
    s.add_argument("grid")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("curve", help="per-step target-training accuracy curves")
    s.add_argument("config")
    s.add_argument("checkpoints", nargs="+", help="checkpoint paths, or 'scratch' for a fresh init")
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.add_argument("--plots", action="store_true", help="also write curve.svg")
    s.set_defaults(func=cmd_curve)

    s = sub.add_parser("biasvar", help="Monte-Carlo bias/variance decomposition on a toy regression")
    s.add_argument("toy")
    s.add_argument("--n-datasets", type=int, default=5000)
    s.add_argument("--n-test-points", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_biasvar)

    s = sub.add_parser("report", help="tabulate run summaries")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"umtra {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
