"""Command line entry point: ``smdlab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..learner import MODES
from .config import ConfigError, apply_setting, load_config, paper_mirror_toy
from .runner import (SWEEP_AXES, dump_trajectories, load_or_init, run_eval, run_membench, run_sweep, run_train,
                     run_variance_lab)


def _common(p):
    p.add_argument("--config", help="sectioned key = value config file (default: paper-mirror-toy)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--mode", choices=MODES, help="overrides learner.mode")
    p.add_argument("--out", help="output directory (overrides train.out_dir)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="section.key=value override; repeatable")


def build_parser():
    ap = argparse.ArgumentParser(prog="smdlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="rollouts + learner updates; writes metrics.tsv")
    _common(p)

    p = sub.add_parser("sweep", help="one training run per value of an axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("membench", help="peak-memory ratios of physical slicing vs mask simulation")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-head", type=int, default=16)
    p.add_argument("--keys", type=int, default=1000)
    p.add_argument("--retention", default="0.5,0.8,1.0", help="comma-separated retained fractions")

    p = sub.add_parser("variance-lab", help="importance-ratio variance: simulation and policy measurement")
    _common(p)
    p.add_argument("--sigma2", type=float, default=0.04)
    p.add_argument("--lengths", default="10,50,100")
    p.add_argument("--samples", type=int, default=10 ** 6)
    p.add_argument("--policy-lengths", default="16,32,64")
    p.add_argument("--policy-seeds", default="0,1,2,3,4")

    p = sub.add_parser("eval", help="greedy-decode reward on held-out instances")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint; default is the warm-started init")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--dense", action="store_true", help="decode without cache compression")

    p = sub.add_parser("dump-traj", help="write sparse rollouts as JSON lines")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompts", type=int, default=4)
    p.add_argument("--file", default="trajectories.jsonl")
    return ap


def _experiment(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.mode is not None:
        overrides.append(f"learner.mode={args.mode}")
    if args.out is not None:
        overrides.append(f"train.out_dir={args.out}")
    base = None if args.config else paper_mirror_toy()
    return load_config(args.config, overrides, base)


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "membench":
            _print(run_membench(args.layers, args.heads, args.d_head, args.keys, _floats(args.retention)))
            return 0
        exp = _experiment(args)
        out = Path(exp.train.out_dir)
        if args.command == "train":
            s = run_train(exp, out)
            _print({k: v for k, v in s.items() if k not in ("params", "rewards")})
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            _print(run_sweep(exp, args.axis, values, out))
        elif args.command == "variance-lab":
            _print(run_variance_lab(exp, args.sigma2, _ints(args.lengths), args.samples,
                                    _ints(args.policy_lengths), _ints(args.policy_seeds)))
        elif args.command == "eval":
            params = load_or_init(exp, args.checkpoint)
            _print({"reward": run_eval(exp, params, args.n, args.dense), "n": args.n, "dense": args.dense})
        elif args.command == "dump-traj":
            params = load_or_init(exp, args.checkpoint)
            out.mkdir(parents=True, exist_ok=True)
            recs = dump_trajectories(exp, params, out / args.file, args.prompts)
            _print({"file": str(out / args.file), "records": len(recs)})
    except (ConfigError, ValueError, OSError) as e:
        print(f"smdlab: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
