"""``cim`` command line: pretrain, train-eim, eval, plot.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
``CIM_LOG`` sets the log level (DEBUG, INFO, WARNING, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .errors import CimError, ConfigError, NumericError
from .runs import run_eim, run_eval, run_plot, run_pretrain

EXIT_CONFIG, EXIT_NUMERIC = 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cim", description="Constrained intrinsic motivation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="reward-free skill pretraining")
    pre.add_argument("--config", required=True)
    pre.add_argument("--seed", type=int, required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config entry, e.g. --set run.total_steps=8192")

    eim = sub.add_parser("train-eim", help="task training with an intrinsic bonus")
    eim.add_argument("--config", required=True)
    eim.add_argument("--skills", help="pretraining run (directory or checkpoint) for meta-control")
    eim.add_argument("--seed", type=int, required=True)
    eim.add_argument("--out", required=True)
    eim.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--out", required=True)
    ev.add_argument("--stochastic", action="store_true", help="sample actions instead of taking the mode")

    pl = sub.add_parser("plot", help="render a trajectory CSV as SVG")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict:
    out = {"run.seed": str(args.seed), "run.out": args.out}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CIM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            cfg = load_config(args.config, _overrides(args)).validate()
            run_pretrain(cfg, args.out)
        elif args.command == "train-eim":
            cfg = load_config(args.config, _overrides(args))
            if args.skills:
                cfg.eim.skills = args.skills
            run_eim(cfg.validate(), args.out, args.skills)
        elif args.command == "eval":
            summary = run_eval(args.ckpt, args.episodes, args.out, deterministic=not args.stochastic)
            summary.pop("trajectories")
            print(json.dumps(summary, indent=2))
        elif args.command == "plot":
            run_plot(args.csv, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
