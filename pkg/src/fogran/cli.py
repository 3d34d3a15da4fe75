"""Command line entry point: ``fogran {train,eval,sweep,transfer,vi-check}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig, load_run_config, parse_rho_list, reduced_scenario
from . import harness


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    changes = {"mode": args.verb}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.episodes is not None:
        changes["eval_episodes"] = args.episodes
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.rho is not None and args.verb != "sweep":
        rho = parse_rho_list(args.rho)
        changes["rho"] = rho[0] if len(rho) == 1 else rho
    return cfg.replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogran", description=__doc__)
    p.add_argument("verb", choices=("train", "eval", "sweep", "transfer", "vi-check"))
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint to evaluate or transfer from")
    p.add_argument("--rho", help="caching probability; comma list for sweep or per-UE values")
    p.add_argument("--episodes", type=int, help="evaluation epochs")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--policy", default="drl",
                   choices=("drl", "drl_cran_only", "q_learning", "d2d_always", "random"),
                   help="learner for train, controller for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"fogran: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("fogran: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    out = cfg.out_dir
    progress = max(cfg.epochs // 20, 1) if args.verbose else 0

    if args.verb == "train":
        if args.policy not in harness.LEARNERS:
            print(f"fogran: cannot train policy {args.policy!r}", file=sys.stderr)
            return 2
        res = harness.run_training(cfg, out, kind=args.policy, progress_every=progress)
        print(f"wrote {res.metrics_path} and {res.checkpoint_path}")
    elif args.verb == "eval":
        if args.policy in harness.LEARNERS and not args.checkpoint:
            print("fogran: eval needs --checkpoint for learned policies", file=sys.stderr)
            return 2
        summary = harness.run_evaluation(args.checkpoint, cfg, out, kind=args.policy)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif args.verb == "sweep":
        rhos = parse_rho_list(args.rho) if args.rho else [0.6, 0.75, 0.9]
        table = harness.run_sweep(cfg, rhos, out)
        for row in table:
            print(f"rho={row['rho']}: mean power {row['mean_power_w']:.3f} W, "
                  f"discounted reward {row['mean_discounted_reward']:.2f}")
    elif args.verb == "transfer":
        if not args.checkpoint:
            print("fogran: transfer needs --checkpoint", file=sys.stderr)
            return 2
        res = harness.run_transfer(args.checkpoint, cfg, out)
        print(f"wrote {res.metrics_path} and {res.checkpoint_path}")
    else:
        if not args.config:
            # the full scenario is too large to enumerate; default to the reduced one
            cfg = cfg.replace(scenario=reduced_scenario())
        summary = harness.run_vi_check(cfg, out)
        print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
