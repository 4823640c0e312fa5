"""Command-line driver: ``fedrf pretrain | adapt | eval | report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .experiment import METHODS, ExperimentConfig

log = logging.getLogger("fedrf")


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.full_scale:
        cfg = experiment.full_scale(cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if getattr(args, "regime", None):
        cfg = replace(cfg, data=replace(cfg.data, regime=args.regime))
    if getattr(args, "rank", None) is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, rank=args.rank))
    if getattr(args, "parallel", None) is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, parallel=args.parallel))
    return cfg


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    experiment.write_resolved(cfg, out)
    _, losses = experiment.pretrain(cfg, out)
    print(f"backbone written to {experiment.backbone_path(out)} "
          f"(mse {losses[0]:.4f} -> {losses[-1]:.4f})")
    return 0


def cmd_adapt(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    if not experiment.backbone_path(out).exists():
        print(f"error: no backbone checkpoint at {experiment.backbone_path(out)}; "
              "run 'pretrain' first", file=sys.stderr)
        return 2
    experiment.write_resolved(cfg, out)
    d = experiment.run_adapt(cfg, out, args.method, cfg.data.regime, cfg.adapt.rank)
    print(f"{args.method} artifacts written to {d}")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    methods = [experiment.method_dirname(args.method, cfg.adapt.rank)] if args.method else None
    summary = experiment.run_eval(cfg, out, cfg.data.regime, methods)
    for r in summary:
        if r["node"] == "avg":
            print(f"{r['method']:<14} avg BER {r['avg_ber']:.5f}  improvement {r['improvement_pct']:+.2f}%")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    print(experiment.build_report(Path(cfg.out), cfg.data.regime), end="")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults: desk scale)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="run directory (overrides config 'out')")
    common.add_argument("--regime", choices=("balanced", "imbalanced"), help="node data regime")
    common.add_argument("--full-scale", action="store_true", help="use full-scale data and training sizes")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="fedrf", description="Federated RF interference separation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the backbone on communication interference")
    p = sub.add_parser("adapt", parents=[common], help="adapt the backbone on every node")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--rank", type=int, choices=(2, 4, 8), help="LoRA rank")
    p.add_argument("--parallel", type=int, help="train federated nodes on N threads")
    p = sub.add_parser("eval", parents=[common], help="BER sweeps for all adapted methods")
    p.add_argument("--method", choices=METHODS, help="evaluate only this method")
    p.add_argument("--rank", type=int, choices=(2, 4, 8), help="LoRA rank for --method")
    sub.add_parser("report", parents=[common], help="tradeoff table and markdown report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
