"""Command-line front end: one subcommand per stage, plus eval and plot.

Stage flags override config keys, so quick experiments do not need a config
file edit; everything else about a run is pinned by the config and its seed.
"""

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, default_config, load_config
from .evaluate import evaluate_checkpoints
from .plotsvg import plot_csv_file
from .stages import STAGES, run_stage

# CLI flag -> the config entry it overrides, per subcommand
_ITER_KEYS = {
    "pretrain": [("pretrain", "steps")],
    "sft": [("sft", "steps")],
    "rlhf": [("rlhf", "iterations")],
    "pe": [("pe", "iterations")],
    "distill": [
        ("distill", "stage1_iters"),
        ("distill", "stage2_iters"),
        ("distill", "stage3_iters"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="Post-training lab for toy flow-matching generators: "
        "supervised tuning, RLHF, prompt enhancement, and distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", metavar="PATH", help="config file (key = value text)")
        sp.add_argument("--seed", type=int, metavar="U64", help="override the global seed")
        sp.add_argument("--out", metavar="DIR", help="override the output directory")

    stage_help = {
        "pretrain": "flow-matching pretraining over all prompts",
        "sft": "supervised fine-tuning on curated prompts",
        "rlhf": "group-relative policy optimization against the reward",
        "pe": "prompt-enhancer policy training over the frozen generator",
        "distill": "three-stage few-step distillation of the tuned generator",
    }
    for stage in STAGES:
        sp = sub.add_parser(stage, help=stage_help[stage])
        add_common(sp)
        sp.add_argument("--iters", type=int, help="override the stage iteration count")
        if stage in ("rlhf", "pe"):
            sp.add_argument("--group-size", type=int, help="rollouts per prompt group")
            sp.add_argument("--clip", type=float, help="surrogate clipping epsilon")
        if stage == "pe":
            sp.add_argument("--beta-kl", type=float, help="KL penalty strength")
        if stage == "rlhf":
            sp.add_argument(
                "--weights", metavar="A,V,I,M", help="aggregate reward weights"
            )

    ev = sub.add_parser("eval", help="paired GSB comparison of two checkpoints")
    add_common(ev)
    ev.add_argument("ckpt_a", help="checkpoint A (the candidate)")
    ev.add_argument("ckpt_b", help="checkpoint B (the baseline)")
    ev.add_argument("--pairs", type=int, help="minimum total comparison pairs")
    ev.add_argument("--delta", type=float, help="GSB indifference margin")
    ev.add_argument("--weights", metavar="A,V,I,M", help="aggregate reward weights")

    pl = sub.add_parser("plot", help="render a metrics CSV to an SVG chart")
    pl.add_argument("csv", help="input CSV file")
    pl.add_argument("--svg", metavar="PATH", help="output SVG path (default: CSV stem)")
    pl.add_argument("--out", metavar="DIR", help="directory for the default SVG name")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    overrides = {}
    if args.seed is not None:
        overrides[("", "seed")] = args.seed
    if getattr(args, "out", None):
        overrides[("", "out")] = args.out
    if getattr(args, "iters", None) is not None:
        for loc in _ITER_KEYS[args.command]:
            overrides[loc] = args.iters
    if getattr(args, "group_size", None) is not None:
        overrides[(args.command, "group_size")] = args.group_size
    if getattr(args, "clip", None) is not None:
        overrides[(args.command, "clip")] = args.clip
    if getattr(args, "beta_kl", None) is not None:
        overrides[("pe", "beta_kl")] = args.beta_kl
    if getattr(args, "weights", None) is not None:
        overrides[("rewards", "weights")] = args.weights
    if getattr(args, "pairs", None) is not None:
        overrides[("eval", "pairs")] = args.pairs
    if getattr(args, "delta", None) is not None:
        overrides[("eval", "delta")] = args.delta
    return config.with_overrides(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            if args.svg:
                target = args.svg
            elif args.out:
                target = Path(args.out) / (Path(args.csv).stem + ".svg")
                Path(args.out).mkdir(parents=True, exist_ok=True)
            else:
                target = None
            written = plot_csv_file(args.csv, target)
            print(f"wrote {written}")
            return 0
        config = _config_from_args(args)
        if args.command == "eval":
            report = evaluate_checkpoints(config, args.ckpt_a, args.ckpt_b)
            print(report.summary())
            out = Path(config.out_dir)
            print(f"wrote {out / 'gsb_report.csv'} and {out / 'gsb_summary.txt'}")
            return 0
        result = run_stage(args.command, config)
        print(f"{args.command}: wrote {result.checkpoint_path} and {result.metrics_path}")
        return 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
