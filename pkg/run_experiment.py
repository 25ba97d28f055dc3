import argparse
import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), 'src')))
from nic.commands import (
    cmd_generate, cmd_iterate, cmd_mc_dropout, cmd_phase_portrait, cmd_roa, cmd_simulate, cmd_train,
)
from nic.config import load_config
from nic.errors import ConfigError, NicError

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3


def parse_state(text):
    """'0.1,-0.2' -> [0.1, -0.2]"""
    try:
        return [float(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def build_parser():
    parser = argparse.ArgumentParser(description="Learn and evaluate stabilizing controllers")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="Path to experiment config")
        p.add_argument("--out", help="Output directory (default: config output_dir/<command>)")
        p.add_argument("--seed", type=int, help="Override the config seed")
        return p

    add("generate", "Sample training and validation datasets")

    p = add("train", "Run both training stages on a generated dataset")
    p.add_argument("--dataset", help="Directory holding train.csv and val.csv")

    p = add("simulate", "Simulate closed-loop trajectories")
    p.add_argument("--checkpoints", help="Checkpoint directory of a trained controller")
    p.add_argument("--baseline", choices=["lqr", "zero"], help="Simulate a baseline controller instead")
    p.add_argument("--x0", type=parse_state, action="append", required=True,
                   help="Initial state as comma-separated values (repeatable)")

    p = add("roa", "Estimate the region of attraction")
    p.add_argument("--checkpoints", help="Checkpoint directory of a trained controller")
    p.add_argument("--baseline", choices=["lqr", "zero"], help="Evaluate a baseline controller instead")

    p = add("iterate", "Iterative learning with ROA-guided data")
    p.add_argument("--rounds", type=int, help="Override iterate.rounds")

    p = add("mc-dropout", "Failure-probability map by MC dropout")
    p.add_argument("--checkpoints", required=True, help="Checkpoint directory of a trained controller")
    p.add_argument("--grid", type=int, help="Grid resolution per axis (default: mc_dropout.grid)")

    p = add("phase-portrait", "Integrate a grid of starts and draw the trajectories")
    p.add_argument("--source", choices=["hypothesis", "closed_loop"], default="hypothesis")
    p.add_argument("--checkpoints", help="Checkpoint directory (hypothesis: optional, closed_loop: required)")
    return parser


def run(args):
    cfg = load_config(args.config).with_overrides(seed=args.seed, rounds=getattr(args, 'rounds', None))
    out = args.out or os.path.join(cfg.output_dir, args.command)

    if args.command == "generate":
        return cmd_generate(cfg, out)
    if args.command == "train":
        return cmd_train(cfg, args.dataset or os.path.join(cfg.output_dir, "generate"), out)
    if args.command == "simulate":
        return cmd_simulate(cfg, args.checkpoints, args.x0, out, baseline=args.baseline)
    if args.command == "roa":
        checkpoints = args.checkpoints
        if checkpoints is None and args.baseline is None:
            checkpoints = os.path.join(cfg.output_dir, "train")
        return cmd_roa(cfg, out, checkpoints=checkpoints, baseline=args.baseline)
    if args.command == "iterate":
        return cmd_iterate(cfg, out)
    if args.command == "mc-dropout":
        return cmd_mc_dropout(cfg, args.checkpoints, out, grid=args.grid)
    if args.command == "phase-portrait":
        return cmd_phase_portrait(cfg, args.source, out, checkpoints=args.checkpoints)
    raise ConfigError(f"unknown command '{args.command}'", field='command')


def report_error(e):
    """One machine-parsable line on stderr: `ErrorClass: message`."""
    message = " ".join(str(e).split())
    print(f"{type(e).__name__}: {message}", file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigError as e:
        report_error(e)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        report_error(e)
        return EXIT_MISSING_FILE
    except NicError as e:
        report_error(e)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
