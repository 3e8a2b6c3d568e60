#!/usr/bin/env python3
"""
dstg - disentangled transformer encoder toolkit
Main entry point and command dispatcher
"""

import argparse
import signal
import sys

from common_utils import BLUE, GREEN, NC, YELLOW, print_error
from core.errors import DstgError
from core.state import set_quiet
from managers.commands import (
    cmd_attn,
    cmd_compare,
    cmd_heads,
    cmd_hidden_pca,
    cmd_probe,
    cmd_spectrum,
    cmd_train,
    cmd_vocab,
)
from managers.config import help_epilog, resolve_config

COMMANDS = {
    "train": "Train a variant, write checkpoint/ and loss.csv",
    "probe": "Structural probes of one or more checkpoints",
    "heads": "Head taxonomy by KL ablation (DSTG only)",
    "spectrum": "PCA + DCT spectrum of a position table or imported CSV matrix",
    "attn": "Per-component attention maps of one layer (DSTG only)",
    "hidden-pca": "2D PCA of one stream's hidden states",
    "compare": "MLM-scope comparison and inter-model regression",
    "vocab": "Build a WordPiece vocabulary from the corpus",
}


def show_usage():
    """Show usage information"""
    print(f"{YELLOW}Usage: {sys.argv[0]} [command] [options]{NC}")
    print(f"\n{BLUE}Training Commands:{NC}")
    print(f"  train        {COMMANDS['train']}")
    print(f"  vocab        {COMMANDS['vocab']}")

    print(f"\n{BLUE}Analysis Commands:{NC}")
    for name in ("probe", "heads", "spectrum", "attn", "hidden-pca", "compare"):
        print(f"  {name:<12} {COMMANDS[name]}")

    print(f"\n{BLUE}Common Options:{NC}")
    print("  --config FILE    flat key = value config file")
    print("  --set KEY=VALUE  override one config key (repeatable)")
    print("  --variant, --steps, --seed, --threads, --out   shortcuts for --set")

    print(f"\n{BLUE}Examples:{NC}")
    print(f"  {GREEN}dstg train --config configs/desk.toml{NC}              # Desk DSTG run")
    print(f"  {GREEN}dstg train --config configs/desk.toml --variant rope{NC}")
    print(f"  {GREEN}dstg probe runs/train-*/checkpoint{NC}                # Probe CSVs per target")
    print(f"  {GREEN}dstg spectrum --set embedding_csv=table.csv{NC}       # No checkpoint needed")
    print(f"  {GREEN}dstg heads --help{NC}                                 # Every config key")
    return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="dstg", description="Disentangled transformer encoder toolkit")
    parser.add_argument("--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (flat key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--variant", help="shortcut for --set variant=...")
    common.add_argument("--steps", type=int, help="shortcut for --set steps=...")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=...")
    common.add_argument("--threads", type=int, help="shortcut for --set threads=...")
    common.add_argument("--out", help="shortcut for --set out=...")

    epilog = help_epilog()
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "train":
            p.add_argument("--resume", help="checkpoint directory to continue from")
        elif name in ("probe", "compare"):
            p.add_argument("checkpoints", nargs="+", help="checkpoint directories")
        elif name == "spectrum":
            p.add_argument("checkpoint", nargs="?", help="checkpoint directory (omit with embedding_csv)")
        elif name != "vocab":
            p.add_argument("checkpoint", help="checkpoint directory")
    return parser


def dispatch(args):
    """Run the chosen command, returns its run directory"""
    config = resolve_config(
        args.config,
        args.set,
        variant=args.variant,
        steps=args.steps,
        seed=args.seed,
        threads=args.threads,
        out=args.out,
    )
    command = args.command
    if command == "train":
        return cmd_train(config, resume=args.resume)
    elif command == "probe":
        return cmd_probe(config, args.checkpoints)
    elif command == "heads":
        return cmd_heads(config, args.checkpoint)
    elif command == "spectrum":
        return cmd_spectrum(config, args.checkpoint)
    elif command == "attn":
        return cmd_attn(config, args.checkpoint)
    elif command == "hidden-pca":
        return cmd_hidden_pca(config, args.checkpoint)
    elif command == "compare":
        return cmd_compare(config, args.checkpoints)
    elif command == "vocab":
        return cmd_vocab(config)
    raise DstgError(f"unknown command '{command}'")


def main(argv=None):
    """Main function - Command dispatcher"""
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        return show_usage()
    args = build_parser().parse_args(argv)
    if args.command is None:
        return show_usage()
    set_quiet(args.quiet)
    try:
        dispatch(args)
    except DstgError as e:
        print_error(str(e))
        return 1
    return 0


if __name__ == "__main__":
    # Handle Ctrl+C gracefully
    def signal_handler(sig, frame):
        print(f"\n{YELLOW}Process interrupted. Exiting...{NC}")
        sys.exit(0)

    signal.signal(signal.SIGINT, signal_handler)
    sys.exit(main())
