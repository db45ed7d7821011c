#!/usr/bin/env python3
"""
AltAlign - Align a multilingual student text encoder with a frozen text-image space.

Main CLI entry point for the unified altalign command.
"""

import argparse
import sys

from . import __version__, ablate, evaluate, synth, train
from .common import EXIT_NUMERICAL, EXIT_USAGE, AltAlignError, setup_logging
from .tensor import ZeroNormError


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog='altalign',
        description='AltAlign - Two-stage multilingual text-image alignment',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the synthetic corpus
  altalign gen-synth --seed 7 --out-dir corpus

  # Stage 1 then Stage 2
  altalign distill --data corpus --out runs/stage1
  altalign contrast --data corpus --init-checkpoint runs/stage1/distill.ckpt --out runs/stage2

  # Evaluate and ablate
  altalign eval --checkpoint runs/stage2/contrast.ckpt --data corpus --task retrieval --out runs/eval
  altalign ablate --data corpus --out runs/ablation
        """
    )

    parser.add_argument(
        '--version',
        action='version',
        version=f'%(prog)s {__version__}'
    )
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='Increase log verbosity (-v info, -vv debug)')

    subparsers = parser.add_subparsers(
        dest='command',
        title='commands',
        description='Available altalign commands',
        help='Command to execute'
    )

    synth.add_parser(subparsers)
    train.add_parser(subparsers)
    evaluate.add_parser(subparsers)
    ablate.add_parser(subparsers)
    return parser


def main(argv=None):
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_USAGE)

    setup_logging(args.verbose)

    try:
        args.func(args)
    except KeyboardInterrupt:
        print("\n\nInterrupted by user", file=sys.stderr)
        sys.exit(130)
    except AltAlignError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except ZeroNormError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL)
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


if __name__ == '__main__':
    main()
