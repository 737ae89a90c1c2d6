"""Command-line entry point mounting every pipeline stage as a subcommand.

    python src/cli.py [--config FILE] [--seed N] [--mel-only] <command> ...

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from config import apply_overrides, load_config
from errors import ConfigError, PipelineError

import stage0_synthetic
import stage1_features
import stage2_split
import stage3_train_metric
import stage3b_train_baseline
import stage4_train_head
import stage5_openset_fit
import stage6_classify
import stage7_eval
import stage7b_ablation
import stage8_embed
import stage9_benchmark

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# command -> stage module; nested groups map their actions the same way
COMMANDS = {
    "synth": stage0_synthetic,
    "features": stage1_features,
    "split": stage2_split,
    "openset": {"fit": stage5_openset_fit},
    "train": {
        "metric": stage3_train_metric,
        "baseline": stage3b_train_baseline,
        "head": stage4_train_head,
    },
    "classify": stage6_classify,
    "eval": stage7_eval,
    "ablation": stage7b_ablation,
    "embed": stage8_embed,
    "benchmark": stage9_benchmark,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every seeded component")
    g.add_argument("--mel-only", action="store_true", default=argparse.SUPPRESS, help="Mel copied into all channels")
    g.add_argument("--cache-dir", default=argparse.SUPPRESS, help="feature store directory")
    g.add_argument("--no-progress", action="store_true", default=argparse.SUPPRESS, help="hide progress bars")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="cli.py", description="Bioacoustic metric-learning pipeline", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    for name, target in COMMANDS.items():
        if isinstance(target, dict):
            group = sub.add_parser(name, help=f"{name} commands", parents=[common])
            actions = group.add_subparsers(dest="action", metavar="<action>", parser_class=_Parser)
            for action, module in target.items():
                p = actions.add_parser(action, help=module.__doc__.splitlines()[0], parents=[common])
                module.add_arguments(p)
                p.set_defaults(run=module.run)
        else:
            p = sub.add_parser(name, help=target.__doc__.splitlines()[0], parents=[common])
            target.add_arguments(p)
            p.set_defaults(run=target.run)
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if not hasattr(args, "run"):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    configure_logging(getattr(args, "verbose", False))
    try:
        cfg = apply_overrides(
            load_config(getattr(args, "config", None)),
            seed=getattr(args, "seed", None),
            mel_only=getattr(args, "mel_only", None),
            cache_dir=getattr(args, "cache_dir", None),
        )
        return int(args.run(args, cfg))
    except ConfigError as e:
        print(f"ERROR: {e}")
        return EXIT_USAGE
    except PipelineError as e:
        print(f"ERROR: {e}")
        return EXIT_DATA


def run_stage(argv_prefix: Sequence[str]) -> None:
    """Entry used by the stage scripts' ``main()``."""
    sys.exit(cli_dispatch([*argv_prefix, *sys.argv[1:]]))


if __name__ == "__main__":
    sys.exit(cli_dispatch())
