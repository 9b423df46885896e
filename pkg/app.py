from __future__ import annotations
import argparse
import logging
import sys

# config first: it loads .env and sets up logging before anything else logs
from config import ConfigError, parse_config
from logic.contrastive import ContractError, QueueError
from logic.tensor import NonFiniteError, ParameterError
from routes.core import bp as core_bp
from routes.debug import bp as debug_bp
from routes.registry import UsageError
from services.checkpoint import CheckpointError
from services.feature_file import FeatureFileError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

GROUPS = [core_bp, debug_bp]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key=value run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides config and --set)")
    p.add_argument("--data", default=None, help="feature file to read")
    p.add_argument("--checkpoint", default=None, help="checkpoint to read (or write, for train)")
    p.add_argument("--out", default=None, help="where to write the result")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubvl", description="Dual-tower contrastive training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    # Wiring every command group onto one parser; don't forget new groups here.
    for group in GROUPS:
        for cmd in group.commands.values():
            p = sub.add_parser(cmd.name, help=cmd.help)
            _add_common(p)
            for flags, kwargs in cmd.arguments:
                p.add_argument(*flags, **kwargs)
            p.set_defaults(handler=cmd.handler)
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    # dedicated flags win over --set, which wins over the file
    items = list(args.set)
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        items.append(f"epochs={args.epochs}")
    return items


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        cfg = parse_config(args.config, _overrides(args))
        return args.handler(args, cfg)
    except (ConfigError, UsageError, ContractError, QueueError, ParameterError) as e:
        # settings or inputs that cannot work together, whatever the files hold
        log.error("❌ %s", e)
        return EXIT_USAGE
    except NonFiniteError as e:
        log.error("❌ numeric failure, nothing was updated: %s", e)
        return EXIT_NUMERIC
    except (OSError, FeatureFileError, CheckpointError) as e:
        log.error("❌ %s", e)
        return EXIT_IO
    except ValueError as e:
        # inputs that parse but do not fit together (shapes, ids, labels)
        log.exception("❌ %s failed: %s", args.command, e)
        return EXIT_IO
    except Exception as e:
        log.exception("❌ %s crashed: %s", args.command, e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
