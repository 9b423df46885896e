from __future__ import annotations
import argparse
from dataclasses import dataclass, field
from typing import Callable


class UsageError(ValueError):
    pass


@dataclass
class Command:
    name: str
    help: str
    handler: Callable
    arguments: list[tuple[tuple[str, ...], dict]] = field(default_factory=list)


class CommandGroup:
    """A named bundle of subcommands; app.py registers every group on one parser."""

    def __init__(self, name: str):
        self.name = name
        self.commands: dict[str, Command] = {}

    def command(self, name: str, help: str = "", args: list[tuple[tuple[str, ...], dict]] | None = None):
        def register(fn):
            if name in self.commands:
                raise ValueError(f"command {name!r} registered twice in {self.name}")
            self.commands[name] = Command(name, help, fn, list(args or []))
            return fn
        return register


def require(args: argparse.Namespace, name: str) -> str:
    value = getattr(args, name, None)
    if not value:
        raise UsageError(f"--{name.replace('_', '-')} is required here")
    return value
