from __future__ import annotations
import logging

from config import SELFCHECK_SEEDS, RunConfig
from logic.selfcheck import run_selfcheck
from routes.registry import CommandGroup
from services.reports import write_metrics
from ui import render_selfcheck

log = logging.getLogger(__name__)
bp = CommandGroup("debug")

EXIT_SELFCHECK = 4


@bp.command("selfcheck", help="gradient, metric-oracle and queue suites", args=[
    (("--seeds",), {"type": int, "default": None, "help": "gradient-suite seeds (default UBVL_SELFCHECK_SEEDS)"}),
])
def selfcheck(args, cfg: RunConfig) -> int:
    report = run_selfcheck(args.seeds or SELFCHECK_SEEDS)
    print(render_selfcheck(report.results))
    if args.out:
        metrics = {"command": "selfcheck", "passed": report.passed}
        metrics.update({r.name: r.passed for r in report.results})
        write_metrics(args.out, metrics)
    return 0 if report.passed else EXIT_SELFCHECK
