from __future__ import annotations
from typing import Mapping

from services.reports import format_terms, format_value


def render_metrics(title: str, metrics: Mapping[str, object]) -> str:
    # Same key=value shape as the METR files, just easier on the eyes.
    width = max((len(k) for k in metrics), default=0)
    lines = [f"== {title} =="]
    lines.extend(f"{k.ljust(width)} = {format_value(v)}" for k, v in metrics.items())
    return "\n".join(lines)


def render_history(epoch_losses: list[float], first_epoch: int = 1, terms: Mapping[str, float] | None = None) -> str:
    title = f"== training ({format_terms(terms)}) ==" if terms else "== training =="
    if not epoch_losses:
        return f"{title} (no epochs run)"
    lines = [title]
    lines.extend(f"epoch {first_epoch + i:>3} = {loss:.6f}" for i, loss in enumerate(epoch_losses))
    return "\n".join(lines)


def render_selfcheck(results) -> str:
    lines = ["== selfcheck =="]
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        lines.append(f"{mark} {r.name}  {r.detail}".rstrip())
    return "\n".join(lines)


def render_rerank(query_ids, selections) -> str:
    lines = ["== rerank =="]
    for qid, picks in zip(query_ids, selections):
        best = ", ".join(f"{cid} ({score:.4f})" for cid, score in picks)
        lines.append(f"query {qid} -> {best}")
    return "\n".join(lines)
