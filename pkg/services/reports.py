from __future__ import annotations
import logging
from pathlib import Path
from typing import Mapping, Sequence

from logic.metrics import SegmentEvent
from services.binary import read_bytes, write_bytes

log = logging.getLogger(__name__)

METR_MAGIC = b"METR\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    return str(value)


def encode_metrics(metrics: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in metrics.items():
        if "\t" in key or "\n" in key:
            raise ValueError(f"metric key {key!r} contains a tab or newline")
        lines.append(f"{key}\t{format_value(value)}\n")
    return METR_MAGIC + "".join(lines).encode("utf-8")


def decode_metrics(buf: bytes) -> dict[str, str]:
    if not buf.startswith(METR_MAGIC):
        raise ValueError(f"not a METR report (starts with {buf[:5]!r})")
    out = {}
    for no, line in enumerate(buf[len(METR_MAGIC):].decode("utf-8").splitlines(), start=2):
        if not line:
            continue
        key, sep, value = line.partition("\t")
        if not sep:
            raise ValueError(f"METR line {no} has no tab: {line!r}")
        out[key] = value
    return out


def write_metrics(path: str | Path, metrics: Mapping[str, object]):
    write_bytes(path, encode_metrics(metrics))
    log.info("✅ report written to %s", path)


def read_metrics(path: str | Path) -> dict[str, str]:
    return decode_metrics(read_bytes(path))


def write_rerank_report(path: str | Path, query_ids: Sequence[int], selections: Sequence[Sequence[tuple[int, float]]]):
    """One ``# query <id>`` header per query, then ``candidate_id<TAB>score`` lines best first."""
    lines = []
    for qid, picks in zip(query_ids, selections):
        lines.append(f"# query {qid}\n")
        lines.extend(f"{cid}\t{score:.6f}\n" for cid, score in picks)
    write_bytes(path, "".join(lines).encode("utf-8"))
    log.info("✅ rerank report for %d queries written to %s", len(query_ids), path)


def format_terms(terms: Mapping[str, float]) -> str:
    return " ".join(f"{name}={weight:g}" for name, weight in terms.items())


def write_history(
    path: str | Path, epoch_losses: Sequence[float], first_epoch: int = 1, terms: Mapping[str, float] | None = None,
):
    lines = [f"# loss terms: {format_terms(terms)}\n"] if terms else []
    lines.append("epoch\tloss\n")
    lines.extend(f"{first_epoch + i}\t{loss:.6f}\n" for i, loss in enumerate(epoch_losses))
    write_bytes(path, "".join(lines).encode("utf-8"))


def read_events(path: str | Path) -> list[SegmentEvent]:
    """Tab-separated ``onset offset class`` lines; ``#`` starts a comment."""
    text = read_bytes(path).decode("utf-8")
    events = []
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{no}: expected onset, offset and class, got {line!r}")
        try:
            events.append(SegmentEvent(float(parts[0]), float(parts[1]), int(parts[2])))
        except ValueError:
            raise ValueError(f"{path}:{no}: cannot parse {line!r}") from None
    return events
