from __future__ import annotations
import logging
from typing import Callable

import numpy as np

from logic.tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NonDeterministicError(RuntimeError):
    pass


def _scalar(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    out = fn(Tensor(x.copy(), dtype=np.float64))
    return float(np.asarray(out.data, dtype=np.float64).reshape(-1)[0])


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, h: float = 1e-3) -> float:
    """Compare tape gradients of ``fn`` at ``point`` with central differences.

    The point is promoted to float64 so every op downstream runs in float64.
    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over coordinates.
    """
    base = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    first = _scalar(fn, base)
    second = _scalar(fn, base)
    if first != second:
        raise NonDeterministicError(f"fn returned {first!r} then {second!r} at the same point")

    with Tape() as tape:
        x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
        out = fn(x)
        tape.backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        up = _scalar(fn, bumped.reshape(base.shape))
        bumped[i] -= 2 * h
        down = _scalar(fn, bumped.reshape(base.shape))
        flat[i] = (up - down) / (2 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = float(err.max()) if err.size else 0.0
    log.debug("finite_diff_check over %d coords: max rel err %.3e", base.size, worst)
    return worst
