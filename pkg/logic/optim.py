from __future__ import annotations
import logging
from dataclasses import dataclass, field

import numpy as np

from logic.tensor import Tensor

log = logging.getLogger(__name__)


class OptimizerError(KeyError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, max_grad_norm: float = 0.0) -> float:
    """One bias-corrected adaptive-moment update, then zero the gradients.

    Returns the pre-clipping global gradient norm. ``max_grad_norm`` > 0 rescales
    gradients whose global norm exceeds it.
    """
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
    norm = global_grad_norm(params)
    clip = 1.0
    if max_grad_norm > 0 and norm > max_grad_norm:
        clip = max_grad_norm / norm
        log.debug("Clipping grad norm %.4f -> %.4f", norm, max_grad_norm)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad * clip if clip != 1.0 else p.grad
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise OptimizerError(f"moment buffer for {name!r} has shape {m.shape}, parameter has {p.shape}")
        m = (b1 * m + (1.0 - b1) * g).astype(p.data.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.data.dtype)
        state.first_moments[name] = m
        state.second_moments[name] = v
        update = state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        p.data = (p.data - update).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
    return norm
