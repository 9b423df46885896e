from __future__ import annotations
import copy
import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_node_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """Dense array with an optional gradient buffer.

    ``data`` is a plain ``np.ndarray``; new tensors default to float32 but ops
    keep whatever float dtype their inputs promote to, which is how
    ``finite_diff_check`` runs a graph in float64.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"empty axis in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


# Tape

@dataclass
class _Op:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use it as a context manager; ops executed inside record themselves when any
    input requires a gradient. A tape runs backward once.
    """

    ops: list[_Op] = field(default_factory=list)
    consumed: bool = False
    _leaves: dict[int, Tensor] = field(default_factory=dict)
    _produced: set[int] = field(default_factory=set)
    _running: bool = False

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, kind, inputs, output, backward):
        if self.consumed:
            raise TapeError(f"cannot record {kind}: tape already ran backward")
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self._leaves.setdefault(t.node_id, t)
        self._produced.add(output.node_id)
        self.ops.append(_Op(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor):
        backward(loss, self)


def current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape):
    """Reverse pass over ``tape``; leaf gradients accumulate into ``.grad``."""
    if tape._running:
        raise TapeError("backward is not re-entrant")
    if tape.consumed:
        raise TapeError("tape already consumed by an earlier backward pass")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape._running = True
    try:
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(tape.ops):
            g = grads.pop(op.output.node_id, None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for node_id, leaf in tape._leaves.items():
            g = grads.get(node_id)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = np.array(g) if leaf.grad is None else leaf.grad + g
    finally:
        tape._running = False
        tape.consumed = True


# helpers

def _check_finite(kind: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {kind}")


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    data = np.asarray(data)
    _check_finite(kind, data)
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(kind, inputs, out, backward_fn)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(like.data.dtype if like is not None else DTYPE)
    elif arr.ndim == 0 and like is not None:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr, dtype=arr.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return _make("relu", np.where(active, x.data, 0).astype(x.data.dtype), (x,),
                 lambda g: (g * active,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Pick from ``a`` where ``cond`` holds, else from ``b`` (numpy broadcasting)."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = np.where(cond, a.data, b.data)

    def _back(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), a.shape),
                _unbroadcast(np.where(cond, zero, g), b.shape))

    return _make("where", out, (a, b), _back)


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}") from e

    def _back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), _back)


# reductions and shape plumbing

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), _back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if not axes else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def take(x: Tensor, index) -> Tensor:
    out = x.data[index]
    advanced = _is_advanced(index)

    def _back(g):
        full = np.zeros_like(x.data)
        if advanced:
            # repeated ids must add up
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make("take", np.array(out), (x,), _back)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids outside [0, {table.shape[0]}) for table {table.shape}")
    return take(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes disagree: {[t.shape for t in tensors]}") from e
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make("stack", out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# fused numerics

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty axis")
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def _back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", out, (x, gain, bias), _back)


def softmax_with_temperature(logits: Tensor, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return _make("softmax", p, (logits,), _back)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError(f"zero-norm vector along axis {axis} of {x.shape}")
    norm = norm.astype(x.data.dtype)
    y = x.data / norm

    def _back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), _back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; zero vectors are an error."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity dims differ: {a.shape} vs {b.shape}")
    return tsum(l2_normalize(a) * l2_normalize(b), axis=-1)


def cross_entropy(logits: Tensor, targets, scale: float = 1.0) -> Tensor:
    """Mean of ``-log softmax(scale * logits)[target]`` over rows.

    Accumulates in float64; the returned scalar stays float64.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [N, C] logits and [N] targets, got {logits.shape}, {targets.shape}")
    rows = np.arange(logits.shape[0])
    z = logits.data.astype(np.float64) * scale
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.float64((lse - z[rows, targets]).mean())

    def _back(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return ((p * (float(g) * scale / logits.shape[0])).astype(logits.data.dtype),)

    return _make("cross_entropy", np.asarray(loss), (logits,), _back)


# parameter containers

class Module:
    """Anything holding Tensor attributes (or lists of child modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        return self

    def clone(self) -> "Module":
        """Deep copy whose tensors get fresh node ids."""
        twin = copy.deepcopy(self)
        for p in twin.parameters().values():
            p.node_id = next(_node_ids)
            p.grad = None
        return twin

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing tensor {key!r}")
            value = np.asarray(arrays[key], dtype=p.data.dtype)
            if value.shape != p.shape:
                raise ShapeError(f"{key}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data = value.copy()


def parameter(data, dtype=DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def parameter_checksum(params: dict[str, Tensor] | Module) -> str:
    if isinstance(params, Module):
        params = params.parameters()
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
