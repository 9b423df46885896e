from __future__ import annotations
import dataclasses
import logging
import struct
from pathlib import Path

import numpy as np

from logic.contrastive import TrainState, build_train_state
from services.binary import ByteReader, f32_bytes, read_bytes, write_bytes

log = logging.getLogger(__name__)

UBVL_MAGIC = b"UBVL"
UBVL_VERSION = 1

# Reserved tensor names next to the plain parameter names ("image.*", "language.*"):
#   key.<param>                momentum (key) encoder copy
#   f_proj.* / g_proj.*        optional projection heads
#   __optim__.step             [step count]
#   __optim__.m.<param>        first moment
#   __optim__.v.<param>        second moment
#   __queue__.<side>.buffer    ring buffer rows
#   __queue__.<side>.cursor    [head, fill]
#   __train__.epoch            [epoch, step]
#   __arch__                   ARCH_FIELDS in order
# Counters and cursors ride in f32 like everything else, so they are exact only
# below 2**24; _counters refuses to write anything larger.
COUNTER_LIMIT = 2 ** 24

ARCH_FIELDS = (
    "image_dim", "audio_dim", "embed_dim", "width", "heads", "ffn_mult", "proj_hidden",
    "grid_size", "sa_layers", "speech_layers", "shared_layers", "n_units", "max_seq_len",
    "proj_heads", "queue_mode", "queue_size",
)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


def encode_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    """Names are written sorted so the same tensors always give the same bytes."""
    parts = [UBVL_MAGIC, struct.pack("<II", UBVL_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} does not fit a byte")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(f32_bytes(arr))
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    rd = ByteReader(buf, TruncatedFileError)
    magic = rd.take(4, "magic")
    if magic != UBVL_MAGIC:
        raise BadMagicError(f"bad magic {magic!r} at offset 0, expected {UBVL_MAGIC!r}")
    (version,) = rd.unpack("I", "version")
    if version != UBVL_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} at offset 4, this build reads {UBVL_VERSION}")
    (count,) = rd.unpack("I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        at = rd.pos
        (n,) = rd.unpack("H", f"tensor {i} name length")
        try:
            name = rd.take(n, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor {i} name at offset {at} is not UTF-8") from e
        (rank,) = rd.unpack("B", f"{name} rank")
        dims = rd.unpack(f"{rank}I", f"{name} dims")
        count_ = int(np.prod(dims)) if rank else 1
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r} at offset {at}")
        out[name] = rd.array("f4", count_, f"{name} data").reshape(dims)
    if rd.remaining:
        raise CheckpointError(f"{rd.remaining} trailing bytes at offset {rd.pos}")
    return out


def write_tensors(path: str | Path, arrays: dict[str, np.ndarray]):
    write_bytes(path, encode_tensors(arrays))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(read_bytes(path))


# training state <-> tensors

def _arch_vector(state: TrainState) -> np.ndarray:
    missing = [k for k in ARCH_FIELDS if k not in state.arch]
    if missing:
        raise CheckpointError(f"train state does not record {missing}")
    return _counters("__arch__", [state.arch[k] for k in ARCH_FIELDS])


def _counters(name: str, values) -> np.ndarray:
    for v in values:
        if not 0 <= int(v) < COUNTER_LIMIT:
            raise CheckpointError(f"{name}: {v} is outside the exact f32 range [0, {COUNTER_LIMIT})")
    return np.array(values, dtype=np.float32)


def state_to_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = dict(state.towers.state_arrays())
    for name, p in state.loss_cfg.head_parameters().items():
        arrays[name] = p.data
    if state.keys is not None:
        arrays.update({f"key.{n}": a for n, a in state.keys.state_arrays().items()})
    opt = state.optimizer
    arrays["__optim__.step"] = _counters("__optim__.step", [opt.step_count])
    for name, m in opt.first_moments.items():
        arrays[f"__optim__.m.{name}"] = m
    for name, v in opt.second_moments.items():
        arrays[f"__optim__.v.{name}"] = v
    for side, q in (state.queues or {}).items():
        arrays[f"__queue__.{side}.buffer"] = q.buffer
        arrays[f"__queue__.{side}.cursor"] = _counters(f"__queue__.{side}.cursor", [q.head, q.fill])
    arrays["__train__.epoch"] = _counters("__train__.epoch", [state.epoch, state.step])
    arrays["__arch__"] = _arch_vector(state)
    return arrays


def arch_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, int]:
    if "__arch__" not in arrays:
        raise CheckpointError("checkpoint has no __arch__ record")
    vec = arrays["__arch__"]
    if vec.shape != (len(ARCH_FIELDS),):
        raise CheckpointError(f"__arch__ has shape {vec.shape}, expected ({len(ARCH_FIELDS)},)")
    return {k: int(v) for k, v in zip(ARCH_FIELDS, vec)}


def state_from_arrays(arrays: dict[str, np.ndarray], cfg) -> TrainState:
    """Rebuild a TrainState; architecture comes from the checkpoint, the rest from ``cfg``."""
    arch = arch_from_arrays(arrays)
    cfg = dataclasses.replace(
        cfg,
        **{k: arch[k] for k in ARCH_FIELDS if k not in ("image_dim", "audio_dim", "proj_heads", "queue_mode")},
        proj_heads=bool(arch["proj_heads"]),
        mode="queue" if arch["queue_mode"] else "in_batch",
        # batch size is not part of the state; train_step still checks it against the queue
        batch_size=min(cfg.batch_size, arch["queue_size"]) if arch["queue_mode"] else cfg.batch_size,
    )
    state = build_train_state(cfg, arch["image_dim"], arch["audio_dim"])
    try:
        state.towers.load_arrays(arrays)
        for prefix, head in (("f_proj.", state.loss_cfg.f_proj), ("g_proj.", state.loss_cfg.g_proj)):
            if head is not None:
                head.load_arrays(arrays, prefix)
        if state.keys is not None:
            state.keys.load_arrays(arrays, "key.")
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing {e.args[0]}") from e
    except ValueError as e:
        raise CheckpointError(str(e)) from e

    opt = state.optimizer
    opt.step_count = int(arrays.get("__optim__.step", np.zeros(1))[0])
    for name, arr in arrays.items():
        if name.startswith("__optim__.m."):
            opt.first_moments[name[len("__optim__.m."):]] = arr.copy()
        elif name.startswith("__optim__.v."):
            opt.second_moments[name[len("__optim__.v."):]] = arr.copy()
    for side, q in (state.queues or {}).items():
        buf = arrays.get(f"__queue__.{side}.buffer")
        cursor = arrays.get(f"__queue__.{side}.cursor")
        if buf is None or cursor is None:
            raise CheckpointError(f"checkpoint is missing the {side} queue")
        if buf.shape != q.buffer.shape:
            raise CheckpointError(f"{side} queue buffer {buf.shape} != {q.buffer.shape}")
        q.buffer = buf.copy()
        q.head, q.fill = int(cursor[0]), int(cursor[1])
    epoch, step = arrays.get("__train__.epoch", np.zeros(2))
    state.epoch, state.step = int(epoch), int(step)
    return state


def save_checkpoint(path: str | Path, state: TrainState):
    write_tensors(path, state_to_arrays(state))
    log.info("✅ checkpoint saved to %s (epoch %d, step %d)", path, state.epoch, state.step)


def load_checkpoint(path: str | Path, cfg) -> TrainState:
    state = state_from_arrays(read_tensors(path), cfg)
    log.info("✅ checkpoint loaded from %s (epoch %d, step %d)", path, state.epoch, state.step)
    return state
