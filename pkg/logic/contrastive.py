from __future__ import annotations
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from tqdm import tqdm

from logic.data import Batch, PairedDataset, batch_iter, collate
from logic.encoders import MLP, DualTower, FeatureSequence, build_towers, encode_image, encode_language
from logic.optim import OptimizerState, optimizer_step
from logic.seeding import stream
from logic.tensor import (
    Module,
    NonFiniteError,
    ParameterError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    l2_normalize,
    tsum,
    transpose,
)

log = logging.getLogger(__name__)

MODES = ("in_batch", "queue")

# config fields that fix tensor shapes; checkpoints carry them
ARCH_KEYS = (
    "embed_dim", "width", "heads", "ffn_mult", "proj_hidden", "grid_size", "sa_layers",
    "speech_layers", "shared_layers", "n_units", "max_seq_len", "proj_heads", "queue_size",
)


class ContractError(ValueError):
    pass


class QueueError(ValueError):
    pass


@dataclass
class CxLossConfig:
    tau: float = 0.07
    mode: str = "in_batch"
    f_proj: MLP | None = None
    g_proj: MLP | None = None
    pred_loss_weight: float = 0.0
    text_weight: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")

    def head_parameters(self) -> dict[str, Tensor]:
        params = {}
        for prefix, head in (("f_proj.", self.f_proj), ("g_proj.", self.g_proj)):
            if head is not None:
                params.update({prefix + n: p for n, p in head.named_parameters()})
        return params

    def loss_terms(self) -> dict[str, float]:
        """Weights of the summed loss terms, as reported next to the loss values."""
        return {"cx": 1.0, "text": self.text_weight, "pred": self.pred_loss_weight}


# negative queue

class NegativeQueue:
    """Fixed-capacity FIFO ring of unit vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise QueueError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.head = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    @property
    def full(self) -> bool:
        return self.fill == self.capacity

    def push(self, rows) -> "NegativeQueue":
        rows = np.asarray(rows.data if isinstance(rows, Tensor) else rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"queue holds {self.dim}-dim rows, got {rows.shape}")
        if len(rows) > self.capacity:
            raise QueueError(f"batch of {len(rows)} exceeds queue capacity {self.capacity}")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise QueueError("queue entries must be unit-norm")
        idx = (self.head + np.arange(len(rows))) % self.capacity
        self.buffer[idx] = rows
        self.head = int((self.head + len(rows)) % self.capacity)
        self.fill = min(self.fill + len(rows), self.capacity)
        return self

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if not self.full:
            return self.buffer[:self.fill].copy()
        return np.roll(self.buffer, -self.head, axis=0)


def queue_push(queue: NegativeQueue, batch) -> NegativeQueue:
    return queue.push(batch)


# momentum encoders

@dataclass
class MomentumPair:
    query_encoder: Module
    key_encoder: Module
    m: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ParameterError(f"momentum must be in [0, 1], got {self.m}")

    @classmethod
    def from_query(cls, query: Module, m: float = 0.99) -> "MomentumPair":
        return cls(query, query.clone().freeze(), m)


def momentum_update(pair: MomentumPair) -> Module:
    """theta_key <- m * theta_key + (1 - m) * theta_query, in place."""
    keys = pair.key_encoder.parameters()
    queries = pair.query_encoder.parameters()
    if keys.keys() != queries.keys():
        raise ShapeError("key and query encoders have different parameter sets")
    for name, k in keys.items():
        q = queries[name]
        if k.shape != q.shape:
            raise ShapeError(f"{name}: key shape {k.shape} != query shape {q.shape}")
        k.data = (pair.m * k.data + (1.0 - pair.m) * q.data).astype(k.data.dtype)
    return pair.key_encoder


# losses

def _check_unit_rows(name: str, t: Tensor):
    norms = np.linalg.norm(np.asarray(t.data, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ContractError(f"{name} rows must be unit-norm (worst norm {norms.flat[np.argmax(np.abs(norms - 1.0))]:.6f})")


def info_nce(queries, positives, negatives=None, tau: float = 0.07, in_batch: bool = True) -> Tensor:
    """Mean over rows of -log softmax(q.p / tau) against the negatives.

    With ``in_batch`` the other rows of ``positives`` are negatives too (targets on
    the diagonal); ``negatives`` [K, d] are appended to every row either way.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    q = as_tensor(queries)
    p = as_tensor(positives)
    if q.ndim != 2 or q.shape != p.shape:
        raise ShapeError(f"queries {q.shape} and positives {p.shape} must both be [B, d]")
    if negatives is not None and len(negatives) == 0:
        negatives = None
    _check_unit_rows("query", q)
    _check_unit_rows("positive", p)
    b = q.shape[0]

    if in_batch:
        if b < 2 and negatives is None:
            raise ContractError("in-batch InfoNCE needs a batch of at least 2")
        logits = q @ transpose(p, (1, 0))
        targets = np.arange(b)
    else:
        if negatives is None:
            raise ContractError("InfoNCE needs at least one negative")
        logits = tsum(q * p, axis=-1, keepdims=True)
        targets = np.zeros(b, dtype=np.int64)
    if negatives is not None:
        n = as_tensor(negatives)
        if n.ndim != 2 or n.shape[1] != q.shape[1]:
            raise ShapeError(f"negatives {n.shape} do not match queries {q.shape}")
        _check_unit_rows("negative", n)
        logits = concat([logits, q @ transpose(n, (1, 0))], axis=1)
    return cross_entropy(logits, targets, scale=1.0 / tau)


def _project(z: Tensor, head: MLP | None) -> Tensor:
    return l2_normalize(head(z)) if head is not None else z


def cx_loss(
    image_z: Tensor,
    lang_z: Tensor,
    cfg: CxLossConfig,
    queues: dict[str, NegativeQueue] | None = None,
    key_embeddings: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """L(f(image) -> language) + L(g(language) -> image)."""
    if image_z.shape != lang_z.shape:
        raise ShapeError(f"paired embeddings differ: {image_z.shape} vs {lang_z.shape}")
    fi = _project(image_z, cfg.f_proj)
    gl = _project(lang_z, cfg.g_proj)
    if cfg.mode == "in_batch":
        return info_nce(fi, lang_z, tau=cfg.tau) + info_nce(gl, image_z, tau=cfg.tau)

    if not queues or "image" not in queues or "language" not in queues:
        raise ContractError("queue mode needs both an image and a language queue")
    key_image, key_lang = key_embeddings if key_embeddings is not None else (image_z, lang_z)
    terms = []
    for query, positives, queue in ((fi, key_lang, queues["language"]), (gl, key_image, queues["image"])):
        # under-full queues keep the in-batch negatives alongside what they hold
        negatives = queue.contents() if queue.fill else None
        terms.append(info_nce(query, positives, negatives, tau=cfg.tau, in_batch=not queue.full))
    return terms[0] + terms[1]


def masked_prediction_loss(pred_sims: Tensor, unit_ids: np.ndarray, mask: np.ndarray, tau_pred: float) -> Tensor:
    """Cross-entropy of unit targets at masked positions (all positions if none are masked)."""
    if not tau_pred > 0:
        raise ParameterError(f"tau_pred must be > 0, got {tau_pred}")
    mask = np.asarray(mask, dtype=bool)
    where_ = np.nonzero(mask if mask.any() else np.ones_like(mask))
    logits = pred_sims[where_]
    return cross_entropy(logits, np.asarray(unit_ids)[where_], scale=1.0 / tau_pred)


# training

@dataclass
class StepReport:
    step: int
    loss: float
    grad_norm: float
    queue_fill: int


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


@dataclass
class TrainState:
    towers: DualTower
    optimizer: OptimizerState
    loss_cfg: CxLossConfig
    seed: int = 0
    momentum: float = 0.99
    tau_pred: float = 0.1
    max_grad_norm: float = 0.0
    freeze_language: bool = False
    queues: dict[str, NegativeQueue] | None = None
    keys: DualTower | None = None
    epoch: int = 0
    step: int = 0
    arch: dict[str, int] = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        params = {n: p for n, p in self.towers.named_parameters() if p.requires_grad}
        params.update(self.loss_cfg.head_parameters())
        return params

    def momentum_pair(self) -> MomentumPair | None:
        if self.keys is None:
            return None
        return MomentumPair(self.towers, self.keys, self.momentum)

    @property
    def queue_fill(self) -> int:
        if not self.queues:
            return 0
        return min(q.fill for q in self.queues.values())


def build_train_state(cfg, image_dim: int, audio_dim: int) -> TrainState:
    """Fresh towers, heads, optimizer and (queue mode) key encoders from a RunConfig."""
    rng = stream(cfg.seed, "init")
    towers = build_towers(cfg, image_dim, audio_dim, rng)
    f_proj = g_proj = None
    if cfg.proj_heads:
        f_proj = MLP(cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim, rng)
        g_proj = MLP(cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim, rng)
    loss_cfg = CxLossConfig(cfg.tau, cfg.mode, f_proj, g_proj, cfg.pred_loss_weight, cfg.text_weight)
    state = TrainState(
        towers=towers,
        optimizer=OptimizerState(learning_rate=cfg.lr),
        loss_cfg=loss_cfg,
        seed=cfg.seed,
        momentum=cfg.momentum,
        tau_pred=cfg.tau_pred,
        max_grad_norm=cfg.max_grad_norm,
        freeze_language=cfg.freeze_language,
        arch={
            "image_dim": image_dim,
            "audio_dim": audio_dim,
            **{k: int(getattr(cfg, k)) for k in ARCH_KEYS},
            "queue_mode": int(cfg.mode == "queue"),
        },
    )
    if cfg.mode == "queue":
        state.queues = {
            "image": NegativeQueue(cfg.queue_size, cfg.embed_dim),
            "language": NegativeQueue(cfg.queue_size, cfg.embed_dim),
        }
        state.keys = MomentumPair.from_query(towers, cfg.momentum).key_encoder
    if cfg.freeze_language:
        towers.language.freeze()
    return state


def train_step(state: TrainState, batch: Batch) -> StepReport:
    if len(batch) < 2:
        raise ContractError(f"a training batch needs at least 2 pairs, got {len(batch)}")
    # nothing may change before this point if the keys cannot be enqueued afterwards
    for name, q in (state.queues or {}).items():
        if len(batch) > q.capacity:
            raise QueueError(f"{name} queue: batch of {len(batch)} exceeds queue capacity {q.capacity}")
    towers, cfg = state.towers, state.loss_cfg
    params = state.trainable()
    for p in params.values():
        p.zero_grad()
    mask_rng = stream(state.seed, "mask", state.step)
    swap_rng = stream(state.seed, "swap", state.step)
    seq = FeatureSequence(batch.modality, batch.frames, batch.unit_ids)

    with Tape() as tape:
        image_z = encode_image(batch.images, towers.image)
        out = encode_language(seq, towers.language, training=True, rng=mask_rng, swap_rng=swap_rng)
        keys = None
        if state.keys is not None:
            keys = (
                encode_image(batch.images, state.keys.image).data,
                encode_language(seq, state.keys.language).embedding.data,
            )
        loss = cx_loss(image_z, out.embedding, cfg, state.queues, keys)
        if cfg.text_weight > 0 and batch.unit_ids is not None and batch.modality != "text":
            text_z = encode_language(FeatureSequence("text", unit_ids=batch.unit_ids), towers.language).embedding
            loss = loss + (info_nce(image_z, text_z, tau=cfg.tau) + info_nce(text_z, image_z, tau=cfg.tau)) * cfg.text_weight
        if cfg.pred_loss_weight > 0 and batch.unit_ids is not None:
            loss = loss + masked_prediction_loss(out.pred_sims, batch.unit_ids, out.mask, state.tau_pred) * cfg.pred_loss_weight
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"loss is {value} at step {state.step}")
        tape.backward(loss)

    grad_norm = optimizer_step(params, state.optimizer, state.max_grad_norm)
    pair = state.momentum_pair()
    if pair is not None:
        momentum_update(pair)
        queue_push(state.queues["image"], keys[0])
        queue_push(state.queues["language"], keys[1])
    state.step += 1
    return StepReport(state.step, value, grad_norm, state.queue_fill)


def train_loop(
    state: TrainState,
    dataset: PairedDataset,
    epochs: int,
    batch_size: int,
    checkpoint_sink: Callable[[TrainState], None] | None = None,
    checkpoint_every: int = 1,
    progress: bool = False,
    prefetch: bool = True,
) -> TrainingHistory:
    """Run ``epochs`` more epochs starting at ``state.epoch``.

    Batches for an epoch come from ``batch_iter(dataset, batch_size, seed, epoch)``.
    With ``prefetch`` the next batch is collated on a worker thread while the
    current step runs; the worker hands over a finished ``Batch`` and never
    touches it again.
    """
    if not len(dataset):
        raise ContractError("cannot train on an empty dataset")
    history = TrainingHistory()
    for _ in range(epochs):
        groups = list(batch_iter(dataset, batch_size, state.seed, state.epoch))
        if not groups:
            raise ContractError(f"{len(dataset)} records yield no batch of 2 or more")
        losses = []
        bar = tqdm(total=len(groups), desc=f"epoch {state.epoch}", leave=False) if progress else None
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(collate, groups[0]) if prefetch else None
            for i, group in enumerate(groups):
                if prefetch:
                    batch = pending.result()
                    if i + 1 < len(groups):
                        pending = pool.submit(collate, groups[i + 1])
                else:
                    batch = collate(group)
                report = train_step(state, batch)
                losses.append(report.loss)
                if bar is not None:
                    bar.update(1)
                    bar.set_postfix(loss=f"{report.loss:.4f}")
        if bar is not None:
            bar.close()
        state.epoch += 1
        epoch_loss = float(np.mean(losses))
        history.epoch_losses.append(epoch_loss)
        history.step_losses.extend(losses)
        log.info("epoch %d: mean loss %.6f over %d steps", state.epoch, epoch_loss, len(losses))
        if checkpoint_sink is not None and checkpoint_every > 0 and state.epoch % checkpoint_every == 0:
            checkpoint_sink(state)
    return history
