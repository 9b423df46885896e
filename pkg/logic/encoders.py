from __future__ import annotations
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from logic.tensor import (
    Module,
    ParameterError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    gather_rows,
    l2_normalize,
    layer_norm,
    mean,
    parameter,
    relu,
    reshape,
    softmax_with_temperature,
    stack,
    transpose,
    tsum,
    where,
)

log = logging.getLogger(__name__)

MODALITIES = ("audio", "text", "fused")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# building blocks

class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(_glorot(rng, fan_in, fan_out))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two fully connected layers with one ReLU between them."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator):
        self.fc1 = Linear(fan_in, hidden, rng)
        self.fc2 = Linear(hidden, fan_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if heads < 1 or width % heads:
            raise ShapeError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, x: Tensor, keep_weights: list | None = None) -> Tensor:
        b, n, c = x.shape
        if c % self.heads:
            raise ShapeError(f"width {c} is not divisible by {self.heads} heads")
        dh = c // self.heads

        def split(t):
            return transpose(reshape(t, (b, n, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        # softmax(QK^T / sqrt(dh)) is a temperature softmax with tau = sqrt(dh)
        weights = softmax_with_temperature(q @ transpose(k, (0, 1, 3, 2)), math.sqrt(dh))
        if keep_weights is not None:
            keep_weights.append(weights.data)
        ctx = transpose(weights @ v, (0, 2, 1, 3))
        return self.out(reshape(ctx, (b, n, c)))


class TransformerLayer(Module):
    """Post-norm encoder layer: S' = LN(S + MHA(S)); S = LN(S' + FFN(S'))."""

    def __init__(self, width: int, heads: int, ffn_width: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(width, heads, rng)
        self.norm1 = LayerNorm(width)
        self.ffn = MLP(width, ffn_width, width, rng)
        self.norm2 = LayerNorm(width)

    def __call__(self, s: Tensor, keep_weights: list | None = None) -> Tensor:
        s_prime = self.norm1(s + self.attention(s, keep_weights))
        return self.norm2(s_prime + self.ffn(s_prime))


# image tower

class ImageEncoder(Module):
    def __init__(
        self,
        feature_dim: int,
        width: int,
        embed_dim: int,
        rng: np.random.Generator,
        grid_size: int = 4,
        n_layers: int = 4,
        heads: int = 4,
        ffn_mult: int = 4,
        proj_hidden: int = 64,
    ):
        if grid_size < 1:
            raise ParameterError(f"grid_size must be >= 1, got {grid_size}")
        self.grid_size = grid_size
        self.embed_dim = embed_dim
        self.patch_embed = Linear(feature_dim, width, rng)
        self.sa_layers = [TransformerLayer(width, heads, ffn_mult * width, rng) for _ in range(n_layers)]
        self.proj = MLP(width, proj_hidden, embed_dim, rng)

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    def __call__(self, feature_map) -> Tensor:
        return encode_image(feature_map, self)


def extract_patches(feature_map, grid_size: int) -> Tensor:
    """Mean of each grid cell, in raster order. [H, W, f] -> [g*g, f] (batched too)."""
    x = as_tensor(feature_map)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"feature map must be [H, W, f] or [B, H, W, f], got {x.shape}")
    b, height, width, f = x.shape
    if grid_size < 1 or height % grid_size or width % grid_size:
        raise ShapeError(f"feature map {height}x{width} is not divisible by grid_size {grid_size}")
    g = grid_size
    blocks = reshape(x, (b, g, height // g, g, width // g, f))
    patches = reshape(mean(blocks, axis=(2, 4)), (b, g * g, f))
    return reshape(patches, (g * g, f)) if single else patches


def self_attention_block(patches: Tensor, layers: list[TransformerLayer], keep_weights: list | None = None) -> Tensor:
    s = as_tensor(patches)
    single = s.ndim == 2
    if single:
        s = reshape(s, (1,) + s.shape)
    for layer in layers:
        s = layer(s, keep_weights)
    return reshape(s, s.shape[1:]) if single else s


def average_pool(s: Tensor) -> Tensor:
    return mean(as_tensor(s), axis=-2)


def mlp_project(r: Tensor, proj: MLP) -> Tensor:
    r = as_tensor(r)
    if r.ndim == 1:
        return reshape(proj(reshape(r, (1, r.shape[0]))), (-1,))
    return proj(r)


def encode_image(feature_map, encoder: ImageEncoder, keep_weights: list | None = None) -> Tensor:
    """Patches -> self-attention -> average pool -> MLP -> unit vector."""
    x = as_tensor(feature_map)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    s = encoder.patch_embed(extract_patches(x, encoder.grid_size))
    s = self_attention_block(s, encoder.sa_layers, keep_weights)
    z = l2_normalize(mlp_project(average_pool(s), encoder.proj))
    return reshape(z, (z.shape[-1],)) if single else z


# language tower

@dataclass
class FeatureSequence:
    """Frames and/or unit ids for one sequence ([T, f]) or a batch ([B, T, f])."""

    modality: str
    frames: np.ndarray | Tensor | None = None
    unit_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.unit_ids is not None:
            self.unit_ids = np.asarray(self.unit_ids, dtype=np.int64)
        if self.frames is None and self.unit_ids is None:
            raise ParameterError("a feature sequence needs frames or unit_ids")
        if self.frames is not None and self.unit_ids is not None:
            if tuple(self.frames.shape[:-1]) != self.unit_ids.shape:
                raise ShapeError(f"unit_ids {self.unit_ids.shape} do not align with frames {self.frames.shape}")
        if self.length < 1:
            raise ShapeError("empty sequence")

    @property
    def length(self) -> int:
        if self.frames is not None:
            return int(self.frames.shape[-2])
        return int(self.unit_ids.shape[-1])

    @property
    def batched(self) -> bool:
        if self.frames is not None:
            return self.frames.ndim == 3
        return self.unit_ids.ndim == 2


class PredictionHead(Module):
    """K^P projection plus one embedding e_c per prediction class."""

    def __init__(self, width: int, n_classes: int, tau: float, rng: np.random.Generator):
        self.tau = tau
        self.projection = parameter(_glorot(rng, width, width))
        self.class_embeddings = parameter(rng.normal(0.0, 1.0, size=(n_classes, width)))


class LanguageEncoder(Module):
    def __init__(
        self,
        feature_dim: int,
        width: int,
        embed_dim: int,
        rng: np.random.Generator,
        speech_layers: int = 2,
        shared_layers: int = 2,
        heads: int = 4,
        ffn_mult: int = 4,
        proj_hidden: int = 64,
        n_units: int = 32,
        max_seq_len: int = 64,
        mask_prob: float = 0.08,
        mask_len: int = 10,
        swap_prob: float = 0.15,
        tau_pred: float = 0.1,
    ):
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.n_units = n_units
        self.max_seq_len = max_seq_len
        self.mask_prob = mask_prob
        self.mask_len = mask_len
        self.swap_prob = swap_prob
        self.mask_embedding = parameter(rng.normal(0.0, 0.1, size=feature_dim))
        self.input_proj = Linear(feature_dim, width, rng)
        self.positions = parameter(rng.normal(0.0, 0.02, size=(max_seq_len, width)))
        self.unit_embeddings = parameter(rng.normal(0.0, 1.0, size=(n_units, width)))
        self.speech_layers = [TransformerLayer(width, heads, ffn_mult * width, rng) for _ in range(speech_layers)]
        self.shared_layers = [TransformerLayer(width, heads, ffn_mult * width, rng) for _ in range(shared_layers)]
        n_slots = speech_layers - self.swap_point + 1 + shared_layers
        self.layer_weights = parameter(np.zeros(n_slots))
        self.pred_head = PredictionHead(width, n_units, tau_pred, rng)
        self.proj = MLP(width, proj_hidden, embed_dim, rng)

    @property
    def swap_point(self) -> int:
        # h^{L/2}: swapping happens after floor(L/2) speech layers
        return len(self.speech_layers) // 2

    def upper_layers(self) -> list[TransformerLayer]:
        return self.speech_layers[self.swap_point:] + self.shared_layers

    def unit_rows(self, unit_ids, offset: int = 0) -> Tensor:
        """Unit embeddings plus position embeddings, the rows text enters with."""
        ids = np.asarray(unit_ids, dtype=np.int64)
        length = ids.shape[-1]
        if offset + length > self.max_seq_len:
            raise ShapeError(f"sequence of {offset + length} exceeds max_seq_len {self.max_seq_len}")
        return gather_rows(self.unit_embeddings, ids) + self.positions[offset:offset + length]

    def __call__(self, seq: FeatureSequence, training: bool = False, rng=None, swap_rng=None) -> "LanguageOutput":
        return encode_language(seq, self, training, rng, swap_rng)


@dataclass
class LanguageOutput:
    embedding: Tensor
    hidden: Tensor
    pred_sims: Tensor | None
    pred_probs: Tensor | None
    mask: np.ndarray
    swapped: np.ndarray


def compute_span_mask(length: int, mask_prob: float, mask_len: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Every position starts a span with probability ``mask_prob``; spans merge.

    Returns ``(mask, starts)``.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ParameterError(f"mask_prob must be in [0, 1], got {mask_prob}")
    if mask_len < 1:
        raise ParameterError(f"mask_len must be >= 1, got {mask_len}")
    starts = rng.random(length) < mask_prob
    mask = np.zeros(length, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s:s + mask_len] = True
    return mask, starts


def apply_span_mask(
    seq: FeatureSequence,
    mask_prob: float,
    mask_len: int,
    rng: np.random.Generator,
    mask_embedding: Tensor | None = None,
) -> tuple[FeatureSequence, np.ndarray]:
    if seq.frames is None:
        raise ParameterError("span masking needs frames")
    frames = as_tensor(seq.frames)
    lead = frames.shape[:-2]
    rows = int(np.prod(lead)) if lead else 1
    mask = np.stack([compute_span_mask(seq.length, mask_prob, mask_len, rng)[0] for _ in range(rows)])
    mask = mask.reshape(lead + (seq.length,))
    if mask.any():
        fill = mask_embedding if mask_embedding is not None else np.zeros(frames.shape[-1], dtype=frames.data.dtype)
        frames = where(mask[..., None], fill, frames)
    return replace(seq, frames=frames), mask


def draw_swap_positions(mask: np.ndarray, swap_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= swap_prob <= 1.0:
        raise ParameterError(f"swap_prob must be in [0, 1], got {swap_prob}")
    # only unmasked positions are eligible
    return (rng.random(mask.shape) < swap_prob) & ~mask


def random_swap(
    seq: FeatureSequence,
    hidden: Tensor,
    unit_rows: Tensor | None,
    mask: np.ndarray,
    swap_prob: float,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray]:
    """Replace hidden rows at randomly chosen unmasked positions with unit rows."""
    if swap_prob > 0 and (seq.unit_ids is None or unit_rows is None):
        raise ParameterError("random swapping needs unit_ids")
    swapped = draw_swap_positions(mask, swap_prob, rng)
    if not swapped.any():
        return hidden, swapped
    return where(swapped[..., None], unit_rows, hidden), swapped


def masked_prediction_sims(hidden: Tensor, head: PredictionHead) -> Tensor:
    """Cosine similarity between K^P n_t and every class embedding e_c."""
    projected = l2_normalize(hidden @ head.projection)
    codes = l2_normalize(head.class_embeddings)
    return projected @ transpose(codes, (1, 0))


def masked_prediction_probs(hidden: Tensor, head: PredictionHead) -> Tensor:
    return softmax_with_temperature(masked_prediction_sims(hidden, head), head.tau)


def layer_weighted_pool(layer_outputs: list[Tensor], layer_weights: Tensor) -> Tensor:
    """Softmax-weighted sum over layers, then mean over time."""
    if not layer_outputs:
        raise ShapeError("layer_weighted_pool needs at least one layer output")
    if layer_weights.shape != (len(layer_outputs),):
        raise ShapeError(f"{len(layer_outputs)} layer outputs but weights of shape {layer_weights.shape}")
    stacked = stack(layer_outputs, axis=0)
    w = softmax_with_temperature(layer_weights, 1.0)
    w = reshape(w, (len(layer_outputs),) + (1,) * (stacked.ndim - 1))
    return mean(tsum(stacked * w, axis=0), axis=-2)


def encode_language(
    seq: FeatureSequence,
    encoder: LanguageEncoder,
    training: bool = False,
    rng: np.random.Generator | None = None,
    swap_rng: np.random.Generator | None = None,
) -> LanguageOutput:
    if training and rng is None:
        raise ParameterError("training mode needs a random generator")
    swap_rng = swap_rng or rng
    single = not seq.batched
    frames = None if seq.frames is None else as_tensor(seq.frames)
    ids = seq.unit_ids
    if single:
        frames = None if frames is None else reshape(frames, (1,) + frames.shape)
        ids = None if ids is None else ids[None, :]
    length = seq.length
    if length > encoder.max_seq_len:
        raise ShapeError(f"sequence length {length} exceeds max_seq_len {encoder.max_seq_len}")
    if ids is not None and (ids.min() < 0 or ids.max() >= encoder.n_units):
        raise ShapeError(f"unit ids outside [0, {encoder.n_units})")

    if seq.modality == "text":
        if ids is None:
            raise ParameterError("text input needs unit_ids")
        h = encoder.unit_rows(ids)
        mask = np.zeros(ids.shape, dtype=bool)
        swapped = np.zeros(ids.shape, dtype=bool)
    else:
        if frames is None:
            raise ParameterError(f"{seq.modality} input needs frames")
        if frames.shape[-1] != encoder.feature_dim:
            raise ShapeError(f"frames have {frames.shape[-1]} features, encoder expects {encoder.feature_dim}")
        batch = replace(seq, frames=frames, unit_ids=ids)
        mask = np.zeros(frames.shape[:-1], dtype=bool)
        if training and encoder.mask_prob > 0:
            batch, mask = apply_span_mask(batch, encoder.mask_prob, encoder.mask_len, rng, encoder.mask_embedding)
        h = encoder.input_proj(batch.frames) + encoder.positions[:length]
        for layer in encoder.speech_layers[:encoder.swap_point]:
            h = layer(h)
        swapped = np.zeros(mask.shape, dtype=bool)
        if training and encoder.swap_prob > 0:
            rows = encoder.unit_rows(ids) if ids is not None else None
            h, swapped = random_swap(batch, h, rows, mask, encoder.swap_prob, swap_rng)
        if seq.modality == "fused":
            if ids is None:
                raise ParameterError("fused input needs unit_ids")
            h = concat([h, encoder.unit_rows(ids, offset=length)], axis=1)

    slots = [h]
    for layer in encoder.upper_layers():
        h = layer(h)
        slots.append(h)
    z = l2_normalize(encoder.proj(layer_weighted_pool(slots, encoder.layer_weights)))

    sims = probs = None
    if training:
        top = h[:, :length]
        sims = masked_prediction_sims(top, encoder.pred_head)
        probs = softmax_with_temperature(sims, encoder.pred_head.tau)
    if single:
        z = reshape(z, (z.shape[-1],))
        h = reshape(h, h.shape[1:])
        if sims is not None:
            sims = reshape(sims, sims.shape[1:])
            probs = reshape(probs, probs.shape[1:])
        mask, swapped = mask[0], swapped[0]
    return LanguageOutput(z, h, sims, probs, mask, swapped)


# both towers

class DualTower(Module):
    def __init__(self, image: ImageEncoder, language: LanguageEncoder):
        self.image = image
        self.language = language


def build_towers(cfg, image_dim: int, audio_dim: int, rng: np.random.Generator) -> DualTower:
    """Fresh towers sized from a RunConfig-like object."""
    image = ImageEncoder(
        image_dim, cfg.width, cfg.embed_dim, rng,
        grid_size=cfg.grid_size, n_layers=cfg.sa_layers, heads=cfg.heads,
        ffn_mult=cfg.ffn_mult, proj_hidden=cfg.proj_hidden,
    )
    language = LanguageEncoder(
        audio_dim, cfg.width, cfg.embed_dim, rng,
        speech_layers=cfg.speech_layers, shared_layers=cfg.shared_layers, heads=cfg.heads,
        ffn_mult=cfg.ffn_mult, proj_hidden=cfg.proj_hidden, n_units=cfg.n_units,
        max_seq_len=cfg.max_seq_len, mask_prob=cfg.mask_prob, mask_len=cfg.mask_len,
        swap_prob=cfg.swap_prob, tau_pred=cfg.tau_pred,
    )
    return DualTower(image, language)


# inference helpers

def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def embed_images(encoder: ImageEncoder, maps: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    out = []
    for sl in _chunks(len(maps), batch_size):
        chunk = maps[sl]
        if len({m.shape for m in chunk}) == 1:
            out.append(encode_image(np.stack(chunk), encoder).data)
        else:
            out.extend(encode_image(m, encoder).data[None, :] for m in chunk)
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.embed_dim), dtype=np.float32)


def embed_sequences(encoder: LanguageEncoder, seqs: list[FeatureSequence], batch_size: int = 64) -> np.ndarray:
    out = []
    for sl in _chunks(len(seqs), batch_size):
        chunk = seqs[sl]
        same = len({(s.modality, s.length, s.frames is None, s.unit_ids is None) for s in chunk}) == 1
        if same:
            first = chunk[0]
            frames = None if first.frames is None else np.stack([np.asarray(s.frames) for s in chunk])
            ids = None if first.unit_ids is None else np.stack([s.unit_ids for s in chunk])
            batch = FeatureSequence(first.modality, frames, ids)
            out.append(encode_language(batch, encoder).embedding.data)
        else:
            out.extend(encode_language(s, encoder).embedding.data[None, :] for s in chunk)
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.embed_dim), dtype=np.float32)
