from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from logic.encoders import MODALITIES, FeatureSequence
from logic.seeding import stream
from logic.tensor import ParameterError, ShapeError

log = logging.getLogger(__name__)

# prototypes are redrawn until every pair sits this many sigmas apart
_SEPARATION_SIGMAS = 4.0
_MAX_DRAWS = 100


@dataclass
class PairedRecord:
    pair_id: int
    class_label: int
    image_features: np.ndarray
    language: FeatureSequence


@dataclass
class PairedDataset:
    records: list[PairedRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PairedRecord]:
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records], dtype=np.int64)

    @property
    def pair_ids(self) -> np.ndarray:
        return np.array([r.pair_id for r in self.records], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.records else 0

    @property
    def image_dim(self) -> int:
        return int(self.records[0].image_features.shape[-1])

    @property
    def audio_dim(self) -> int:
        frames = self.records[0].language.frames
        return int(frames.shape[-1]) if frames is not None else 0

    def subset(self, indices) -> "PairedDataset":
        return PairedDataset([self.records[int(i)] for i in indices])

    def class_unit_ids(self) -> dict[int, np.ndarray]:
        """First unit-id sequence seen for each class (the zero-shot class description)."""
        out: dict[int, np.ndarray] = {}
        for r in self.records:
            if r.language.unit_ids is not None and r.class_label not in out:
                out[r.class_label] = r.language.unit_ids
        return out

    def with_modality(self, modality: str) -> "PairedDataset":
        if modality not in MODALITIES:
            raise ParameterError(f"unknown modality {modality!r}")
        return PairedDataset([replace(r, language=replace(r.language, modality=modality)) for r in self.records])


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    n_pairs: int = 512
    image_size: int = 8
    image_channels: int = 4
    seq_len: int = 16
    audio_dim: int = 8
    n_units: int = 32
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_classes < 2 or self.n_pairs < self.n_classes:
            raise ParameterError(f"need n_pairs >= n_classes >= 2, got {self.n_pairs} pairs / {self.n_classes} classes")
        dims = (self.image_size, self.image_channels, self.seq_len, self.audio_dim, self.n_units)
        if min(dims) < 1:
            raise ShapeError(f"degenerate synthetic dims {dims}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _min_pairwise_distance(protos: np.ndarray) -> float:
    flat = protos.reshape(len(protos), -1).astype(np.float64)
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(flat))] = np.inf
    return float(d.min())


def _draw_prototypes(rng: np.random.Generator, n: int, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    for _ in range(_MAX_DRAWS):
        protos = rng.normal(0.0, 1.0, size=(n,) + shape)
        if _min_pairwise_distance(protos) > _SEPARATION_SIGMAS * sigma:
            return protos
    raise ParameterError(f"could not separate {n} prototypes by {_SEPARATION_SIGMAS} x sigma={sigma}")


def generate_synthetic_pairs(spec: SyntheticSpec) -> PairedDataset:
    """Planted-prototype pairs: each record is its class prototype plus sigma noise.

    Labels go round-robin. Every class owns one unit-id sequence, which doubles
    as its zero-shot description and its masked-prediction target.
    """
    spec.validate()
    rng = stream(spec.seed, "data")
    image_shape = (spec.image_size, spec.image_size, spec.image_channels)
    audio_shape = (spec.seq_len, spec.audio_dim)
    image_protos = _draw_prototypes(rng, spec.n_classes, image_shape, spec.noise_sigma)
    audio_protos = _draw_prototypes(rng, spec.n_classes, audio_shape, spec.noise_sigma)
    class_units = rng.integers(0, spec.n_units, size=(spec.n_classes, spec.seq_len))

    records = []
    for i in range(spec.n_pairs):
        c = i % spec.n_classes
        image = image_protos[c] + spec.noise_sigma * rng.normal(size=image_shape)
        frames = audio_protos[c] + spec.noise_sigma * rng.normal(size=audio_shape)
        seq = FeatureSequence("audio", frames.astype(np.float32), class_units[c].copy())
        records.append(PairedRecord(i, c, image.astype(np.float32), seq))
    log.info("✅ generated %d synthetic pairs over %d classes (sigma=%.3f)", spec.n_pairs, spec.n_classes, spec.noise_sigma)
    return PairedDataset(records)


def draw_distractors(n: int, shape: tuple[int, ...], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` images, each its own fresh random prototype plus sigma noise."""
    protos = rng.normal(0.0, 1.0, size=(n,) + tuple(shape))
    return (protos + sigma * rng.normal(size=protos.shape)).astype(np.float32)


def split_holdout(dataset: PairedDataset, fraction: float, seed: int) -> tuple[PairedDataset, PairedDataset]:
    """Stratified split; both halves keep the original record order."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"holdout fraction must be in [0, 1), got {fraction}")
    rng = stream(seed, "split")
    labels = dataset.labels
    held = np.zeros(len(dataset), dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        if fraction > 0 and len(members) > 1:
            k = min(max(k, 1), len(members) - 1)
        held[rng.permutation(members)[:k]] = True
    return dataset.subset(np.flatnonzero(~held)), dataset.subset(np.flatnonzero(held))


def batch_iter(dataset: PairedDataset, batch_size: int, seed: int, epoch: int) -> Iterator[list[PairedRecord]]:
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = stream(seed, "shuffle", epoch).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        # contrastive steps need a pair of pairs
        if len(idx) < 2:
            break
        yield [dataset.records[i] for i in idx]


@dataclass
class Batch:
    images: np.ndarray
    frames: np.ndarray | None
    unit_ids: np.ndarray | None
    labels: np.ndarray
    pair_ids: np.ndarray
    modality: str

    def __len__(self) -> int:
        return len(self.labels)


def _stack(arrays: list[np.ndarray], what: str) -> np.ndarray:
    try:
        return np.stack(arrays)
    except ValueError as e:
        raise ShapeError(f"{what} shapes differ inside one batch: {sorted({a.shape for a in arrays})}") from e


def collate(records: list[PairedRecord]) -> Batch:
    modalities = {r.language.modality for r in records}
    if len(modalities) != 1:
        raise ParameterError(f"mixed modalities in one batch: {sorted(modalities)}")
    has_frames = all(r.language.frames is not None for r in records)
    has_ids = all(r.language.unit_ids is not None for r in records)
    return Batch(
        images=_stack([r.image_features for r in records], "image"),
        frames=_stack([np.asarray(r.language.frames) for r in records], "frame") if has_frames else None,
        unit_ids=_stack([r.language.unit_ids for r in records], "unit id") if has_ids else None,
        labels=np.array([r.class_label for r in records], dtype=np.int64),
        pair_ids=np.array([r.pair_id for r in records], dtype=np.int64),
        modality=modalities.pop(),
    )
