from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import sed_eval
from dcase_util.containers import MetaDataContainer

from logic.encoders import MLP
from logic.optim import OptimizerState, optimizer_step
from logic.seeding import stream
from logic.tensor import DegenerateVectorError, Module, ParameterError, ShapeError, Tape, Tensor, cross_entropy

log = logging.getLogger(__name__)


def _unit_rows(x: np.ndarray, what: str, tol: float = 1e-3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{what} rows must be unit-norm")
    return x


# retrieval

@dataclass
class RetrievalIndex:
    embeddings: np.ndarray
    ids: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.embeddings = _unit_rows(self.embeddings, "index")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.ids) != len(self.embeddings):
            raise ShapeError(f"index has {len(self.ids)} ids for embeddings {self.embeddings.shape}")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def rank(self, query: np.ndarray) -> np.ndarray:
        """Ids by descending cosine similarity; equal scores go to the lower id."""
        scores = self.embeddings @ np.asarray(query, dtype=np.float64)
        return self.ids[np.lexsort((self.ids, -scores))]


def mean_reciprocal_rank(query_embeddings: np.ndarray, target_index: RetrievalIndex, ground_truth: Sequence[int]) -> float:
    """Mean of 1/rank of each query's true target; ``ground_truth[i]`` is query i's target id."""
    queries = np.asarray(query_embeddings, dtype=np.float64)
    if len(queries) != len(ground_truth):
        raise ShapeError(f"{len(queries)} queries but {len(ground_truth)} ground-truth ids")
    if not len(queries):
        raise ValueError("no queries")
    reciprocal = []
    for q, target in zip(queries, ground_truth):
        hit = np.flatnonzero(target_index.rank(q) == int(target))
        if not hit.size:
            raise KeyError(f"target {target} is not in the index")
        reciprocal.append(1.0 / (hit[0] + 1))
    return float(np.mean(reciprocal))


def class_gallery(embeddings: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First item of each class, as (rows, class ids) sorted by class."""
    labels = np.asarray(labels, dtype=np.int64)
    classes, first = np.unique(labels, return_index=True)
    return np.asarray(embeddings)[first], classes


def cross_modal_mrr(
    image_z: np.ndarray,
    lang_z: np.ndarray,
    labels: np.ndarray,
    pair_ids: np.ndarray,
    gallery: str = "class",
) -> dict[str, float]:
    """MRR in both directions (language->image and image->language).

    ``gallery="class"`` indexes one item per class and a query's target is its
    class; ``gallery="pairs"`` indexes every record and the target is the pair.
    """
    labels = np.asarray(labels, dtype=np.int64)
    pair_ids = np.asarray(pair_ids, dtype=np.int64)
    out = {}
    for name, queries, targets in (("a2i_mrr", lang_z, image_z), ("i2a_mrr", image_z, lang_z)):
        if gallery == "class":
            rows, ids = class_gallery(targets, labels)
            truth = labels
        elif gallery == "pairs":
            rows, ids, truth = targets, pair_ids, pair_ids
        else:
            raise ParameterError(f"unknown gallery {gallery!r}")
        out[name] = mean_reciprocal_rank(queries, RetrievalIndex(rows, ids), truth)
    return out


# classification

def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if not labels.size:
        raise ValueError("accuracy of nothing")
    return float(np.mean(predictions == labels))


def average_precision(scores: np.ndarray, relevant: np.ndarray) -> float:
    """Mean precision at the rank of each positive; ties keep index order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    rel = np.asarray(relevant)[order] > 0
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must both be [N, C]")
    present = (labels > 0).any(axis=0)
    if not present.any():
        raise ValueError("no class has a positive label")
    if not present.all():
        log.warning("⚠️ mAP skips classes with no positives: %s", np.flatnonzero(~present).tolist())
    aps = [average_precision(scores[:, c], labels[:, c]) for c in np.flatnonzero(present)]
    return float(np.mean(aps))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.int64)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1
    return out


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def zero_shot_classify(samples: np.ndarray, prototypes: np.ndarray, topk: int = 1) -> np.ndarray:
    """Classes of the ``topk`` most similar prototypes per sample, best first.

    Equal similarities go to the lower class id.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or not len(prototypes):
        raise ValueError("zero-shot classification needs at least one prototype")
    prototypes = _unit_rows(prototypes, "prototype")
    n_classes = len(prototypes)
    if not 1 <= topk <= n_classes:
        raise ParameterError(f"topk must be in [1, {n_classes}], got {topk}")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    norms = np.linalg.norm(samples, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVectorError("zero-norm sample embedding")
    sims = (samples / norms) @ prototypes.T
    class_ids = np.broadcast_to(np.arange(n_classes), sims.shape)
    order = np.lexsort((class_ids, -sims), axis=-1)
    return order[:, :topk]


class ProbeClassifier(Module):
    """One-hidden-layer MLP over frozen embeddings."""

    def __init__(self, dim: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.mlp = MLP(dim, hidden, n_classes, rng)

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        return self.mlp(Tensor(np.asarray(embeddings, dtype=np.float32))).data

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(embeddings), axis=1)


def train_linear_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int = 100,
    lr: float = 0.01,
    hidden: int = 64,
    seed: int = 0,
) -> ProbeClassifier:
    """Full-batch cross-entropy training of a probe; the embeddings are never touched."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ParameterError("the probe needs at least two classes in its training labels")
    if labels.max() >= n_classes:
        raise ParameterError(f"label {labels.max()} outside {n_classes} classes")
    x = Tensor(np.asarray(embeddings, dtype=np.float32))
    probe = ProbeClassifier(x.shape[1], hidden, n_classes, stream(seed, "probe"))
    params = probe.parameters()
    state = OptimizerState(learning_rate=lr)
    for _ in range(epochs):
        with Tape() as tape:
            loss = cross_entropy(probe.mlp(x), labels)
            tape.backward(loss)
        optimizer_step(params, state)
    return probe


# segment-based detection scoring

@dataclass(frozen=True)
class SegmentEvent:
    onset: float
    offset: float
    event_class: int


def _check_events(events: Iterable[SegmentEvent]):
    for ev in events:
        if ev.onset < 0 or ev.offset < 0:
            raise ValueError(f"negative time in event {ev}")
        if not ev.onset < ev.offset:
            raise ValueError(f"event onset must precede offset: {ev}")


def _event_container(events: Iterable[SegmentEvent]) -> MetaDataContainer:
    # sed_eval keys everything on string labels
    return MetaDataContainer([
        {"filename": "events", "event_label": str(ev.event_class), "event_onset": ev.onset, "event_offset": ev.offset}
        for ev in events
    ])


@dataclass
class SegmentScores:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_reference: int = 0
    class_f1: dict[int, float] = field(default_factory=dict)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    @property
    def precision(self) -> float:
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 1.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def error_rate(self) -> float:
        errors = self.substitutions + self.deletions + self.insertions
        if self.n_reference == 0:
            return 0.0 if errors == 0 else math.inf
        return errors / self.n_reference


def segment_scores(predicted: list[SegmentEvent], reference: list[SegmentEvent], segment_length: float = 1.0) -> SegmentScores:
    """Micro-averaged segment counts plus the per-segment S/D/I error breakdown.

    sed_eval does the segmenting and counting; the rates are taken from its raw
    counts so that empty inputs keep their exact values (F1 of 1.0 when neither
    list has an event, an infinite error rate for errors against an empty reference).
    """
    if not segment_length > 0:
        raise ParameterError(f"segment_length must be > 0, got {segment_length}")
    _check_events(predicted)
    _check_events(reference)
    classes = sorted({ev.event_class for ev in [*predicted, *reference]})
    if not classes:
        return SegmentScores()

    metrics = sed_eval.sound_event.SegmentBasedMetrics(
        event_label_list=[str(c) for c in classes], time_resolution=segment_length,
    )
    metrics.evaluate(
        reference_event_list=_event_container(reference),
        estimated_event_list=_event_container(predicted),
        evaluated_length_seconds=max(ev.offset for ev in [*predicted, *reference]),
    )
    overall = metrics.overall
    out = SegmentScores(
        tp=int(overall["Ntp"]), fp=int(overall["Nfp"]), fn=int(overall["Nfn"]),
        substitutions=int(overall["S"]), deletions=int(overall["D"]), insertions=int(overall["I"]),
        n_reference=int(overall["Nref"]),
    )
    for c in classes:
        counts = metrics.class_wise[str(c)]
        tp, fp, fn = int(counts["Ntp"]), int(counts["Nfp"]), int(counts["Nfn"])
        out.class_f1[c] = 2 * tp / (2 * tp + fp + fn)
    log.debug("segment scores over %d classes: tp=%d fp=%d fn=%d", len(classes), out.tp, out.fp, out.fn)
    return out


def segment_f1(predicted: list[SegmentEvent], reference: list[SegmentEvent], segment_length: float = 1.0) -> float:
    return segment_scores(predicted, reference, segment_length).f1
