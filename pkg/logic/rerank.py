from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from logic.data import PairedDataset, draw_distractors
from logic.encoders import DualTower, embed_images, embed_sequences
from logic.seeding import stream
from logic.tensor import ParameterError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class CandidatePool:
    embeddings: np.ndarray
    ids: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or not len(self.embeddings):
            raise ShapeError(f"a candidate pool needs [M >= 1, d] embeddings, got {self.embeddings.shape}")
        if len(self.ids) != len(self.embeddings):
            raise ShapeError(f"{len(self.ids)} ids for {len(self.embeddings)} candidates")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError("candidate embeddings must be unit-norm")

    def __len__(self) -> int:
        return len(self.ids)


def matching_scores(query: np.ndarray, pool: CandidatePool) -> np.ndarray:
    """Cosine similarity of ``query`` to each candidate, aligned with ``pool.ids``."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (pool.embeddings.shape[1],):
        raise ShapeError(f"query {query.shape} vs pool of dim {pool.embeddings.shape[1]}")
    if abs(np.linalg.norm(query) - 1.0) > 1e-3:
        raise ValueError("query embedding must be unit-norm")
    return pool.embeddings @ query


def rank_and_select(scores: np.ndarray, topk: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Ids of the ``topk`` highest scores, best first; equal scores go to the lower id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids, dtype=np.int64)
    if not 1 <= topk <= len(scores):
        raise ParameterError(f"topk must be in [1, {len(scores)}], got {topk}")
    return ids[np.lexsort((ids, -scores))][:topk]


def rerank(query_z: np.ndarray, pool: CandidatePool, topk: int = 1) -> list[list[tuple[int, float]]]:
    """Per query, the selected (candidate id, score) pairs in rank order."""
    out = []
    for q in np.atleast_2d(query_z):
        scores = matching_scores(q, pool)
        by_id = dict(zip(pool.ids.tolist(), scores.tolist()))
        out.append([(int(i), by_id[int(i)]) for i in rank_and_select(scores, topk, pool.ids)])
    return out


@dataclass
class RecoveryResult:
    trials: int
    hits: int
    pool_size: int

    @property
    def rate(self) -> float:
        return self.hits / self.trials if self.trials else 0.0

    @property
    def chance(self) -> float:
        return 1.0 / self.pool_size

    @property
    def chance_band(self) -> float:
        # three binomial standard deviations around chance
        p = self.chance
        return 3.0 * math.sqrt(p * (1.0 - p) / max(self.trials, 1))


def planted_recovery(
    towers_for_trial: Callable[[int], DualTower],
    dataset: PairedDataset,
    pool_size: int = 20,
    sigma: float = 0.1,
    trials: int = 1000,
    seed: int = 0,
) -> RecoveryResult:
    """Top-1 recovery of a record's own image among ``pool_size - 1`` fresh distractors.

    The query is the record's language side. ``towers_for_trial(t)`` supplies the
    towers for trial t, so an untrained baseline can draw new towers each time.
    """
    if pool_size < 1:
        raise ParameterError(f"pool_size must be >= 1, got {pool_size}")
    if not len(dataset):
        raise ValueError("planted recovery needs at least one record")
    hits = 0
    shape = dataset.records[0].image_features.shape
    for t in range(trials):
        rng = stream(seed, "rerank", t)
        record = dataset.records[int(rng.integers(len(dataset)))]
        towers = towers_for_trial(t)
        images = np.concatenate([record.image_features[None], draw_distractors(pool_size - 1, shape, sigma, rng)])
        # the planted image lands at a random slot
        slots = rng.permutation(pool_size)
        pool_z = embed_images(towers.image, list(images[np.argsort(slots)]))
        planted = int(slots[0])
        query_z = embed_sequences(towers.language, [record.language])[0]
        best = rank_and_select(matching_scores(query_z, CandidatePool(pool_z, np.arange(pool_size))), 1)[0]
        hits += int(best == planted)
    result = RecoveryResult(trials, hits, pool_size)
    log.info("planted recovery: %d/%d (%.4f, chance %.4f)", hits, trials, result.rate, result.chance)
    return result
