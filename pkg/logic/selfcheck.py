from __future__ import annotations
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np

from logic.contrastive import MomentumPair, NegativeQueue, info_nce, momentum_update
from logic.encoders import FeatureSequence, build_towers, encode_image, encode_language
from logic.gradcheck import finite_diff_check
from logic.metrics import (
    RetrievalIndex,
    SegmentEvent,
    accuracy,
    mean_average_precision,
    mean_reciprocal_rank,
    segment_f1,
)
from logic.tensor import (
    Module,
    Tensor,
    add,
    concat,
    cosine_similarity,
    cross_entropy,
    gather_rows,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    mul,
    parameter,
    relu,
    reshape,
    softmax_with_temperature,
    stack,
    sub,
    transpose,
    tsum,
    where,
)

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
GRAD_STEP = 1e-5

# toy sizes for the pipeline gradient checks
TOY_ARCH = SimpleNamespace(
    embed_dim=8, width=8, heads=2, ffn_mult=2, proj_hidden=16, grid_size=2, sa_layers=1,
    speech_layers=2, shared_layers=1, n_units=6, max_seq_len=32, mask_prob=0.2, mask_len=3,
    swap_prob=0.3, tau_pred=0.1,
)
TOY_IMAGE = (4, 4, 3)
TOY_AUDIO = (12, 5)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SelfcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.results.append(CheckResult(name, bool(passed), detail))
        if not passed:
            log.error("❌ selfcheck %s failed: %s", name, detail)


def _const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)


def _readout(y: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(y * _const(weights))


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    # keep ReLU inputs clear of the kink
    return np.where(np.abs(x) < 0.2, np.sign(x + 1e-12) * 0.5, x)


def gradient_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar fn, probe point) triples covering every differentiable op."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    r34, r35, r43 = rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), rng.normal(size=(4, 3))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    cond = rng.random((3, 4)) < 0.5
    ids = rng.integers(0, 3, size=5)
    targets = rng.integers(0, 4, size=3)
    keys = rng.normal(size=(3, 4))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)

    def _ln(x):
        return _readout(layer_norm(x, _const(gain), _const(bias)), r34)

    def _ln_gain(g):
        return _readout(layer_norm(_const(a), reshape(g, (4,)), _const(bias)), r34)

    cases = [
        ("add", lambda x: _readout(add(x, _const(b)) * x, r34), a),
        ("sub", lambda x: _readout(sub(_const(b), x) * x, r34), a),
        ("mul", lambda x: _readout(mul(x, x), r34), a),
        ("matmul_left", lambda x: _readout(matmul(x, _const(w)), r35), a),
        ("matmul_right", lambda x: _readout(matmul(_const(a), x), r35), w),
        ("relu", lambda x: _readout(relu(x), r34), _away_from_zero(a)),
        ("where", lambda x: _readout(where(cond, x * x, x), r34), a),
        ("sum_axis", lambda x: tsum(tsum(x, axis=1) * _const(r34[:, 0])), a),
        ("mean", lambda x: tsum(mean(x * x, axis=0) * _const(r34[0])), a),
        ("reshape", lambda x: _readout(reshape(x, (4, 3)), r43), a),
        ("transpose", lambda x: _readout(transpose(x, (1, 0)), r43), a),
        ("take", lambda x: tsum(x[1:, :2] * x[1:, :2]), a),
        ("gather_rows", lambda x: _readout(gather_rows(x, ids), rng_fixed(ids, 4)), a),
        ("concat", lambda x: tsum(concat([x, x * x], axis=0) * _const(np.vstack([r34, r34]))), a),
        ("stack", lambda x: tsum(stack([x, x * x], axis=0) * _const(np.stack([r34, -r34]))), a),
        ("layer_norm", _ln, a),
        ("layer_norm_gain", _ln_gain, gain.reshape(1, 4)),
        ("softmax", lambda x: _readout(softmax_with_temperature(x, 0.5), r34), a),
        ("l2_normalize", lambda x: _readout(l2_normalize(x), r34), a),
        ("cosine_similarity", lambda x: tsum(cosine_similarity(x, _const(b)) * _const(r34[:, 0])), a),
        ("cross_entropy", lambda x: cross_entropy(x, targets, scale=2.0), a),
        ("info_nce", lambda x: info_nce(l2_normalize(x), _const(keys), tau=0.5), a),
    ]
    return cases


def rng_fixed(ids: np.ndarray, width: int) -> np.ndarray:
    # deterministic readout weights for a gathered [len(ids), width] block
    return np.cos(np.arange(len(ids) * width, dtype=np.float64)).reshape(len(ids), width)


def _toy_towers(seed: int):
    return build_towers(TOY_ARCH, TOY_IMAGE[-1], TOY_AUDIO[-1], np.random.default_rng(seed))


def pipeline_cases(seed: int) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    rng = np.random.default_rng(seed)
    towers = _toy_towers(seed)
    image = rng.normal(size=TOY_IMAGE)
    frames = rng.normal(size=TOY_AUDIO)
    unit_ids = rng.integers(0, TOY_ARCH.n_units, size=TOY_AUDIO[0])
    readout = rng.normal(size=TOY_ARCH.embed_dim)

    def image_fn(x):
        return tsum(encode_image(x, towers.image) * _const(readout))

    def language_fn(x):
        # fresh generators each call keep the fn deterministic
        out = encode_language(
            FeatureSequence("audio", x, unit_ids), towers.language, training=True,
            rng=np.random.default_rng([seed, 1]), swap_rng=np.random.default_rng([seed, 2]),
        )
        return tsum(out.embedding * _const(readout))

    return [("encode_image", image_fn, image), ("encode_language", language_fn, frames)]


def run_gradient_suite(seeds: int = 20, report: SelfcheckReport | None = None) -> SelfcheckReport:
    report = report or SelfcheckReport()
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, point in gradient_cases(rng) + pipeline_cases(seed):
            err = finite_diff_check(fn, point, h=GRAD_STEP)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        report.add(f"grad.{name}", err < GRAD_TOLERANCE, f"max relative error {err:.3e}")
    return report


# brute-force references

def brute_accuracy(pred, labels) -> float:
    hits = 0
    for p, l in zip(pred, labels):
        if p == l:
            hits += 1
    return hits / len(labels)


def brute_average_precision(scores, relevant) -> float:
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    total, n_pos = 0.0, 0
    for pos, i in enumerate(ranked, start=1):
        if relevant[i]:
            n_pos += 1
            total += n_pos / pos
    return total / n_pos


def brute_map(scores, labels) -> float:
    aps = []
    for c in range(len(labels[0])):
        col = [row[c] for row in labels]
        if any(col):
            aps.append(brute_average_precision([row[c] for row in scores], col))
    return sum(aps) / len(aps)


def brute_mrr(queries, gallery, ids, truth) -> float:
    total = 0.0
    for q, t in zip(queries, truth):
        scored = sorted(((-float(np.dot(g, q)), int(i)) for g, i in zip(gallery, ids)))
        rank = [i for _, i in scored].index(int(t)) + 1
        total += 1.0 / rank
    return total / len(queries)


def brute_segment_f1(pred, ref, seg_len) -> float:
    horizon = max([e.offset for e in pred + ref], default=0.0)
    classes = {e.event_class for e in pred + ref}
    tp = fp = fn = 0
    k = 0
    while k * seg_len < horizon:
        lo, hi = k * seg_len, (k + 1) * seg_len
        for c in classes:
            p = any(e.event_class == c and e.onset < hi and e.offset > lo for e in pred)
            r = any(e.event_class == c and e.onset < hi and e.offset > lo for e in ref)
            tp += p and r
            fp += p and not r
            fn += r and not p
        k += 1
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def _random_events(rng, n) -> list[SegmentEvent]:
    out = []
    for _ in range(n):
        onset = int(rng.integers(0, 32)) * 0.25
        length = int(rng.integers(1, 12)) * 0.25
        out.append(SegmentEvent(onset, onset + length, int(rng.integers(0, 3))))
    return out


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def run_metric_suite(instances: int = 100, seed: int = 0, report: SelfcheckReport | None = None) -> SelfcheckReport:
    report = report or SelfcheckReport()
    rng = np.random.default_rng(seed)
    bad = {"accuracy": 0, "map": 0, "mrr": 0, "segment_f1": 0}
    for _ in range(instances):
        n = int(rng.integers(1, 21))
        pred, labels = rng.integers(0, 3, n), rng.integers(0, 3, n)
        bad["accuracy"] += abs(accuracy(pred, labels) - brute_accuracy(pred, labels)) > 1e-12

        # coarse scores so ties actually happen
        scores = rng.integers(0, 4, size=(n, 3)).astype(float)
        multi = rng.random((n, 3)) < 0.4
        multi[rng.integers(0, n), 0] = True
        bad["map"] += abs(mean_average_precision(scores, multi) - brute_map(scores.tolist(), multi.tolist())) > 1e-12

        gallery = _unit(rng, n, 4)
        ids = rng.permutation(100)[:n]
        queries = _unit(rng, n, 4)
        truth = rng.choice(ids, size=n)
        got = mean_reciprocal_rank(queries, RetrievalIndex(gallery, ids), truth)
        bad["mrr"] += abs(got - brute_mrr(queries, gallery, ids, truth)) > 1e-12

        seg_len = float(rng.choice([0.5, 1.0]))
        p_ev, r_ev = _random_events(rng, int(rng.integers(0, 6))), _random_events(rng, int(rng.integers(0, 6)))
        bad["segment_f1"] += abs(segment_f1(p_ev, r_ev, seg_len) - brute_segment_f1(p_ev, r_ev, seg_len)) > 1e-12
    for name, count in bad.items():
        report.add(f"metric.{name}", count == 0, f"{count}/{instances} instances disagree")
    return report


def run_queue_suite(operations: int = 10_000, seed: int = 0, report: SelfcheckReport | None = None) -> SelfcheckReport:
    report = report or SelfcheckReport()
    rng = np.random.default_rng(seed)
    capacity, dim = 16, 3
    queue = NegativeQueue(capacity, dim)
    oracle: deque = deque(maxlen=capacity)
    mismatches = 0
    for _ in range(operations):
        rows = _unit(rng, int(rng.integers(1, capacity + 1)), dim).astype(np.float32)
        queue.push(rows)
        oracle.extend(rows)
        expected = np.array(oracle) if oracle else np.zeros((0, dim), dtype=np.float32)
        mismatches += not np.array_equal(queue.contents(), expected)
    report.add("queue.fifo", mismatches == 0, f"{mismatches}/{operations} pushes disagree with a deque")

    key, query = Module(), Module()
    key.w = parameter(np.ones(4), dtype=np.float64)
    query.w = parameter(np.zeros(4), dtype=np.float64)
    pair = MomentumPair(query, key.freeze(), 0.99)
    worst = 0.0
    for step in range(1, 101):
        momentum_update(pair)
        worst = max(worst, float(np.abs(key.w.data - 0.99 ** step).max()))
    report.add("momentum.decay", worst < 1e-6, f"max deviation from m^s {worst:.3e}")
    return report


def run_selfcheck(seeds: int = 20) -> SelfcheckReport:
    report = SelfcheckReport()
    run_gradient_suite(seeds, report)
    run_metric_suite(report=report)
    run_queue_suite(report=report)
    status = "✅" if report.passed else "❌"
    log.info("%s selfcheck: %d/%d checks passed", status, sum(r.passed for r in report.results), len(report.results))
    return report
