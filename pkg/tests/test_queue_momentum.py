import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from logic.contrastive import MomentumPair, NegativeQueue, QueueError, momentum_update, queue_push
from logic.encoders import build_towers
from logic.selfcheck import TOY_ARCH, run_queue_suite
from logic.tensor import Module, ParameterError, ShapeError, parameter


def _basis(i, d=4):
    v = np.zeros((1, d), dtype=np.float32)
    v[0, i % d] = 1.0
    return v


def _rows(start, n, d=4):
    return np.concatenate([_basis(i, d) * (1 if i < d else -1) for i in range(start, start + n)])


def test_push_three_then_three_keeps_last_four_in_order():
    q = NegativeQueue(4, 4)
    first, second = _rows(0, 3), _rows(3, 3)
    queue_push(q, first)
    assert q.fill == 3 and not q.full
    queue_push(q, second)
    assert q.fill == 4
    pushed = np.concatenate([first, second])
    assert np.array_equal(q.contents(), pushed[-4:])


def test_push_exactly_capacity():
    q = NegativeQueue(4, 4)
    rows = _rows(0, 4)
    queue_push(q, rows)
    assert q.full and q.fill == 4
    assert np.array_equal(q.contents(), rows)


def test_queue_rejects_bad_batches():
    q = NegativeQueue(2, 4)
    with pytest.raises(QueueError):
        q.push(_rows(0, 3))
    with pytest.raises(QueueError):
        q.push(np.full((1, 4), 0.9, dtype=np.float32))
    with pytest.raises(ShapeError):
        q.push(np.ones((1, 3), dtype=np.float32))
    with pytest.raises(QueueError):
        NegativeQueue(0, 4)


def test_queue_matches_deque_reference():
    report = run_queue_suite(operations=2000, seed=3)
    fifo = [r for r in report.results if r.name == "queue.fifo"][0]
    assert fifo.passed, fifo.detail


def _scalar_pair(key_value, query_value, m=0.99):
    key, query = Module(), Module()
    key.w = parameter(np.full(3, key_value), dtype=np.float64)
    query.w = parameter(np.full(3, query_value), dtype=np.float64)
    return MomentumPair(query, key.freeze(), m)


def test_momentum_single_step_and_fixed_point():
    pair = _scalar_pair(1.0, 0.0)
    momentum_update(pair)
    assert np.allclose(pair.key_encoder.w.data, 0.99)

    same = _scalar_pair(0.25, 0.25)
    momentum_update(same)
    assert np.allclose(same.key_encoder.w.data, 0.25)


def test_momentum_distance_decays_geometrically():
    pair = _scalar_pair(2.0, -1.0)
    gap0 = 3.0
    for step in range(1, 101):
        momentum_update(pair)
        gap = np.abs(pair.key_encoder.w.data - pair.query_encoder.w.data).max()
        assert abs(gap - gap0 * 0.99 ** step) < 1e-6


def _flat_norm(module):
    return np.linalg.norm(np.concatenate([p.data.ravel() for p in module.parameters().values()]))


@pytest.mark.parametrize("m", [0.0, 0.5, 0.9, 0.99])
def test_key_norm_stays_inside_the_convex_hull_bound(m):
    rng = np.random.default_rng(7)
    key, query = Module(), Module()
    key.w = parameter(rng.normal(size=3) * 4.0, dtype=np.float64)
    key.b = parameter(rng.normal(size=(2, 2)) * 4.0, dtype=np.float64)
    query.w = parameter(np.zeros(3), dtype=np.float64)
    query.b = parameter(np.zeros((2, 2)), dtype=np.float64)
    pair = MomentumPair(query, key.freeze(), m)
    bound = _flat_norm(key)
    for _ in range(500):
        scale = rng.uniform(0.0, 8.0)
        query.w.data = rng.normal(size=3) * scale
        query.b.data = rng.normal(size=(2, 2)) * scale
        bound = max(bound, _flat_norm(query))
        momentum_update(pair)
        assert _flat_norm(key) <= bound * (1 + 1e-12)


def test_key_encoder_is_a_frozen_copy():
    towers = build_towers(TOY_ARCH, 3, 5, np.random.default_rng(0))
    pair = MomentumPair.from_query(towers, 0.99)
    query, key = towers.parameters(), pair.key_encoder.parameters()
    assert query.keys() == key.keys()
    for name in query:
        assert np.array_equal(query[name].data, key[name].data)
        assert query[name] is not key[name]
        assert not key[name].requires_grad
        assert key[name].node_id != query[name].node_id


def test_momentum_rejects_mismatched_towers():
    a = build_towers(TOY_ARCH, 3, 5, np.random.default_rng(0))
    b = build_towers(TOY_ARCH, 3, 7, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        momentum_update(MomentumPair(a, b.freeze()))
    with pytest.raises(ParameterError):
        MomentumPair(a, b, m=1.5)
