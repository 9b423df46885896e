import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from logic.encoders import FeatureSequence, apply_span_mask, compute_span_mask, draw_swap_positions, random_swap
from logic.tensor import ParameterError, Tensor


def _seq(t=12, f=5, seed=0, ids=True):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(t, f)).astype(np.float32)
    return FeatureSequence("audio", frames, rng.integers(0, 6, t) if ids else None)


def test_zero_probability_leaves_sequence_alone():
    seq = _seq()
    masked, mask = apply_span_mask(seq, 0.0, 10, np.random.default_rng(0))
    assert not mask.any()
    assert np.array_equal(np.asarray(masked.frames.data), seq.frames)


def test_certain_long_spans_mask_everything():
    seq = _seq()
    fill = Tensor(np.full(5, 7.0))
    masked, mask = apply_span_mask(seq, 1.0, 12, np.random.default_rng(0), fill)
    assert mask.all()
    assert np.allclose(masked.frames.data, 7.0)


def test_spans_merge_and_truncate():
    mask, starts = compute_span_mask(20, 0.3, 4, np.random.default_rng(3))
    expected = np.zeros(20, dtype=bool)
    for s in np.flatnonzero(starts):
        expected[s:min(s + 4, 20)] = True
    assert np.array_equal(mask, expected)


def test_span_start_count_is_binomial():
    counts = [compute_span_mask(1000, 0.08, 10, np.random.default_rng(s))[1].sum() for s in range(100)]
    sigma_of_mean = np.sqrt(1000 * 0.08 * 0.92) / np.sqrt(100)
    assert abs(np.mean(counts) - 80) < 3 * sigma_of_mean


@pytest.mark.parametrize("prob,length", [(-0.1, 10), (1.5, 10), (0.1, 0)])
def test_bad_mask_parameters(prob, length):
    with pytest.raises(ParameterError):
        compute_span_mask(10, prob, length, np.random.default_rng(0))


def test_swap_zero_and_full():
    seq = _seq()
    hidden = Tensor(np.random.default_rng(1).normal(size=(12, 8)))
    rows = Tensor(np.random.default_rng(2).normal(size=(12, 8)))
    none = np.zeros(12, dtype=bool)

    out, swapped = random_swap(seq, hidden, rows, none, 0.0, np.random.default_rng(0))
    assert not swapped.any()
    assert np.array_equal(out.data, hidden.data)

    out, swapped = random_swap(seq, hidden, rows, none, 1.0, np.random.default_rng(0))
    assert swapped.all()
    assert np.array_equal(out.data, rows.data)


def test_masked_positions_are_never_swapped():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mask, _ = compute_span_mask(50, 0.1, 5, rng)
        swapped = draw_swap_positions(mask, 0.5, rng)
        assert not (mask & swapped).any()


def test_swap_needs_unit_ids():
    seq = _seq(ids=False)
    hidden = Tensor(np.ones((12, 8)))
    with pytest.raises(ParameterError):
        random_swap(seq, hidden, None, np.zeros(12, dtype=bool), 0.2, np.random.default_rng(0))
    # nothing to swap, nothing needed
    out, _ = random_swap(seq, hidden, None, np.zeros(12, dtype=bool), 0.0, np.random.default_rng(0))
    assert out is hidden
