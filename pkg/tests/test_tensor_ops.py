import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))
import math

import numpy as np
import pytest

from logic.tensor import (
    DegenerateVectorError,
    NonFiniteError,
    ParameterError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    cosine_similarity,
    layer_norm,
    matmul,
    parameter,
    relu,
    softmax_with_temperature,
    tsum,
)


def test_matmul_identity_and_zero():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)
    z = matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
    assert z.shape == (2, 4)
    assert not z.data.any()


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    got = matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(got, ref, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_layer_norm_cases():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), one, zero)
    assert np.allclose(out.data, 0.0)

    two = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(two.data, [[1.0, -1.0]], atol=1e-5)

    row = np.random.default_rng(1).normal(size=(1, 16)) * 7 + 3
    y = layer_norm(Tensor(row, dtype=np.float64), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
    assert abs(y.mean()) < 1e-6
    assert abs(y.var() - 1.0) < 1e-3


def test_layer_norm_shift_invariant_and_eps_checked():
    x = np.random.default_rng(2).normal(size=(4, 8))
    g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
    a = layer_norm(Tensor(x, dtype=np.float64), g, b).data
    shifted = layer_norm(Tensor(x + 11.0, dtype=np.float64), g, b).data
    assert np.allclose(a, shifted, atol=1e-5)
    with pytest.raises(ParameterError):
        layer_norm(Tensor(x), g, b, eps=0.0)


def test_softmax_examples():
    assert np.allclose(softmax_with_temperature(Tensor([[0.3, 0.3]])).data, [[0.5, 0.5]])
    p = softmax_with_temperature(Tensor([[1.0, 0.0]], dtype=np.float64), 0.1).data[0]
    e10 = math.exp(10)
    assert p[0] == pytest.approx(e10 / (e10 + 1), abs=1e-9)
    assert p[1] == pytest.approx(1 / (e10 + 1), rel=1e-6)

    logits = np.random.default_rng(3).uniform(-50, 50, size=(5, 7))
    s = softmax_with_temperature(Tensor(logits), 0.07).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    shifted = softmax_with_temperature(Tensor(logits + 4.0, dtype=np.float64), 1.0).data
    plain = softmax_with_temperature(Tensor(logits, dtype=np.float64), 1.0).data
    assert np.allclose(shifted, plain, atol=1e-7)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ParameterError):
        softmax_with_temperature(Tensor([[1.0, 2.0]]), tau)


def test_cosine_similarity_cases():
    v = Tensor([0.3, -1.2, 2.0])
    assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-6)
    assert cosine_similarity(v, Tensor(-v.data)).item() == pytest.approx(-1.0, abs=1e-6)
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0)
    with pytest.raises(DegenerateVectorError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_relu_values_and_gradient():
    assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert not relu(Tensor([-3.0, -0.5])).data.any()
    x = parameter([2.0, 0.0])
    with Tape() as tape:
        loss = tsum(relu(x))
        tape.backward(loss)
    # subgradient at 0 is 0
    assert np.array_equal(x.grad, [1.0, 0.0])


def test_backward_sum_and_zero_scaled():
    x = parameter([1.0, 2.0, 3.0])
    with Tape() as tape:
        tape.backward(tsum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    y = parameter([1.0, 2.0])
    with Tape() as tape:
        tape.backward(tsum(y * y) * 0.0)
    assert not y.grad.any()


def test_backward_accumulates_two_consumers():
    x = parameter([1.5, -2.0])
    with Tape() as tape:
        loss = tsum(x * 3.0) + tsum(x * x)
        tape.backward(loss)
    assert np.allclose(x.grad, 3.0 + 2 * x.data)


def test_untouched_leaf_gets_zero_grad():
    x, unused = parameter([1.0]), parameter([4.0, 5.0])
    with Tape() as tape:
        out = tsum(x * 2.0)
        tsum(unused)  # recorded but not part of the loss
        tape.backward(out)
    assert np.array_equal(unused.grad, [0.0, 0.0])


def test_backward_errors():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(TapeError):
            tape.backward(y)
    with Tape() as tape:
        loss = tsum(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        with pytest.raises(TapeError):
            tsum(x * 3.0)


def test_non_finite_forward_is_an_error():
    big = Tensor(np.array([3e38], dtype=np.float32))
    with pytest.raises(NonFiniteError) as e:
        big * 10.0
    assert "mul" in str(e.value)


def test_tensor_basics():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32
    assert t.grad is None and not t.requires_grad
    with pytest.raises(ShapeError):
        t.item()
