import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from logic.gradcheck import NonDeterministicError, finite_diff_check
from logic.selfcheck import GRAD_STEP, GRAD_TOLERANCE, gradient_cases, pipeline_cases
from logic.tensor import Tensor, tsum


def test_linear_and_quadratic_checks():
    w = Tensor(np.array([0.5, -2.0, 3.0]), dtype=np.float64)
    assert finite_diff_check(lambda x: tsum(x * w), np.array([1.0, 2.0, 3.0])) < 1e-8
    assert finite_diff_check(lambda x: tsum(x * x), np.array([0.3, -1.7, 2.2])) < 1e-6


def test_wrong_gradient_is_caught():
    # the numeric side sees x^3 but the analytic side only x^2 via a detached factor
    def cheat(x):
        frozen = Tensor(x.data.copy(), dtype=np.float64)
        return tsum(x * x * frozen)

    assert finite_diff_check(cheat, np.array([1.0, 2.0])) > 0.1


def test_nondeterministic_fn_is_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_diff_check(lambda x: tsum(x * float(rng.normal())), np.array([1.0]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_matches_central_differences(seed):
    for name, fn, point in gradient_cases(np.random.default_rng(seed)):
        err = finite_diff_check(fn, point, h=GRAD_STEP)
        assert err < GRAD_TOLERANCE, f"{name}: {err:.3e}"


def test_encoder_pipelines_match_central_differences():
    for name, fn, point in pipeline_cases(0):
        err = finite_diff_check(fn, point, h=GRAD_STEP)
        assert err < GRAD_TOLERANCE, f"{name}: {err:.3e}"
