import numpy as np
import pytest

from stereoguide.errors import NonFiniteValue
from stereoguide.gradcheck import SUITE, check_gradient, run_suite
from stereoguide.losses import LossValueGrad


def quadratic(x):
    return LossValueGrad(float((x ** 2).sum()), {"x": 2 * x})


def test_correct_gradient_passes():
    rep = check_gradient(quadratic, {"x": np.array([0.5, -1.5, 2.0])})
    assert rep.ok() and rep.evaluations == 6
    assert set(rep.per_input) == {"x"}


def test_wrong_gradient_is_caught():
    wrong = lambda x: LossValueGrad(float((x ** 2).sum()), {"x": 2.1 * x})  # noqa: E731
    rep = check_gradient(wrong, {"x": np.array([0.5, -1.5])})
    assert not rep.ok()
    assert rep.max_rel_err == pytest.approx(0.1 / 2.1, rel=1e-4)
    assert rep.worst[0] == "x"


def test_missing_gradient_counts_as_zero():
    rep = check_gradient(lambda x, y: LossValueGrad(float(x.sum() + y.sum()), {"x": np.ones_like(x)}),
                         {"x": np.ones(2), "y": np.ones(2)}, wrt=["x", "y"])
    assert rep.per_input["x"] < 1e-8 and rep.per_input["y"] == pytest.approx(1.0)


def test_inputs_are_not_mutated_and_validation():
    x = np.array([1.0, 2.0])
    check_gradient(quadratic, {"x": x})
    np.testing.assert_array_equal(x, [1.0, 2.0])
    with pytest.raises(ValueError):
        check_gradient(quadratic, {"x": x}, h=0.0)
    with pytest.raises(NonFiniteValue):
        check_gradient(lambda x: LossValueGrad(float("nan"), {"x": x}), {"x": x})


def test_suite_small_run_is_deterministic():
    a = run_suite(3, seed=5)
    assert set(a) == set(SUITE)
    assert all(v < 1e-6 for v in a.values())
    assert run_suite(3, seed=5) == a
