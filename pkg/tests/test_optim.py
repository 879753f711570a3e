import math

import numpy as np
import pytest

from ganspk.optim import OptimizerError, optimizer_step, rmsprop, sgd


def test_sgd_paper_learning_rate():
    out = optimizer_step(sgd(0.001), {"p": np.array(1.0)}, {"p": np.array(2.0)})
    assert out["p"] == pytest.approx(0.998, abs=1e-15)


def test_sgd_zero_gradient_is_noop():
    state = sgd(0.001)
    p = np.array([1.0, -2.0])
    out = optimizer_step(state, {"p": p}, {"p": np.zeros(2)})
    assert np.array_equal(out["p"], p)
    assert state.second_moment == {}


def test_rmsprop_first_step_closed_form():
    state = rmsprop(0.003, rho=0.9, eps=1e-8)
    out = optimizer_step(state, {"p": np.array(0.0)}, {"p": np.array(1.0)})
    assert state.second_moment["p"] == pytest.approx(0.1, abs=1e-15)
    expected = -0.003 / (math.sqrt(0.1) + 1e-8)
    assert out["p"] == pytest.approx(expected, abs=1e-15)
    assert out["p"] == pytest.approx(-0.0094868, abs=1e-7)


def test_rmsprop_accumulator_non_negative():
    state = rmsprop(0.01)
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=5)}
    for _ in range(20):
        params = optimizer_step(state, params, {"w": rng.normal(size=5)})
    assert np.all(state.second_moment["w"] >= 0)


def test_missing_gradient_raises():
    with pytest.raises(OptimizerError, match="b"):
        optimizer_step(sgd(0.1), {"a": np.ones(1), "b": np.ones(1)}, {"a": np.ones(1)})


def test_non_finite_update_names_parameter():
    with pytest.raises(OptimizerError, match="w"):
        optimizer_step(sgd(1e308), {"w": np.array(1e308)}, {"w": np.array(10.0)})


def test_unknown_kind_rejected():
    from ganspk.optim import OptimizerState
    with pytest.raises(OptimizerError):
        OptimizerState("adam", 0.1)
