import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jco_mvton.errors import ContractError, NonFiniteError
from jco_mvton.flow import Parameterization, RfConfig, euler_sample, rf_interpolate, rf_target

EQ2 = RfConfig(Parameterization.PAPER_EQ2)
CV = RfConfig(Parameterization.CONSTANT_VELOCITY)


def test_interpolation_endpoints_exact(rng):
    x0, eps = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(rf_interpolate(x0, eps, 0.0), x0)
    np.testing.assert_array_equal(rf_interpolate(x0, eps, 1.0), eps)


@given(st.integers(0, 10**6))
def test_targets(seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((2, 2, 3, 4, 4))
    t = rng.uniform(0, 0.98, size=2)
    xt = rf_interpolate(x0, eps, t)
    tt = t[:, None, None, None]
    np.testing.assert_allclose(rf_target(x0, xt, t, EQ2), tt / (1 - tt) * (x0 - eps), atol=1e-12, rtol=0)
    np.testing.assert_array_equal(rf_target(x0, xt, t, CV, eps=eps), x0 - eps)


def test_eq2_refuses_t_at_or_above_tmax():
    with pytest.raises(ContractError):
        rf_target(np.zeros(2), np.zeros(2), 0.99, EQ2)


@pytest.mark.parametrize("steps", [1, 2, 4, 8, 64])
def test_euler_exact_on_dyadic_values(steps):
    cfg = RfConfig(t_max=0.5)
    x0 = np.array([0.25, -1.5, 3.0])
    eps = np.array([1.0, 0.5, -2.0])
    x = euler_sample(lambda x, t: x0 - eps, rf_interpolate(x0, eps, 0.5), cfg, steps)
    np.testing.assert_array_equal(x, x0)


@given(st.integers(1, 50), st.integers(0, 10**6))
def test_euler_recovers_x0_any_steps(steps, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((2, 5))
    x = euler_sample(lambda x, t: x0 - eps, rf_interpolate(x0, eps, CV.t_max), CV, steps)
    assert np.max(np.abs(x - x0)) < 1e-12
    # displacement-ratio parameterization with an oracle that only sees x
    oracle = lambda x, t: (x0 - x) / (1 - t)
    x = euler_sample(oracle, rf_interpolate(x0, eps, EQ2.t_max), EQ2, steps)
    assert np.max(np.abs(x - x0)) < 1e-9


def test_nonfinite_velocity_raises():
    with pytest.raises(NonFiniteError):
        euler_sample(lambda x, t: x * np.nan, np.ones(2), CV, 3)


def test_return_path_length():
    _, path = euler_sample(lambda x, t: -x, np.ones(2), CV, 5, return_path=True)
    assert len(path) == 6
