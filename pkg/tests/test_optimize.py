import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvmagi.optimize import STALL_WINDOW, AdamConfig, adam_minimize


def quadratic(c):
    def fun(x):
        r = x - c
        return 0.5 * float(r @ r), r
    return fun


def test_first_step_is_lr():
    cfg = AdamConfig(lr=0.05, max_iters=1)
    res = adam_minimize(lambda x: (float(x.sum()), np.ones_like(x)), np.array([2.0, -1.0]), cfg)
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(res.x, [2.0 - 0.05, -1.0 - 0.05], atol=1e-9)


def test_quadratic_convergence():
    c = np.random.default_rng(0).normal(size=10)
    res = adam_minimize(quadratic(c), np.zeros(10), AdamConfig(lr=1e-2, max_iters=20000, tol=1e-14))
    assert res.iters <= 20000
    np.testing.assert_allclose(res.x, c, atol=1e-4)


def test_infinite_tol_stops_by_stall_rule():
    res = adam_minimize(quadratic(np.ones(3)), np.zeros(3), AdamConfig(tol=np.inf, max_iters=1000))
    assert res.iters == STALL_WINDOW
    assert res.trace.size == STALL_WINDOW + 1


def test_zero_iterations_returns_init():
    x0 = np.array([0.3, -0.7])
    res = adam_minimize(quadratic(np.zeros(2)), x0, AdamConfig(max_iters=0))
    np.testing.assert_array_equal(res.x, x0)
    assert res.iters == 0


def test_scale_zero_freezes_coordinate():
    res = adam_minimize(quadratic(np.array([1.0, 2.0])), np.zeros(2),
                        AdamConfig(lr=1e-1, max_iters=500), scale=np.array([1.0, 0.0]))
    assert res.x[1] == 0.0
    assert abs(res.x[0] - 1.0) < 1e-2


def test_nonfinite_objective_returns_last_good():
    def fun(x):
        if x[0] < -0.25:
            return np.nan, np.full_like(x, np.nan)
        return float(x[0]), np.ones_like(x)
    res = adam_minimize(fun, np.array([0.0]), AdamConfig(lr=0.1, max_iters=100))
    assert res.failed and "non-finite" in res.message
    assert np.isfinite(res.value) and res.x[0] >= -0.25


def test_nonfinite_init_raises():
    with pytest.raises(FloatingPointError):
        adam_minimize(lambda x: (np.inf, x), np.zeros(2))


def test_config_validation():
    for bad in (dict(lr=0), dict(beta1=1.0), dict(beta2=0.0), dict(eps=0), dict(max_iters=-1),
                dict(tol=-1)):
        with pytest.raises(ValueError):
            AdamConfig(**bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(1e-3, 0.3))
def test_deterministic_and_monotone_trace(n, seed, lr):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=n)
    A = rng.normal(size=(n, n))

    def fun(x):
        r = A @ (x - c)
        return float(r @ r + np.sin(x).sum()), 2 * A.T @ r + np.cos(x)

    cfg = AdamConfig(lr=lr, max_iters=300)
    a = adam_minimize(fun, np.zeros(n), cfg)
    b = adam_minimize(fun, np.zeros(n), cfg)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.trace, b.trace)
    assert np.all(np.diff(a.trace) <= 0)
    assert a.value == a.trace[-1] == fun(a.x)[0]
