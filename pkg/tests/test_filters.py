import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvmagi.filters import FilterConfig, FilterError, eakf_update_scalar, run_filter
from tvmagi.integrate import interp_theta, rk4_solve
from tvmagi.models import OdeModel, lv_model
from tvmagi.posterior import ObservationSet

DECAY = 0.5


def linear_model():
    """dx/dt = -0.5 x + theta; linear in the augmented state (x, theta)."""
    def rhs(x, th, ps, t):
        return -DECAY * x + th[0][None]
    def jac(x, th, ps, t):
        z = np.zeros_like(x[0] + th[0])
        return (z - DECAY)[None, None], (z + 1.0)[None, None], np.zeros((1, 0) + z.shape)
    return OdeModel("linear", ("x",), ("theta",), (), rhs, jac)


def rk4_matrix(A, h, substeps):
    hA = h * A
    step = np.eye(A.shape[0]) + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
    return np.linalg.matrix_power(step, substeps)


def kalman_oracle(times, ys, mean, cov, q, r, substeps):
    A = np.array([[-DECAY, 1.0], [0.0, 0.0]])
    H = np.array([[1.0, 0.0]])
    means, variances = [], []
    for k, (t, y) in enumerate(zip(times, ys)):
        if k:
            F = rk4_matrix(A, (t - times[k - 1]) / substeps, substeps)
            mean = F @ mean
            cov = F @ cov @ F.T + np.diag(q)
        S = H @ cov @ H.T + r
        K = cov @ H.T / S
        mean = mean + (K * (y - H @ mean)).ravel()
        cov = (np.eye(2) - K @ H) @ cov
        means.append(mean)
        variances.append(np.diag(cov))
    return np.array(means).T, np.array(variances).T


def linear_case():
    times = np.linspace(0.0, 4.0, 9)
    rng = np.random.default_rng(0)
    ys = 4.0 + np.cumsum(0.3 * rng.standard_normal(times.size))
    data = ObservationSet((times,), (ys,))
    init = (np.array([4.0, 2.0]), np.array([[0.5, 0.1], [0.1, 0.3]]))
    return times, ys, data, init


def run_linear(method, **kw):
    times, ys, data, init = linear_case()
    cfg = FilterConfig(method=method, obs_sd=np.array([0.4]), state_process_sd=np.array([0.05]),
                       param_walk_sd=np.array([0.1]), inflation=1.0, substeps=4, **kw)
    res = run_filter(data, linear_model(), init, cfg)
    ref = kalman_oracle(times, ys, init[0], init[1], [0.05 ** 2, 0.1 ** 2], 0.4 ** 2, 4)
    return res, ref


def test_ekf_equals_kalman():
    res, (m, v) = run_linear("ekf")
    np.testing.assert_allclose(res.filtered_means, m, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(res.filtered_sds ** 2, v, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(res.theta_path, m[1:])


def test_ukf_equals_kalman():
    res, (m, v) = run_linear("ukf")
    np.testing.assert_allclose(res.filtered_means, m, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(res.filtered_sds ** 2, v, rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("method", ["enkf", "eakf"])
def test_large_ensemble_mean_near_kalman(method):
    res, (m, _) = run_linear(method, ensemble_size=10_000, seed=3)
    assert np.all(np.abs(res.filtered_means - m) <= 0.05 * np.abs(m))


def test_eakf_scalar_example():
    out = eakf_update_scalar(np.array([[1.0, 3.0]]), 0, 2.0, 2.0)
    np.testing.assert_allclose(out[0], [2 - 2 ** -0.5, 2 + 2 ** -0.5], rtol=1e-15)
    assert out[0].var(ddof=1) == pytest.approx(1.0, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 50), st.integers(1, 4))
def test_eakf_matches_kalman_moments(seed, N, n):
    rng = np.random.default_rng(seed)
    ens = rng.normal(size=(n, N)) * rng.uniform(0.5, 3, (n, 1)) + rng.normal(size=(n, 1))
    j = int(rng.integers(n))
    y, r = float(rng.normal()), float(rng.uniform(0.1, 4))
    out = eakf_update_scalar(ens, j, y, r)
    mu, var = ens[j].mean(), ens[j].var(ddof=1)
    var_a = var * r / (var + r)
    assert out[j].mean() == pytest.approx(var_a * (mu / var + y / r), abs=1e-10 * (1 + abs(y) + abs(mu)))
    assert out[j].var(ddof=1) == pytest.approx(var_a, rel=1e-10)
    # every coordinate lands on the Kalman posterior built from the sample moments
    for i in range(n):
        c = np.cov(ens[i], ens[j])[0, 1]
        gain = c / (var + r)
        assert out[i].mean() == pytest.approx(ens[i].mean() + gain * (y - mu),
                                              abs=1e-10 * (1 + np.abs(ens).max() + abs(y)))
        np.testing.assert_allclose(np.cov(out[i], out[j])[0, 1], c * r / (var + r), rtol=1e-8,
                                   atol=1e-12)


def test_eakf_degenerate_observed_coordinate_unchanged():
    ens = np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])
    np.testing.assert_array_equal(eakf_update_scalar(ens, 0, 5.0, 1.0), ens)


@pytest.mark.parametrize("method", ["ekf", "ukf", "enkf", "eakf"])
def test_noiseless_truth_initialized_tracking(method):
    m = lv_model()
    grid = np.linspace(0, 10, 41)
    theta, psi, x0 = np.array([0.6, 1.0]), np.array([0.75, 1.0]), np.array([3.0, 1.0])
    traj = rk4_solve(m, x0, interp_theta(grid, np.repeat(theta[:, None], grid.size, 1)), psi, grid,
                     substeps=5)
    data = ObservationSet((grid, grid), (traj[0], traj[1]))
    init = (np.concatenate([x0, theta, psi]), 1e-20 * np.eye(6))
    cfg = FilterConfig(method=method, obs_sd=np.array([0.1, 0.1]), inflation=1.0, substeps=5,
                       ensemble_size=20)
    res = run_filter(data, m, init, cfg)
    np.testing.assert_allclose(res.x_path(2), traj, atol=1e-6)
    np.testing.assert_allclose(res.psi_bar, psi, atol=1e-6)


def test_ensemble_reproducible_with_seed():
    a, _ = run_linear("enkf", ensemble_size=50, seed=1)
    b, _ = run_linear("enkf", ensemble_size=50, seed=1)
    np.testing.assert_array_equal(a.filtered_means, b.filtered_means)


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(method="pf")
    with pytest.raises(ValueError):
        FilterConfig(method="enkf", ensemble_size=1)
    with pytest.raises(ValueError):
        FilterConfig(inflation=0.9)
    with pytest.raises(ValueError):
        FilterConfig(param_walk_sd=np.array([-0.1]))


def test_run_errors():
    times, ys, data, init = linear_case()
    with pytest.raises(ValueError):
        run_filter(data, linear_model(), init, FilterConfig(method="ekf"))
    with pytest.raises(ValueError):
        run_filter(data, linear_model(), (np.zeros(3), np.eye(3)), FilterConfig(obs_sd=np.ones(1)))
    with pytest.raises(FilterError):
        run_filter(data, linear_model(), (init[0], -np.eye(2)),
                   FilterConfig(method="eakf", obs_sd=np.ones(1)))
    with pytest.raises(FilterError):
        run_filter(data, linear_model(), (init[0], -np.eye(2)),
                   FilterConfig(method="ukf", obs_sd=np.ones(1)))
