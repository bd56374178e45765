import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from tvmagi.hmc import HmcConfig
from tvmagi.models import TrueParamSpec, builtin_truth, lv_model
from tvmagi.optimize import AdamConfig
from tvmagi.simeval import (case_study, coverage, coverage_by_replication, evaluate, param_rmse,
                            run_method, simulate_dataset, theta_truth_on, trajectory_rmse)


def test_zero_noise_equals_truth():
    m, tr = builtin_truth("lv")
    sim = simulate_dataset(m, replace(tr, noise_sigma=np.zeros(2)), seed=3)
    for a, b in zip(sim.obs.y, sim.truth.y):
        np.testing.assert_array_equal(a, b)


def test_seird_schedule():
    sim = case_study("seird").simulate(1)
    assert sim.obs.counts == (33, 17, 33, 33)
    np.testing.assert_array_equal(sim.obs.tau[1], np.arange(0.0, 33.0, 2.0))
    np.testing.assert_array_equal(sim.obs.tau[0], np.arange(0.0, 33.0))


def test_log_noise_sd_and_independence():
    m = lv_model()
    n = 50_000
    times = np.linspace(0.0, 5.0, n)
    tr = TrueParamSpec((lambda t: 0.6 + 0 * t, lambda t: 1.0 + 0 * t), np.array([0.75, 1.0]),
                       np.array([3.0, 1.0]), 5.0, np.array([0.03, 0.03]), (times, times))
    sim = simulate_dataset(m, tr, seed=0, substeps=1)
    e = np.stack([np.log(y / x) for y, x in zip(sim.obs.y, sim.truth.y)])
    assert e.size == 100_000
    assert abs(e.std() / 0.03 - 1) < 0.01
    assert abs(np.corrcoef(e[0], e[1])[0, 1]) < 0.02
    for row in e:
        assert abs(np.corrcoef(row[:-1], row[1:])[0, 1]) < 0.02


def test_simulate_validation():
    m, tr = builtin_truth("lv")
    with pytest.raises(ValueError):
        simulate_dataset(m, replace(tr, obs_schedule=tr.obs_schedule[:1]), 0)
    with pytest.raises(ValueError):
        replace(tr, noise_sigma=np.array([-0.1, 0.1]))


def test_param_rmse_examples():
    truth = np.sin(np.linspace(0, 3, 20))
    assert param_rmse(truth, truth) == 0.0
    assert param_rmse(truth + 0.1, truth) == pytest.approx(0.1, rel=1e-12)
    rng = np.random.default_rng(0)
    est, tru = rng.normal(size=(3, 20)), rng.normal(size=(3, 20))
    np.testing.assert_allclose(param_rmse(est, tru), np.sqrt(((est - tru) ** 2).mean(axis=1)))
    with pytest.raises(ValueError):
        param_rmse(np.zeros(5), np.zeros(6))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30))
def test_param_rmse_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    est, tru = rng.normal(size=n), rng.normal(size=n)
    perm = rng.permutation(n)
    assert param_rmse(est[perm], tru[perm]) == pytest.approx(param_rmse(est, tru), rel=1e-13)


def lv_trajectory_case():
    m, tr = builtin_truth("lv")
    sim = simulate_dataset(m, tr, seed=0)
    grid = np.linspace(0, tr.horizon, 61)
    return m, tr, sim, grid


def test_trajectory_rmse_truth_and_bias():
    m, tr, sim, _ = lv_trajectory_case()
    # theta is linearly interpolated between grid points; the grid must be
    # fine enough for that O(h^2) error to vanish
    grid = np.linspace(0, tr.horizon, 1201)
    theta = tr.theta_at(grid)
    rmse, ok = trajectory_rmse(tr.x0, theta, tr.psi, grid, m, sim.truth.tau, sim.truth.y)
    assert ok and np.all(rmse < 1e-4)
    rmse_b, _ = trajectory_rmse(tr.x0, theta, tr.psi, grid, m, sim.truth.tau, sim.truth.y,
                                output=lambda x: x + 0.25)
    np.testing.assert_allclose(rmse_b, 0.25, atol=1e-4)


def test_trajectory_rmse_matches_independent_solver():
    m, tr, sim, grid = lv_trajectory_case()
    theta = np.vstack([0.5 + 0.1 * np.cos(grid / 3), np.full(grid.size, 1.05)])
    psi = np.array([0.7, 1.1])
    rmse, _ = trajectory_rmse([2.8, 1.1], theta, psi, grid, m, sim.truth.tau, sim.truth.y)

    def rhs(t, x):
        th = np.array([np.interp(t, grid, row) for row in theta])
        return m.rhs(x, th, psi, t)

    t_eval = sim.truth.tau[0]
    sol = solve_ivp(rhs, (0.0, t_eval[-1]), [2.8, 1.1], t_eval=t_eval, rtol=1e-10, atol=1e-10,
                    max_step=grid[1] - grid[0])
    ref = np.sqrt(((sol.y - np.stack(sim.truth.y)) ** 2).mean(axis=1))
    np.testing.assert_allclose(rmse, ref, rtol=1e-3)


def test_trajectory_rmse_failed_integration():
    m, tr, sim, grid = lv_trajectory_case()
    theta = np.full((2, grid.size), -50.0)
    with np.errstate(all="ignore"):
        rmse, ok = trajectory_rmse(tr.x0, theta, tr.psi, grid, m, sim.truth.tau, sim.truth.y)
    assert not ok and np.all(np.isinf(rmse))


def test_coverage_examples():
    truth = np.zeros(4)
    assert coverage(truth - 1, truth + 1, truth) == 1.0
    assert coverage(truth + 1, truth + 2, truth) == 0.0
    assert coverage([-1, -1, -1, 1], [1, 1, 1, 2], truth) == 0.75
    with pytest.raises(ValueError):
        coverage([1.0], [0.0], [0.5])
    per, mean = coverage_by_replication([[-1, 1], [1, 1]], [[1, 2], [2, 2]], [[0, 0], [0, 0]])
    np.testing.assert_array_equal(per, [0.5, 0.0])
    assert mean == 0.25


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_coverage_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    lo = rng.normal(size=(5, 7))
    hi = lo + rng.uniform(0, 2, size=(5, 7))
    tr = rng.normal(size=(5, 7))
    perm = rng.permutation(5)
    assert coverage(lo[perm], hi[perm], tr[perm]) == coverage(lo, hi, tr)
    assert coverage_by_replication(lo[perm], hi[perm], tr[perm])[1] == pytest.approx(
        coverage_by_replication(lo, hi, tr)[1], rel=1e-14)


def test_case_study_lookup():
    with pytest.raises(ValueError):
        case_study("sir")
    study = case_study("HIV")
    sim = study.simulate(1)
    model, obs = study.prepare(sim)
    assert model.dim_x == 1 and obs.counts == (101,)
    a = theta_truth_on(study, sim, np.array([0.0, 10.0, 37.5]))
    assert a.shape == (1, 3) and np.all(a > 0)


def test_hiv_intervals_come_from_draws():
    study = case_study("hiv")
    sim = study.simulate(2)
    model, obs = study.prepare(sim)
    fast = AdamConfig(lr=1e-2, max_iters=200)
    cfg = replace(study.tvmagi, adam_stage1=fast, adam_stage2=fast, adam_stage4=fast,
                  multistart=False, hmc=HmcConfig(step_size=1e-3, leapfrog_steps=5,
                                                  n_samples=300, adapt=True))
    out = run_method("tvmagi", study, model, obs, cfg)
    fit = out.diagnostics["fit"]
    lay = fit.map_state.layout
    T = model.exogenous(out.grid)
    a = np.stack([lay.unpack(v)[1][0] + lay.unpack(v)[1][1] * T for v in fit.samples.draws])
    np.testing.assert_allclose(out.metric_lower[0], np.percentile(a, 2.5, axis=0), rtol=1e-12)
    np.testing.assert_allclose(out.metric_upper[0], np.percentile(a, 97.5, axis=0), rtol=1e-12)
    metrics = evaluate(study, sim, model, out)
    assert 0.0 <= metrics["cover_a"] <= 1.0
    assert math.isfinite(metrics["rmse_a"])


@pytest.mark.parametrize("method", ["ekf", "ukf", "enkf", "eakf", "rk4"])
def test_benchmark_methods_run_on_seird(method):
    study = case_study("seird")
    sim = study.simulate(1)
    model, obs = study.prepare(sim)
    fast = AdamConfig(lr=1e-2, max_iters=100)
    cfg = replace(study.tvmagi, discretization_level=1, adam_stage1=fast)
    out = run_method(method, study, model, obs, cfg, rk_adam=AdamConfig(lr=5e-3, max_iters=5),
                     filter_cfg={"ensemble_size": 30})
    metrics = evaluate(study, sim, model, out)
    assert out.theta_grid.shape == (3, out.grid.size)
    assert {"rmse_beta", "err_vi", "traj_S"} <= set(metrics)
    if method in ("ekf", "ukf", "enkf", "eakf"):
        assert out.psi_bar.shape == (1,)
