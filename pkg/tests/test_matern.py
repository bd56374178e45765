import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvmagi.matern import (FactorizationError, KernelConfig, bessel_k, build_gram, matern_cov,
                           matern_cov_derivs)

# K_nu(z) from mpmath quadrature of int_0^inf exp(-z cosh t) cosh(nu t) dt at 20 digits
QUAD_ORACLE = {
    (2.01, 1.0): 1.645466188193864,
    (2.01, 0.05): 833.09108265698043,
    (0.3, 3.7): 0.015801315880070932,
    (4.2, 12.0): 4.4363488108152034e-6,
}


def k_half(order, z):
    z = np.asarray(z, dtype=float)
    base = np.sqrt(np.pi / (2 * z)) * np.exp(-z)
    if order == 0.5:
        return base
    if order == 1.5:
        return base * (1 + 1 / z)
    if order == 2.5:
        return base * (1 + 3 / z + 3 / z ** 2)
    raise ValueError(order)


def test_bessel_examples():
    assert bessel_k(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-14)
    assert bessel_k(1.5, 2.0) == pytest.approx(math.sqrt(math.pi / 4) * math.exp(-2) * 1.5,
                                               rel=1e-14)


@pytest.mark.parametrize("key", sorted(QUAD_ORACLE))
def test_bessel_quadrature_oracle(key):
    nu, z = key
    assert bessel_k(nu, z) == pytest.approx(QUAD_ORACLE[key], rel=1e-10)


@pytest.mark.parametrize("order", [0.5, 1.5, 2.5])
def test_bessel_half_integer_closed_forms(order):
    z = np.geomspace(0.01, 20.0, 400)
    np.testing.assert_allclose(bessel_k(order, z), k_half(order, z), rtol=1e-12)


def test_bessel_negative_order_and_domain():
    assert bessel_k(-1.3, 0.7) == bessel_k(1.3, 0.7)
    with pytest.raises(ValueError):
        bessel_k(1.0, 0.0)
    with pytest.raises(ValueError):
        bessel_k(1.0, -2.0)
    assert bessel_k(5.0, 1e-300) == np.inf


@settings(max_examples=150, deadline=None)
# scipy.special.kv returns nan for subnormal orders
@given(st.floats(0.0, 5.0, allow_subnormal=False), st.floats(1e-6, 50.0))
def test_bessel_matches_scipy(nu, z):
    from scipy.special import kv
    assert bessel_k(nu, z) == pytest.approx(kv(nu, z), rel=1e-10)


def test_matern_cov_examples():
    assert matern_cov(KernelConfig(1, 1, 0.5), 1.0) == pytest.approx(math.exp(-1), rel=1e-13)
    assert matern_cov(KernelConfig(2, 3, 2.01), 0.0) == 4.0
    r3 = math.sqrt(3)
    assert matern_cov(KernelConfig(1, 1, 1.5), 1.0) == pytest.approx((1 + r3) * math.exp(-r3),
                                                                     rel=1e-12)
    with pytest.raises(ValueError):
        matern_cov(KernelConfig(1, 1), -0.1)


@pytest.mark.parametrize("nu", [1.5, 2.5])
def test_matern_half_integer_equivalence(nu):
    cfg = KernelConfig(1.3, 0.7, nu)
    l = np.linspace(0.0, 5.0, 201)
    u = math.sqrt(2 * nu) * l / cfg.phi2
    closed = (1 + u) * np.exp(-u) if nu == 1.5 else (1 + u + u ** 2 / 3) * np.exp(-u)
    np.testing.assert_allclose(matern_cov(cfg, l), cfg.phi1 ** 2 * closed, rtol=1e-10, atol=1e-14)


def test_derivs_zero_lag():
    k, ks, kt, kst = matern_cov_derivs(KernelConfig(1, 1, 2.01), 0.5, 0.5)
    assert (k, ks, kt) == (1.0, 0.0, 0.0)
    assert kst == pytest.approx(2.01 / 1.01)


def test_derivs_closed_form_nu15():
    _, _, kt, _ = matern_cov_derivs(KernelConfig(1, 1, 1.5), 0.0, 1.0)
    r3 = math.sqrt(3)
    assert kt == pytest.approx(-3 * math.exp(-r3), rel=1e-12)


def _fd_derivs(cfg, s, t, h=1e-5):
    def k(a, b):
        return matern_cov(cfg, abs(a - b))
    ks = (k(s + h, t) - k(s - h, t)) / (2 * h)
    kt = (k(s, t + h) - k(s, t - h)) / (2 * h)
    # mixed derivative: difference the first-derivative kernel in t
    kst = (matern_cov_derivs(cfg, s, t + h)[1] - matern_cov_derivs(cfg, s, t - h)[1]) / (2 * h)
    return ks, kt, kst


def test_derivs_fd_example():
    cfg = KernelConfig(1, 2, 2.01)
    _, ks, kt, kst = matern_cov_derivs(cfg, 0.0, 1.0)
    fks, fkt, fkst = _fd_derivs(cfg, 0.0, 1.0)
    assert ks == pytest.approx(fks, rel=1e-6)
    assert kt == pytest.approx(fkt, rel=1e-6)
    assert kst == pytest.approx(fkst, rel=1e-5)


def test_derivs_fd_random_draws():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cfg = KernelConfig(rng.uniform(0.3, 3), rng.uniform(0.3, 5), rng.choice([1.5, 2.01, 2.5, 3.3]))
        s = rng.uniform(-5, 5)
        t = s + rng.choice([-1, 1]) * rng.uniform(0.05, 3) * cfg.phi2
        _, ks, kt, kst = matern_cov_derivs(cfg, s, t)
        fks, fkt, fkst = _fd_derivs(cfg, s, t)
        np.testing.assert_allclose([ks, kt], [fks, fkt], rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(kst, fkst, rtol=1e-5, atol=1e-9)


def test_second_derivative_needs_nu_above_one():
    with pytest.raises(ValueError):
        matern_cov_derivs(KernelConfig(1, 1, 0.5), 0.0, 1.0)
    assert matern_cov_derivs(KernelConfig(1, 1, 0.5), 0.0, 1.0, second=False)[3] is None


def test_diagonal_limit_one_sided_fd():
    cfg = KernelConfig(1.2, 0.8, 2.01)
    _, _, _, kst0 = matern_cov_derivs(cfg, 0.0, 0.0)
    lags = np.array([1e-3, 5e-4])
    near = [matern_cov_derivs(cfg, 0.0, l)[3] for l in lags]
    # Richardson on the small-lag expansion
    assert kst0 == pytest.approx(near[1] + (near[1] - near[0]), rel=1e-2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.2, 4.0), st.sampled_from([1.5, 2.01, 2.5]),
       st.floats(-3, 3), st.floats(-3, 3))
def test_cov_symmetric_and_maximal_at_zero(phi1, phi2, nu, s, t):
    cfg = KernelConfig(phi1, phi2, nu)
    k_st = matern_cov_derivs(cfg, s, t)[0]
    k_ts = matern_cov_derivs(cfg, t, s)[0]
    assert k_st == k_ts
    assert k_st <= phi1 ** 2 + 1e-15


@pytest.mark.parametrize("nu", [1.5, 2.01, 2.5])
def test_cov_strictly_decreasing(nu):
    cfg = KernelConfig(1.0, 1.5, nu)
    k = matern_cov(cfg, np.linspace(0, 10 * cfg.phi2, 500))
    assert np.all(np.diff(k) < 0)


def test_gram_two_point_schur_oracle():
    cfg = KernelConfig(1.4, 0.9, 2.01)
    grid = np.array([0.0, 0.6])
    g = build_gram(cfg, grid, jitter=1e-7)
    K = np.empty((2, 2)); Kl = np.empty((2, 2)); Kr = np.empty((2, 2)); Kdd = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            K[i, j], Kl[i, j], Kr[i, j], Kdd[i, j] = matern_cov_derivs(cfg, grid[i], grid[j])
    Kj = K + 1e-7 * np.mean(np.diag(K)) * np.eye(2)
    C = Kdd - Kl @ np.linalg.inv(Kj) @ Kr
    np.testing.assert_allclose(g.C, C, atol=1e-8)
    np.testing.assert_allclose(g.Kprime_left, g.Kprime_right.T, atol=1e-15)


def test_gram_scales_with_phi1():
    grid = np.linspace(0, 4, 9)
    a = build_gram(KernelConfig(1.0, 1.3), grid)
    b = build_gram(KernelConfig(2.0, 1.3), grid)
    np.testing.assert_allclose(b.K, 4 * a.K, rtol=1e-14)


def test_gram_errors():
    with pytest.raises(ValueError):
        build_gram(KernelConfig(1, 1), [0.0])
    with pytest.raises(ValueError):
        build_gram(KernelConfig(1, 1), [0.0, 2.0, 1.0])
    with pytest.raises(FactorizationError) as info:
        build_gram(KernelConfig(1, 50.0), np.linspace(0, 1, 60), jitter=0.0)
    assert info.value.matrix in ("K", "C")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.floats(0.3, 3.0), st.floats(0.1, 3.0),
       st.sampled_from([1.5, 2.01, 2.5]), st.integers(0, 10_000))
def test_gram_positive_definite(n, phi1, phi2, nu, seed):
    grid = np.sort(np.random.default_rng(seed).uniform(0, 10, n))
    if np.min(np.diff(grid)) < 1e-3:
        grid = np.linspace(0, 10, n)
    g = build_gram(KernelConfig(phi1, phi2, nu), grid)
    jK = g.K + g.jitter * np.mean(np.diag(g.K)) * np.eye(n)
    jC = g.C + g.jitter * np.mean(np.diag(g.C)) * np.eye(n)
    assert np.linalg.eigvalsh(jK).min() > 0
    assert np.linalg.eigvalsh(jC).min() > 0
