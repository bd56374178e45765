"""Gaussian densities, derivative conditioning and GP hyperparameter fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .matern import GramBundle, KernelConfig, _lag_table, _radial

__all__ = [
    "GpPriorSpec",
    "ThetaHyperFit",
    "FitError",
    "DegenerateFitError",
    "gaussian_logpdf",
    "conditional_deriv_moments",
    "fit_x_hyperparams",
    "fit_theta_hyperparams",
]

_LOG2PI = math.log(2.0 * math.pi)
N_STARTS = 8


class FitError(RuntimeError):
    """Hyperparameter optimization failed."""


class DegenerateFitError(FitError):
    """The data carry no signal (constant input); the likelihood is flat."""


@dataclass(frozen=True)
class GpPriorSpec:
    mean: float
    kernel: KernelConfig
    mean_deriv: float = 0.0


@dataclass(frozen=True)
class ThetaHyperFit:
    phi1: float
    phi2: float
    delta: float
    bounds_phi2: tuple[float, float]
    loglik: float = float("nan")


def gaussian_logpdf(x, mean, chol) -> float:
    """log N(x; mean, L L^T) for a lower-triangular factor L."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    if x.ndim != 1 or mean.shape != x.shape or chol.shape != (x.size, x.size):
        raise ValueError(
            f"dimension mismatch: x{x.shape}, mean{mean.shape}, chol{chol.shape}")
    z = linalg.solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (x.size * _LOG2PI + logdet + float(z @ z))


def conditional_deriv_moments(x, prior: GpPriorSpec, gram: GramBundle):
    """Mean and covariance factor of the GP derivative given its values.

    Returns ``(m, chol_C)`` with ``m = mean_deriv + 'K K^-1 (x - mean)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (gram.size,):
        raise ValueError(f"x has shape {x.shape}, grid has {gram.size} points")
    m = prior.mean_deriv + gram.cond_op @ (x - prior.mean)
    return m, gram.chol_C


# --- marginal likelihood machinery -------------------------------------------

def _kernel_and_grad(nu, phi1, phi2, lags, inv):
    """K and dK/dlog(phi2) on a grid given its lag table."""
    cfg = KernelConfig(phi1, phi2, nu)
    k0, k1 = _radial(cfg, lags, 1)
    # d k / d log(phi2) = -l * dk/dl
    return k0[inv], (-lags * k1)[inv]


def _neg_loglik(params, resid, lags, inv, nu, fixed_phi2=None):
    """Negative log marginal likelihood of N(0, K + s^2 I) and its gradient.

    ``params`` = (log phi1, log phi2, log s) or (log phi1, log s) when
    phi2 is pinned.
    """
    if fixed_phi2 is None:
        lphi1, lphi2, lsig = params
        phi2 = math.exp(lphi2)
    else:
        lphi1, lsig = params
        phi2 = fixed_phi2
    phi1, sig = math.exp(lphi1), math.exp(lsig)
    n = resid.size
    K, dK2 = _kernel_and_grad(nu, phi1, phi2, lags, inv)
    cov = K + (sig * sig + 1e-10 * phi1 * phi1) * np.eye(n)
    try:
        L = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        return 1e300, np.zeros_like(params)
    alpha = linalg.cho_solve((L, True), resid)
    nll = 0.5 * (n * _LOG2PI + 2.0 * np.sum(np.log(np.diag(L))) + resid @ alpha)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    # d nll / d p = -0.5 tr(W dK/dp)
    g_phi1 = -0.5 * np.sum(W * (2.0 * K))
    g_sig = -0.5 * np.trace(W) * 2.0 * sig * sig
    if fixed_phi2 is None:
        g_phi2 = -0.5 * np.sum(W * dK2)
        grad = np.array([g_phi1, g_phi2, g_sig])
    else:
        grad = np.array([g_phi1, g_sig])
    return float(nll), grad


def _multistart(fun, starts, bounds):
    best = None
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"ftol": 1e-8 * 1e-3, "gtol": 1e-8, "maxiter": 500})
        except (ValueError, FloatingPointError):
            continue
        if not np.isfinite(res.fun) or res.fun >= 1e299:
            continue
        if best is None or res.fun < best.fun:
            best = res
    return best


def x_phi2_bounds(tau) -> tuple[float, float]:
    """Search range for the X length scale: min spacing to twice the span."""
    tau = np.asarray(tau, dtype=float)
    span = float(tau[-1] - tau[0])
    return float(np.min(np.diff(tau))), 2.0 * span


def fit_x_hyperparams(y, tau, nu: float = 2.01, seed: int = 0):
    """GP-smoothing fit of (phi1, phi2, sigma) by maximum marginal likelihood.

    The constant mean is fixed at the sample mean of ``y``.  Runs
    ``N_STARTS`` deterministic L-BFGS-B starts in log-parameter space.
    """
    y = np.asarray(y, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if y.size < 4 or tau.shape != y.shape:
        raise FitError("fit_x_hyperparams needs at least 4 aligned observations")
    resid = y - y.mean()
    sd = float(np.std(y))
    if not sd > 0:
        raise DegenerateFitError("constant observations")
    lags, inv, _ = _lag_table(tau)
    lo2, hi2 = x_phi2_bounds(tau)
    bounds = [
        (math.log(1e-3 * sd), math.log(1e2 * sd)),
        (math.log(lo2), math.log(hi2)),
        (math.log(max(1e-6, 1e-6 * sd)), math.log(10.0 * sd)),
    ]
    rng = np.random.default_rng(seed)
    starts = [np.array([math.log(sd), math.log(0.5 * (lo2 * hi2) ** 0.5 + 0.5 * lo2),
                        math.log(0.1 * sd)])]
    for _ in range(N_STARTS - 1):
        starts.append(np.array([
            math.log(sd) + rng.uniform(-1.0, 1.0),
            rng.uniform(*bounds[1]),
            math.log(sd) + rng.uniform(math.log(1e-3), math.log(0.5)),
        ]))
    best = _multistart(lambda p: _neg_loglik(p, resid, lags, inv, nu), starts, bounds)
    if best is None:
        raise FitError("all hyperparameter starts diverged")
    phi1, phi2, sigma = np.exp(best.x)
    return float(phi1), float(phi2), float(sigma)


def fit_theta_hyperparams(theta_tilde, grid, mu_theta: float, bounds, nu: float = 2.01,
                          seed: int = 0) -> ThetaHyperFit:
    """Empirical-Bayes kernel for a time-varying parameter.

    Maximizes the density of the point-wise estimate under
    N(mu_theta, K(phi1, phi2) + delta^2 I), with phi2 uniform on ``bounds``.
    """
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    grid = np.asarray(grid, dtype=float)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0 < lo <= hi):
        raise ValueError(f"invalid phi2 bounds {bounds}")
    if theta_tilde.shape != grid.shape:
        raise ValueError("theta_tilde and grid lengths differ")
    resid = theta_tilde - mu_theta
    amp = float(np.max(np.abs(resid)))
    if not amp > 1e-12 * max(1.0, abs(mu_theta)):
        raise DegenerateFitError("point-wise estimate is constant at the prior mean")
    scale = float(np.sqrt(np.mean(resid ** 2)))
    lags, inv, _ = _lag_table(grid)
    b_phi1 = (math.log(1e-6 * scale), math.log(1e3 * scale))
    b_delta = (math.log(1e-8 * scale), math.log(10.0 * scale))
    rng = np.random.default_rng(seed)

    if lo == hi:
        starts = [np.array([math.log(scale), math.log(0.1 * scale)])]
        for _ in range(N_STARTS - 1):
            starts.append(np.array([math.log(scale) + rng.uniform(-1, 1),
                                    math.log(scale) + rng.uniform(-5, 0)]))
        best = _multistart(lambda p: _neg_loglik(p, resid, lags, inv, nu, fixed_phi2=lo),
                           starts, [b_phi1, b_delta])
        if best is None:
            raise FitError("theta hyperparameter fit diverged")
        phi1, delta = np.exp(best.x)
        return ThetaHyperFit(float(phi1), lo, float(delta), (lo, hi), -float(best.fun))

    b_phi2 = (math.log(lo), math.log(hi))
    starts = [np.array([math.log(scale), 0.5 * (b_phi2[0] + b_phi2[1]), math.log(0.1 * scale)])]
    for _ in range(N_STARTS - 1):
        starts.append(np.array([math.log(scale) + rng.uniform(-1, 1),
                                rng.uniform(*b_phi2),
                                math.log(scale) + rng.uniform(-5, 0)]))
    best = _multistart(lambda p: _neg_loglik(p, resid, lags, inv, nu),
                       starts, [b_phi1, b_phi2, b_delta])
    if best is None:
        raise FitError("theta hyperparameter fit diverged")
    phi1, phi2, delta = np.exp(best.x)
    phi2 = float(min(max(phi2, lo), hi))
    return ThetaHyperFit(float(phi1), phi2, float(delta), (lo, hi), -float(best.fun))
