"""Kalman-type filters on the augmented state (x, theta, psi).

Parameters follow artificial random walks so that they can be tracked as
states.  Observations are direct, additive-Gaussian measurements of
individual components of x.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .integrate import rk4_step_tangent
from .models import OdeModel
from .posterior import ObservationSet

__all__ = ["FilterConfig", "FilterResult", "FilterError", "run_filter", "eakf_update_scalar",
           "METHODS"]

METHODS = ("ekf", "ukf", "enkf", "eakf")


class FilterError(FloatingPointError):
    """Covariance lost positive definiteness or the forecast diverged."""


@dataclass(frozen=True)
class FilterConfig:
    method: str = "eakf"
    ensemble_size: int = 300
    param_walk_sd: Optional[np.ndarray] = None
    state_process_sd: Optional[np.ndarray] = None
    obs_sd: Optional[np.ndarray] = None
    inflation: float = 1.02
    seed: int = 0
    substeps: int = 10
    ukf_alpha: float = 0.1
    ukf_beta: float = 2.0
    ukf_kappa: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown filter {self.method!r}; choose from {METHODS}")
        if self.method in ("enkf", "eakf") and self.ensemble_size < 2:
            raise ValueError("ensemble methods need ensemble_size >= 2")
        if not self.inflation >= 1.0:
            raise ValueError("inflation must be >= 1")
        for name in ("param_walk_sd", "state_process_sd", "obs_sd"):
            val = getattr(self, name)
            if val is not None and np.any(np.asarray(val) < 0):
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class FilterResult:
    times: np.ndarray
    filtered_means: np.ndarray
    filtered_sds: np.ndarray
    psi_bar: np.ndarray
    theta_path: np.ndarray
    method: str = ""

    def x_path(self, D: int) -> np.ndarray:
        return self.filtered_means[:D]


def _forecast_members(model: OdeModel, z, t0: float, t1: float, substeps: int):
    """RK4 on x with theta, psi frozen; ``z`` is (n_aug,) or (n_aug, N)."""
    D, P = model.dim_x, model.dim_theta
    x, th, ps = z[:D], z[D:D + P], z[D + P:]
    h = (t1 - t0) / substeps
    f = model.rhs
    for j in range(substeps):
        t = t0 + j * h
        k1 = f(x, th, ps, t)
        k2 = f(x + 0.5 * h * k1, th, ps, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, th, ps, t + 0.5 * h)
        k4 = f(x + h * k3, th, ps, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.concatenate([x, z[D:]], axis=0)


def _kalman_update(mean, cov, idx, y, r):
    """Linear update for direct observations of coordinates ``idx``."""
    S = cov[np.ix_(idx, idx)] + np.diag(r)
    PHt = cov[:, idx]
    try:
        cf = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        raise FilterError("innovation covariance is not positive definite") from None
    gain = linalg.cho_solve(cf, PHt.T).T
    mean = mean + gain @ (y - mean[idx])
    cov = cov - gain @ PHt.T
    return mean, 0.5 * (cov + cov.T)


def eakf_update_scalar(ens, j: int, y: float, r: float):
    """Serial EAKF analysis for one direct observation of coordinate ``j``.

    ``ens`` is (n_aug, N).  The observed coordinate is shifted and scaled
    to the scalar Kalman posterior; the increments are regressed onto all
    coordinates with the prior sample covariances.
    """
    h = ens[j]
    hbar = h.mean()
    var = h.var(ddof=1)
    if not var > 0:
        return ens
    var_a = 1.0 / (1.0 / var + 1.0 / r)
    mean_a = var_a * (hbar / var + y / r)
    dh = mean_a + np.sqrt(var_a / var) * (h - hbar) - h
    anom = ens - ens.mean(axis=1, keepdims=True)
    reg = anom @ (h - hbar) / (h.size - 1) / var
    return ens + reg[:, None] * dh[None, :]


def _observation_events(data: ObservationSet):
    times = data.all_times()
    events = []
    for t in times:
        idx, vals = [], []
        for d in range(data.dim):
            hit = np.nonzero(np.isclose(data.tau[d], t, rtol=0, atol=1e-9))[0]
            if hit.size:
                idx.append(d)
                vals.append(data.y[d][hit[0]])
        events.append((t, np.array(idx, dtype=int), np.array(vals)))
    return times, events


def _sigma_points(mean, cov, lam):
    n = mean.size
    try:
        L = linalg.cholesky((n + lam) * cov, lower=True)
    except linalg.LinAlgError:
        raise FilterError("UKF covariance is not positive definite") from None
    return np.column_stack([mean, mean[:, None] + L, mean[:, None] - L])


def run_filter(data: ObservationSet, model: OdeModel, init, cfg: FilterConfig) -> FilterResult:
    """Filter through every observation time starting from ``init = (mean, cov)``.

    The first analysis happens at the earliest observation time, which is
    taken as the time of ``init``.
    """
    D, P, Q = model.dim_x, model.dim_theta, model.dim_psi
    n = D + P + Q
    mean0, cov0 = init
    mean = np.array(mean0, dtype=float)
    cov = np.array(cov0, dtype=float)
    if mean.shape != (n,) or cov.shape != (n, n):
        raise ValueError(f"init must be a ({n},) mean and ({n},{n}) covariance")
    walk = np.zeros(P + Q) if cfg.param_walk_sd is None else np.broadcast_to(
        np.asarray(cfg.param_walk_sd, float), (P + Q,))
    proc = np.zeros(D) if cfg.state_process_sd is None else np.broadcast_to(
        np.asarray(cfg.state_process_sd, float), (D,))
    if cfg.obs_sd is None:
        raise ValueError("obs_sd is required")
    obs_var = np.broadcast_to(np.asarray(cfg.obs_sd, float), (D,)) ** 2
    qdiag = np.concatenate([proc, walk]) ** 2

    times, events = _observation_events(data)
    if times.size == 0:
        raise ValueError("no observations to filter")
    rng = np.random.default_rng(cfg.seed)
    ens = None
    if cfg.method in ("enkf", "eakf"):
        try:
            Lc = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            raise FilterError("initial covariance is not positive definite") from None
        ens = mean[:, None] + Lc @ rng.standard_normal((n, cfg.ensemble_size))

    alpha, beta, kappa = cfg.ukf_alpha, cfg.ukf_beta, cfg.ukf_kappa
    lam = alpha ** 2 * (n + kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1.0 - alpha ** 2 + beta)

    means = np.empty((n, times.size))
    sds = np.empty((n, times.size))
    with np.errstate(all="ignore"):
        for k, (t, idx, y) in enumerate(events):
            if k > 0:
                t0 = times[k - 1]
                if cfg.method == "ekf":
                    h = (t - t0) / cfg.substeps
                    Phi = np.eye(n)
                    x = mean.copy()
                    for j in range(cfg.substeps):
                        xn, J = rk4_step_tangent(model, x[:D], x[D:D + P], x[D + P:],
                                                 t0 + j * h, h)
                        step = np.eye(n)
                        step[:D] = J
                        Phi = step @ Phi
                        x = np.concatenate([xn, x[D:]])
                    mean = x
                    cov = cfg.inflation * (Phi @ cov @ Phi.T) + np.diag(qdiag)
                elif cfg.method == "ukf":
                    pts = _sigma_points(mean, cov, lam)
                    pts = _forecast_members(model, pts, t0, t, cfg.substeps)
                    mean = pts @ wm
                    dev = pts - mean[:, None]
                    cov = cfg.inflation * ((dev * wc) @ dev.T) + np.diag(qdiag)
                else:
                    ens = _forecast_members(model, ens, t0, t, cfg.substeps)
                    ens = ens + np.sqrt(qdiag)[:, None] * rng.standard_normal(ens.shape)
                    em = ens.mean(axis=1, keepdims=True)
                    ens = em + np.sqrt(cfg.inflation) * (ens - em)
                if ens is not None:
                    bad = ~np.all(np.isfinite(ens), axis=0)
                else:
                    bad = ~np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov))
                if np.any(bad):
                    raise FilterError(f"{cfg.method} forecast diverged before t={t:g}")

            if idx.size:
                r = obs_var[idx]
                if cfg.method in ("ekf", "ukf"):
                    mean, cov = _kalman_update(mean, cov, idx, y, r)
                elif cfg.method == "enkf":
                    Pf = np.cov(ens)
                    S = Pf[np.ix_(idx, idx)] + np.diag(r)
                    try:
                        gain = linalg.solve(S, Pf[idx, :], assume_a="pos").T
                    except linalg.LinAlgError:
                        raise FilterError("EnKF innovation covariance is singular") from None
                    pert = y[:, None] + np.sqrt(r)[:, None] * rng.standard_normal(
                        (idx.size, ens.shape[1]))
                    ens = ens + gain @ (pert - ens[idx])
                else:
                    for j, yj, rj in zip(idx, y, r):
                        ens = eakf_update_scalar(ens, j, yj, rj)

            if ens is not None:
                mean = ens.mean(axis=1)
                sd = ens.std(axis=1, ddof=1)
                if np.any(sd[idx] == 0) and idx.size:
                    warnings.warn("ensemble collapsed on an observed component", RuntimeWarning)
            else:
                sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            means[:, k] = mean
            sds[:, k] = sd
    if not np.all(np.isfinite(means)):
        raise FilterError(f"{cfg.method} produced non-finite estimates")
    return FilterResult(times=times, filtered_means=means, filtered_sds=sds,
                        psi_bar=means[D + P:].mean(axis=1), theta_path=means[D:D + P].copy(),
                        method=cfg.method)
