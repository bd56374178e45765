"""Hamiltonian Monte Carlo with identity mass and an optional burn-in adaptation.

Without adaptation the step size is fixed for the whole run.  With
``adapt=True`` the burn-in phase tunes a global step size by dual averaging
toward ``target_accept`` and rescales each coordinate by its sample standard
deviation over two slow windows; everything is frozen before the retained
draws, so those come from a fixed, valid kernel.  Adapted runs draw each
trajectory's step uniformly within 20% of the tuned value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["HmcConfig", "PosteriorSamples", "DivergenceError", "leapfrog", "hmc_sample",
           "summarize_intervals"]


class DivergenceError(FloatingPointError):
    """Nearly every proposal produced a non-finite energy."""


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 1e-5
    leapfrog_steps: int = 100
    n_samples: int = 8000
    burn_in_ratio: float = 0.5
    seed: int = 0
    adapt: bool = False
    target_accept: float = 0.75

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.leapfrog_steps < 1 or self.n_samples < 1:
            raise ValueError("leapfrog_steps and n_samples must be >= 1")
        if not 0 <= self.burn_in_ratio < 1:
            raise ValueError("burn_in_ratio must lie in [0, 1)")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass
class PosteriorSamples:
    draws: np.ndarray
    accept_rate: float
    mean: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    n_diverged: int = 0
    step_size: float = float("nan")
    scale: Optional[np.ndarray] = None

    @classmethod
    def from_draws(cls, draws, accept_rate: float = float("nan"), n_diverged: int = 0, **kw):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
        return cls(draws, accept_rate, draws.mean(axis=0), lo, hi, n_diverged, **kw)


def leapfrog(grad_fn: Callable, q, p, step: float, n_steps: int, grad0=None):
    """Leapfrog with half momentum steps at both ends.

    Returns ``(q, p, U, grad)`` at the end point; ``U`` is None if the
    trajectory hit a non-finite energy or the potential raised an
    arithmetic error.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    g = grad_fn(q)[1] if grad0 is None else grad0
    p = p - 0.5 * step * g
    for i in range(n_steps):
        q = q + step * p
        try:
            u, g = grad_fn(q)
        except ArithmeticError:
            return q, p, None, None
        if not (np.isfinite(u) and np.all(np.isfinite(g))):
            return q, p, None, None
        if i < n_steps - 1:
            p = p - step * g
    p = p - 0.5 * step * g
    return q, p, u, g


class _DualAveraging:
    """Step-size adaptation on the log scale (shrinkage toward 10x the start)."""

    def __init__(self, eps: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.k = 0
        self.hbar = 0.0
        self.log_eps = self.log_eps_bar = np.log(eps)

    def update(self, accept_stat: float) -> float:
        self.k += 1
        w = 1.0 / (self.k + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.k) / self.gamma * self.hbar
        eta = self.k ** -self.kappa
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def final(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _scaled(potential: Callable, scale):
    def pot(z):
        u, g = potential(scale * z)
        return u, scale * g
    return pot


def _window_scale(window, floor: float = 1e-3):
    w = np.asarray(window)
    n = w.shape[0]
    var = w.var(axis=0, ddof=1) if n > 1 else np.zeros(w.shape[1])
    # shrink toward a small variance so near-constant coordinates keep moving
    var = (n / (n + 5.0)) * var + floor * (5.0 / (n + 5.0))
    return np.sqrt(var)


def hmc_sample(potential: Callable, init, cfg: HmcConfig = HmcConfig(),
               callback: Optional[Callable] = None) -> PosteriorSamples:
    """Draw ``cfg.n_samples`` states and keep those after the burn-in fraction.

    ``potential(q) -> (U, grad U)`` is the negative log density.  A
    trajectory that reaches a non-finite energy is rejected.
    """
    rng = np.random.default_rng(cfg.seed)
    q = np.array(init, dtype=float)
    if q.ndim != 1 or not np.all(np.isfinite(q)):
        raise ValueError("init must be a finite vector")
    u, g = potential(q)
    if not (np.isfinite(u) and np.all(np.isfinite(g))):
        raise ValueError("potential is not finite at init")
    n_burn = int(cfg.burn_in_ratio * cfg.n_samples)
    keep = np.empty((cfg.n_samples - n_burn, q.size))
    accepted = diverged = 0
    eps, L = cfg.step_size, cfg.leapfrog_steps

    adapt = cfg.adapt and n_burn >= 20
    scale = np.ones(q.size)
    pot = potential
    if adapt:
        da = _DualAveraging(eps, cfg.target_accept)
        slow = [(int(0.1 * n_burn), int(0.3 * n_burn)), (int(0.3 * n_burn), int(0.75 * n_burn))]
        window = []
    z, gz = q, g
    for it in range(cfg.n_samples):
        p0 = rng.standard_normal(q.size)
        log_u = np.log(rng.uniform())
        # a jittered step breaks near-periodic trajectories once eps*L is tuned
        step = eps * rng.uniform(0.8, 1.2) if adapt else eps
        z1, p1, u1, g1 = leapfrog(pot, z, p0, step, L, gz)
        accept_stat = 0.0
        if u1 is None:
            diverged += 1
        else:
            log_ratio = u - u1 + 0.5 * (p0 @ p0 - p1 @ p1)
            if np.isfinite(log_ratio):
                accept_stat = float(np.exp(min(0.0, log_ratio)))
                if log_u < log_ratio:
                    z, u, gz = z1, u1, g1
                    accepted += 1
        q = scale * z if adapt else z
        if adapt and it < n_burn:
            eps = da.update(accept_stat)
            for start, end in slow:
                if start <= it < end:
                    window.append(q.copy())
                if it == end - 1 and len(window) > 1:
                    scale = _window_scale(window)
                    window = []
                    pot = _scaled(potential, scale)
                    z = q / scale
                    u, gz = pot(z)
                    da = _DualAveraging(eps, cfg.target_accept)
            if it == n_burn - 1:
                eps = da.final
        if it >= n_burn:
            keep[it - n_burn] = q
        if callback is not None:
            callback(it, q)
    if diverged > 0.99 * cfg.n_samples:
        raise DivergenceError(f"{diverged} of {cfg.n_samples} trajectories diverged")
    return PosteriorSamples.from_draws(keep, accepted / cfg.n_samples, diverged, step_size=eps,
                                       scale=scale if adapt else None)


def summarize_intervals(samples: PosteriorSamples, labels) -> dict:
    """Map flat columns back to named quantities.

    ``labels`` holds one key per column (e.g. from ``StateLayout.labels``);
    the result maps each key to ``(mean, lower95, upper95)``.
    """
    draws = np.atleast_2d(samples.draws)
    labels = list(labels)
    if draws.shape[1] != len(labels):
        raise ValueError(f"{len(labels)} labels for {draws.shape[1]} sample columns")
    if draws.shape[0] < 100:
        raise ValueError("need at least 100 retained draws")
    mean = draws.mean(axis=0)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    return {k: (float(m), float(a), float(b)) for k, m, a, b in zip(labels, mean, lo, hi)}
