"""Discretized negative log-posterior over (x(I), theta(I), psi, sigma).

The objective has four Gaussian parts: the theta GP prior, the X GP prior,
the observation likelihood and the derivative-matching term, which scores
the ODE right-hand side on the grid under the conditional GP law of the
derivative given the state values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .gp_core import GpPriorSpec
from .matern import GramBundle
from .models import NonFiniteError, OdeModel

__all__ = [
    "ObservationSet",
    "StateLayout",
    "PosteriorContext",
    "InferenceState",
    "PosteriorBreakdown",
    "StateGradient",
    "Posterior",
    "neg_log_posterior",
    "neg_log_posterior_grad",
    "pointwise_neg_log_posterior",
    "grid_indices",
]

_LOG2PI = math.log(2.0 * math.pi)

FULL, POINTWISE, CONSTANT = "full", "pointwise", "constant"
_MODES = (FULL, POINTWISE, CONSTANT)


@dataclass(frozen=True)
class ObservationSet:
    """Per-component observation times and values; empty components allowed."""

    tau: tuple
    y: tuple

    def __post_init__(self):
        if len(self.tau) != len(self.y):
            raise ValueError("tau and y must have one entry per component")
        tau = tuple(np.asarray(t, dtype=float).ravel() for t in self.tau)
        y = tuple(np.asarray(v, dtype=float).ravel() for v in self.y)
        for d, (t, v) in enumerate(zip(tau, y)):
            if t.shape != v.shape:
                raise ValueError(f"component {d}: {t.size} times but {v.size} values")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise ValueError(f"component {d}: observation times must be strictly increasing")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"component {d}: non-finite observation")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return len(self.tau)

    @property
    def counts(self) -> tuple:
        return tuple(t.size for t in self.tau)

    def all_times(self) -> np.ndarray:
        parts = [t for t in self.tau if t.size]
        if not parts:
            return np.zeros(0)
        return np.unique(np.concatenate(parts))

    def transformed(self, fn) -> "ObservationSet":
        return ObservationSet(self.tau, tuple(fn(v) for v in self.y))


def grid_indices(grid, times, tol: float = 1e-8) -> np.ndarray:
    """Positions of ``times`` in ``grid``; every time must be a grid point."""
    grid = np.asarray(grid, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.zeros(0, dtype=int)
    idx = np.clip(np.searchsorted(grid, times - tol), 0, grid.size - 1)
    bad = np.abs(grid[idx] - times) > tol * max(1.0, float(np.max(np.abs(grid))))
    if np.any(bad):
        raise ValueError(f"observation time {times[bad][0]:g} is not on the grid")
    return idx


@dataclass(frozen=True)
class StateLayout:
    """Flat packing order: x (D x n), theta (P x n or P), psi (Q), log sigma (D)."""

    D: int
    P: int
    Q: int
    n: int
    theta_constant: bool = False

    @property
    def theta_size(self) -> int:
        return self.P if self.theta_constant else self.P * self.n

    @property
    def size(self) -> int:
        return self.D * self.n + self.theta_size + self.Q + self.D

    @property
    def slices(self):
        a = self.D * self.n
        b = a + self.theta_size
        c = b + self.Q
        return slice(0, a), slice(a, b), slice(b, c), slice(c, c + self.D)

    def pack(self, x_grid, theta, psi_raw, sigma_raw) -> np.ndarray:
        x_grid = np.asarray(x_grid, dtype=float)
        theta = np.asarray(theta, dtype=float)
        shape = (self.P,) if self.theta_constant else (self.P, self.n)
        if x_grid.shape != (self.D, self.n) or theta.shape != shape:
            raise ValueError(f"layout mismatch: x{x_grid.shape}, theta{theta.shape}")
        psi_raw = np.asarray(psi_raw, dtype=float).ravel()
        sigma_raw = np.asarray(sigma_raw, dtype=float).ravel()
        if psi_raw.size != self.Q or sigma_raw.size != self.D:
            raise ValueError("layout mismatch in psi or sigma")
        return np.concatenate([x_grid.ravel(), theta.ravel(), psi_raw, sigma_raw])

    def unpack(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.size,):
            raise ValueError(f"vector of length {v.shape} does not match layout size {self.size}")
        sx, sth, sps, ssg = self.slices
        theta = v[sth] if self.theta_constant else v[sth].reshape(self.P, self.n)
        return v[sx].reshape(self.D, self.n), theta, v[sps], v[ssg]

    def labels(self, model: Optional[OdeModel] = None, grid=None) -> list:
        """One (kind, name, time) key per flat coordinate."""
        xn = model.component_names if model else tuple(f"x{d}" for d in range(self.D))
        tn = model.theta_names if model else tuple(f"theta{p}" for p in range(self.P))
        pn = model.psi_names if model else tuple(f"psi{q}" for q in range(self.Q))
        times = np.arange(self.n, dtype=float) if grid is None else np.asarray(grid, float)
        out = [("x", xn[d], float(times[i])) for d in range(self.D) for i in range(self.n)]
        if self.theta_constant:
            out += [("theta", tn[p], None) for p in range(self.P)]
        else:
            out += [("theta", tn[p], float(times[i])) for p in range(self.P) for i in range(self.n)]
        out += [("psi", pn[q], None) for q in range(self.Q)]
        out += [("sigma", xn[d], None) for d in range(self.D)]
        return out


@dataclass(frozen=True)
class PosteriorContext:
    """Fixed ingredients of the posterior: data, grid, priors and Gram bundles.

    ``theta_priors``/``theta_grams`` may be omitted when only the point-wise
    or constant-theta objectives are used.
    """

    model: OdeModel
    grid: np.ndarray
    obs: ObservationSet
    x_priors: tuple
    x_grams: tuple
    theta_priors: Optional[tuple] = None
    theta_grams: Optional[tuple] = None
    obs_index: tuple = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        m = self.model
        if self.obs.dim != m.dim_x:
            raise ValueError("observation set does not match model dimension")
        if len(self.x_priors) != m.dim_x or len(self.x_grams) != m.dim_x:
            raise ValueError("need one X prior and Gram bundle per component")
        for g in self.x_grams:
            if g.size != grid.size:
                raise ValueError("X Gram bundle grid size differs from the grid")
        if self.theta_grams is not None:
            if len(self.theta_grams) != m.dim_theta or len(self.theta_priors or ()) != m.dim_theta:
                raise ValueError("need one theta prior and Gram bundle per parameter")
        object.__setattr__(self, "obs_index", tuple(grid_indices(grid, t) for t in self.obs.tau))

    def layout(self, theta_constant: bool = False) -> StateLayout:
        m = self.model
        return StateLayout(m.dim_x, m.dim_theta, m.dim_psi, self.grid.size, theta_constant)

    def with_theta(self, priors: Sequence[GpPriorSpec], grams: Sequence[GramBundle]):
        return PosteriorContext(self.model, self.grid, self.obs, self.x_priors, self.x_grams,
                                tuple(priors), tuple(grams))


class PosteriorBreakdown(NamedTuple):
    part1_theta_prior: float
    part2_x_prior: float
    part3_obs: float
    part4_manifold: float
    total: float


class StateGradient(NamedTuple):
    x_grid: np.ndarray
    theta_grid: np.ndarray
    psi_raw: np.ndarray
    sigma_raw: np.ndarray


@dataclass
class InferenceState:
    """Free variables on the grid; psi is on the log scale where flagged positive."""

    x_grid: np.ndarray
    theta_grid: np.ndarray
    psi_raw: np.ndarray
    sigma_raw: np.ndarray
    context: PosteriorContext = field(repr=False)

    @property
    def psi(self) -> np.ndarray:
        return psi_from_raw(self.context.model, self.psi_raw)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.sigma_raw)

    @property
    def layout(self) -> StateLayout:
        return self.context.layout(np.ndim(self.theta_grid) == 1)

    def pack(self) -> np.ndarray:
        return self.layout.pack(self.x_grid, self.theta_grid, self.psi_raw, self.sigma_raw)

    @classmethod
    def from_vector(cls, context: PosteriorContext, v, theta_constant: bool = False):
        x, th, ps, sg = context.layout(theta_constant).unpack(v)
        return cls(x.copy(), np.array(th), ps.copy(), sg.copy(), context)


def psi_from_raw(model: OdeModel, raw):
    pos = np.asarray(model.psi_positive, dtype=bool)
    raw = np.asarray(raw, dtype=float)
    return np.where(pos, np.exp(np.where(pos, raw, 0.0)), raw)


def psi_to_raw(model: OdeModel, psi):
    pos = np.asarray(model.psi_positive, dtype=bool)
    psi = np.asarray(psi, dtype=float)
    if np.any(psi[pos] <= 0):
        raise ValueError("positive-constrained psi must be > 0")
    return np.where(pos, np.log(np.where(pos, psi, 1.0)), psi)


class Posterior:
    """Vectorized evaluator of the objective and its gradient on flat vectors.

    ``mode`` selects the objective: ``"full"`` (all four parts),
    ``"pointwise"`` (no theta prior) or ``"constant"`` (no theta prior and
    theta a single vector broadcast over the grid).
    """

    def __init__(self, context: PosteriorContext, mode: str = FULL):
        if mode not in _MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == FULL and context.theta_grams is None:
            raise ValueError("full posterior needs theta Gram bundles")
        self.context = context
        self.mode = mode
        self.model = context.model
        self.layout = context.layout(mode == CONSTANT)
        self.grid = context.grid
        n = self.grid.size
        xg = context.x_grams
        self.mu_x = np.array([p.mean for p in context.x_priors])[:, None]
        self.mu_xdot = np.array([p.mean_deriv for p in context.x_priors])[:, None]
        self.Kx_inv = np.stack([g.K_inv for g in xg])
        self.cond = np.stack([g.cond_op for g in xg])
        self.C_inv = np.stack([g.C_inv for g in xg])
        self.const_x = 0.5 * sum(n * _LOG2PI + g.logdet_K for g in xg)
        self.const_c = 0.5 * sum(n * _LOG2PI + g.logdet_C for g in xg)
        if mode == FULL:
            tg = context.theta_grams
            self.mu_th = np.array([p.mean for p in context.theta_priors])[:, None]
            self.Kth_inv = np.stack([g.K_inv for g in tg])
            self.const_th = 0.5 * sum(n * _LOG2PI + g.logdet_K for g in tg)
        self.obs = [(d, idx, y) for d, (idx, y) in enumerate(zip(context.obs_index, context.obs.y))
                    if idx.size]
        self.pos = np.asarray(self.model.psi_positive, dtype=bool)

    def _parts(self, v, want_grad: bool):
        D = self.layout.D
        x, th, ps_raw, sg_raw = self.layout.unpack(v)
        th_grid = np.broadcast_to(th[:, None], (th.shape[0], self.grid.size)) \
            if self.mode == CONSTANT else th
        psi = np.where(self.pos, np.exp(np.where(self.pos, ps_raw, 0.0)), ps_raw)

        part1 = 0.0
        if self.mode == FULL:
            rt = th - self.mu_th
            at = np.einsum("pij,pj->pi", self.Kth_inv, rt)
            part1 = self.const_th + 0.5 * float(np.sum(rt * at))

        rx = x - self.mu_x
        bx = np.einsum("dij,dj->di", self.Kx_inv, rx)
        part2 = self.const_x + 0.5 * float(np.sum(rx * bx))

        part3 = 0.0
        gx = bx.copy() if want_grad else None
        gs = np.zeros(D)
        for d, idx, y in self.obs:
            sig2 = math.exp(2.0 * sg_raw[d])
            e = x[d, idx] - y
            ss = float(e @ e)
            part3 += 0.5 * (idx.size * (_LOG2PI + 2.0 * sg_raw[d]) + ss / sig2)
            if want_grad:
                gx[d, idx] += e / sig2
                gs[d] = idx.size - ss / sig2

        f = self.model.rhs(x, th_grid, psi, self.grid)
        r = f - self.mu_xdot - np.einsum("dij,dj->di", self.cond, rx)
        g = np.einsum("dij,dj->di", self.C_inv, r)
        part4 = self.const_c + 0.5 * float(np.sum(r * g))
        parts = (part1, part2, part3, part4)
        if not want_grad:
            return parts, None

        jx, jth, jps = self.model.jac(x, th_grid, psi, self.grid)
        gx += np.einsum("dn,den->en", g, jx) - np.einsum("dji,dj->di", self.cond, g)
        gth = np.einsum("dn,dpn->pn", g, jth)
        if self.mode == FULL:
            gth = gth + at
        elif self.mode == CONSTANT:
            gth = gth.sum(axis=1)
        gps = np.einsum("dn,dqn->q", g, jps)
        gps = np.where(self.pos, gps * psi, gps)
        grad = np.concatenate([gx.ravel(), gth.ravel(), gps, gs])
        return parts, grad

    def value_and_grad(self, v):
        with np.errstate(all="ignore"):
            parts, grad = self._parts(v, True)
        return float(sum(parts)), grad

    __call__ = value_and_grad

    def value(self, v) -> float:
        with np.errstate(all="ignore"):
            parts, _ = self._parts(v, False)
        return float(sum(parts))

    def breakdown(self, v) -> PosteriorBreakdown:
        with np.errstate(all="ignore"):
            parts, _ = self._parts(v, False)
        return PosteriorBreakdown(*parts, float(sum(parts)))


_PART_NAMES = ("theta prior", "X prior", "observation", "derivative-matching")


def _state_mode(state: InferenceState, full: bool) -> str:
    if np.ndim(state.theta_grid) == 1:
        return CONSTANT
    return FULL if full else POINTWISE


def neg_log_posterior(state: InferenceState, model: OdeModel) -> PosteriorBreakdown:
    """Four-part breakdown of the negative log-posterior at ``state``."""
    if model is not state.context.model:
        raise ValueError("state context was built for a different model")
    post = Posterior(state.context, _state_mode(state, True))
    out = post.breakdown(state.pack())
    for name, val in zip(_PART_NAMES, out[:4]):
        if not np.isfinite(val):
            raise NonFiniteError(f"{name} part of the posterior is not finite")
    return out


def _split_grad(layout: StateLayout, grad) -> StateGradient:
    x, th, ps, sg = layout.unpack(grad)
    return StateGradient(x, th, ps, sg)


def neg_log_posterior_grad(state: InferenceState, model: OdeModel) -> StateGradient:
    if model is not state.context.model:
        raise ValueError("state context was built for a different model")
    post = Posterior(state.context, _state_mode(state, True))
    val, grad = post.value_and_grad(state.pack())
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        raise NonFiniteError("posterior gradient is not finite")
    return _split_grad(post.layout, grad)


def pointwise_neg_log_posterior(state: InferenceState, model: OdeModel):
    """Objective without the theta prior; returns ``(value, StateGradient)``."""
    if model is not state.context.model:
        raise ValueError("state context was built for a different model")
    post = Posterior(state.context, _state_mode(state, False))
    val, grad = post.value_and_grad(state.pack())
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        raise NonFiniteError("point-wise objective is not finite")
    return val, _split_grad(post.layout, grad)
