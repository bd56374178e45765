"""Five-stage fit: constant-theta start, point-wise estimate, theta kernel
calibration, MAP, and HMC intervals."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .gp_core import (DegenerateFitError, FitError, GpPriorSpec, ThetaHyperFit,
                      fit_theta_hyperparams, fit_x_hyperparams)
from .hmc import HmcConfig, PosteriorSamples, hmc_sample, summarize_intervals
from .matern import KernelConfig, build_gram
from .models import OdeModel
from .optimize import AdamConfig, adam_minimize
from .posterior import (CONSTANT, FULL, POINTWISE, InferenceState, ObservationSet, Posterior,
                        PosteriorContext, psi_from_raw, psi_to_raw)

__all__ = [
    "TvmagiConfig",
    "FitResult",
    "StageError",
    "build_grid",
    "stage1_constant_init",
    "stage2_pointwise",
    "stage3_theta_hyper",
    "stage4_map",
    "stage5_intervals",
    "run_tvmagi",
]

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


class StageError(RuntimeError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class TvmagiConfig:
    discretization_level: int = 2
    nu_x: float = 2.01
    nu_theta: float = 2.01
    theta_phi2_bounds: Optional[tuple] = None
    jitter: float = 1e-7
    sigma_rel_floor: float = 1e-3
    theta_init: Optional[tuple] = None
    psi_init: Optional[tuple] = None
    theta_scale: Optional[tuple] = None
    freeze_sigma_stage2: bool = False
    adam_stage1: AdamConfig = AdamConfig(lr=1e-2, max_iters=4000)
    adam_stage2: AdamConfig = AdamConfig(lr=1e-2, max_iters=4000)
    adam_stage4: AdamConfig = AdamConfig(lr=5e-3, max_iters=6000)
    hmc: HmcConfig = HmcConfig()
    skip_hmc: bool = False
    multistart: bool = True
    multistart_margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.discretization_level < 1:
            raise ValueError("discretization_level must be >= 1")
        if self.theta_phi2_bounds is not None:
            lo, hi = self.theta_phi2_bounds
            if not 0 < lo <= hi:
                raise ValueError("theta_phi2_bounds must satisfy 0 < lo <= hi")


@dataclass
class FitResult:
    grid: np.ndarray
    map_state: InferenceState
    theta_map: np.ndarray
    psi_map: np.ndarray
    sigma_map: np.ndarray
    posterior: dict = field(default_factory=dict)
    samples: Optional[PosteriorSamples] = None
    stage_diagnostics: dict = field(default_factory=dict)

    @property
    def x_map(self) -> np.ndarray:
        return self.map_state.x_grid

    def interval_arrays(self):
        """(mean, lower, upper) of theta on the grid and of psi, or None."""
        if self.samples is None:
            return None
        layout = self.map_state.layout
        out = []
        for vec in (self.samples.mean, self.samples.lower95, self.samples.upper95):
            x, th, ps, sg = layout.unpack(vec)
            out.append({"x": x, "theta": th,
                        "psi": psi_from_raw(self.map_state.context.model, ps),
                        "sigma": np.exp(sg)})
        return tuple(out)


def build_grid(data: ObservationSet, level: int) -> np.ndarray:
    """Union of observation times plus ``level - 1`` equispaced points per gap
    of the most densely observed component."""
    if level < 1:
        raise ValueError("level must be >= 1")
    times = data.all_times()
    if times.size < 2:
        raise ValueError("need at least two distinct observation times")
    dense = max(range(data.dim), key=lambda d: data.tau[d].size)
    tau = data.tau[dense]
    fill = [tau[i] + (tau[i + 1] - tau[i]) * k / level
            for i in range(tau.size - 1) for k in range(1, level)]
    grid = np.unique(np.concatenate([times, np.asarray(fill, dtype=float)]))
    # merge points closer than a rounding tolerance
    keep = np.concatenate([[True], np.diff(grid) > 1e-9 * max(1.0, abs(grid[-1]))])
    return grid[keep]


def _default_theta_bounds(data: ObservationSet) -> tuple:
    dense = max(range(data.dim), key=lambda d: data.tau[d].size)
    tau = data.tau[dense]
    times = data.all_times()
    return 0.5 * float(np.min(np.diff(tau))), 0.5 * float(times[-1] - times[0])


def _x_scales(data: ObservationSet, x_grid) -> np.ndarray:
    s = np.empty(len(data.y))
    for d, y in enumerate(data.y):
        s[d] = np.std(y) if y.size > 1 else np.std(x_grid[d])
    fallback = np.median(s[s > 0]) if np.any(s > 0) else 1.0
    return np.where(s > 0, s, fallback)


def _adam_scale(layout, x_scale, theta_mag, psi, pos):
    """Per-coordinate step scales in the packed layout."""
    th = np.maximum(np.abs(theta_mag), 1e-3)
    if not layout.theta_constant:
        th = np.repeat(th, layout.n)
    ps = np.where(pos, 1.0, np.maximum(np.abs(psi), 1e-3))
    return np.concatenate([np.repeat(x_scale, layout.n), th, ps, np.ones(layout.D)])


def _smoothed_x(ctx: PosteriorContext, sigma) -> np.ndarray:
    """GP-regression posterior mean of each component on the grid."""
    x = np.empty((ctx.model.dim_x, ctx.grid.size))
    for d, (g, p, idx, y) in enumerate(zip(ctx.x_grams, ctx.x_priors, ctx.obs_index, ctx.obs.y)):
        if idx.size == 0:
            x[d] = p.mean
            continue
        Koo = g.K[np.ix_(idx, idx)] + sigma[d] ** 2 * np.eye(idx.size)
        x[d] = p.mean + g.K[:, idx] @ np.linalg.solve(Koo, y - p.mean)
    return x


def _derivative_matching_theta(ctx: PosteriorContext, x, theta0, psi,
                               steps: int = 3, ridge: float = 1e-6,
                               prior: bool = False) -> np.ndarray:
    """Gauss-Newton fit of theta(I) to the conditional GP derivative of ``x``.

    Minimizes the derivative-matching quadratic form in theta with ``x`` and
    ``psi`` fixed.  With ``prior`` the theta GP prior around ``theta0`` is
    added; otherwise a ridge proportional to each coordinate's own curvature
    fixes directions the data leave undetermined.
    """
    model = ctx.model
    n, P = ctx.grid.size, model.dim_theta
    m = np.stack([p.mean_deriv + g.cond_op @ (xd - p.mean)
                  for g, p, xd in zip(ctx.x_grams, ctx.x_priors, x)])
    Cinv = np.stack([g.C_inv for g in ctx.x_grams])
    base = np.repeat(np.asarray(theta0, float)[:, None], n, axis=1)
    th = base.copy()
    for _ in range(steps):
        with np.errstate(all="ignore"):
            r = model.rhs(x, th, psi, ctx.grid) - m
            _, jth, _ = model.jac(x, th, psi, ctx.grid)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(jth))):
            return base
        # H[(p,t),(q,u)] = sum_d J[d,p,t] Cinv[d,t,u] J[d,q,u]
        H = np.einsum("dpt,dtu,dqu->ptqu", jth, Cinv, jth).reshape(P * n, P * n)
        grad = np.einsum("dpt,dtu,du->pt", jth, Cinv, r).ravel()
        dev = th - base
        if prior:
            reg = linalg.block_diag(*[g.K_inv for g in ctx.theta_grams])
            rhs = grad + reg @ dev.ravel()
        else:
            w = ridge * np.maximum(np.diag(H), 1e-300)
            reg = np.diag(w)
            rhs = grad + w * dev.ravel()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(H + reg, rhs, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            return base
        th = th - step.reshape(P, n)
    return th


def _pick_start(values: dict, margin: float) -> str:
    """First (default) start unless another ends lower by more than ``margin``."""
    names = list(values)
    best = min(names, key=values.get)
    return best if values[best] < values[names[0]] - margin else names[0]


def _stage1_x_priors(data, grid, cfg):
    priors, grams, hyper = [], [], []
    horizon = float(grid[-1] - grid[0])
    for d in range(data.dim):
        y, tau = data.y[d], data.tau[d]
        if y.size >= 4:
            phi1, phi2, sigma = fit_x_hyperparams(y, tau, cfg.nu_x, seed=cfg.seed + d)
            mean = float(np.mean(y))
        else:
            # too few points to fit: unit scale, quarter-horizon length scale
            phi1, phi2 = 1.0, 0.25 * horizon
            sigma = 0.1 if y.size else 1.0
            mean = float(np.mean(y)) if y.size else 0.0
        kcfg = KernelConfig(phi1, phi2, cfg.nu_x)
        priors.append(GpPriorSpec(mean, kcfg))
        grams.append(build_gram(kcfg, grid, cfg.jitter))
        hyper.append({"phi1": phi1, "phi2": phi2, "sigma": sigma, "mean": mean})
    return tuple(priors), tuple(grams), hyper


def _interp_init(data, grid, priors):
    x = np.empty((data.dim, grid.size))
    for d in range(data.dim):
        if data.y[d].size >= 2:
            x[d] = np.interp(grid, data.tau[d], data.y[d])
        elif data.y[d].size == 1:
            x[d] = data.y[d][0]
        else:
            x[d] = priors[d].mean
    return x


def stage1_constant_init(data: ObservationSet, model: OdeModel, cfg: TvmagiConfig,
                         grid=None) -> dict:
    """X hyperparameters, then the posterior with theta held constant in time.

    Returns a dict with ``mu_theta_hat``, ``psi0``, ``x0_grid``, ``sigma0``,
    ``x_hyper``, ``context`` and the optimizer trace.
    """
    grid = build_grid(data, cfg.discretization_level) if grid is None else np.asarray(grid)
    priors, grams, hyper = _stage1_x_priors(data, grid, cfg)
    ctx = PosteriorContext(model, grid, data, priors, grams)
    P, Q = model.dim_theta, model.dim_psi
    theta0 = np.ones(P) if cfg.theta_init is None else np.asarray(cfg.theta_init, float)
    psi0 = np.ones(Q) if cfg.psi_init is None else np.asarray(cfg.psi_init, float)
    if theta0.shape != (P,) or psi0.shape != (Q,):
        raise ValueError("theta_init/psi_init do not match the model dimensions")
    x0 = _interp_init(data, grid, priors)
    xs = _x_scales(data, x0)
    # noise levels stay at their smoothing estimates during this stage
    floor = np.maximum(SIGMA_FLOOR, cfg.sigma_rel_floor * xs)
    sig0 = np.log(np.maximum([h["sigma"] for h in hyper], floor))
    post = Posterior(ctx, CONSTANT)
    v0 = post.layout.pack(x0, theta0, psi_to_raw(model, psi0), sig0)
    pos = np.asarray(model.psi_positive, dtype=bool)
    scale = _adam_scale(post.layout, xs, theta0, psi0, pos)
    scale[post.layout.slices[3]] = 0.0
    res = adam_minimize(post, v0, cfg.adam_stage1, scale=scale)
    x, th, ps_raw, sg_raw = post.layout.unpack(res.x)
    theta_scale = np.abs(th)
    if cfg.theta_scale is not None:
        theta_scale = np.asarray(cfg.theta_scale, dtype=float)
    return {
        "mu_theta_hat": th.copy(),
        "theta_scale": theta_scale,
        "psi0": psi_from_raw(model, ps_raw),
        "x0_grid": x.copy(),
        "sigma0": np.exp(sg_raw),
        "x_hyper": hyper,
        "context": ctx,
        "x_scale": xs,
        "trace": res.trace,
        "iters": res.iters,
        "failed": res.failed,
    }


def stage2_pointwise(prev: dict, data: ObservationSet, model: OdeModel,
                     cfg: TvmagiConfig) -> dict:
    """Posterior without the theta prior, theta free on the grid.

    Starts from the stage-1 state and, with ``cfg.multistart``, also from
    interpolated observations; the lower end point is kept.
    """
    ctx = prev["context"]
    n = ctx.grid.size
    post = Posterior(ctx, POINTWISE)
    mu = np.asarray(prev["mu_theta_hat"], dtype=float)
    theta0 = np.repeat(mu[:, None], n, axis=1)
    ps_raw, sg_raw = psi_to_raw(model, prev["psi0"]), np.log(prev["sigma0"])
    pos = np.asarray(model.psi_positive, dtype=bool)
    scale = _adam_scale(post.layout, prev["x_scale"], prev["theta_scale"], prev["psi0"], pos)
    if cfg.freeze_sigma_stage2:
        scale[post.layout.slices[3]] = 0.0
    starts = [("stage1", prev["x0_grid"], theta0)]
    if cfg.multistart:
        starts.append(("interp", _interp_init(data, ctx.grid, ctx.x_priors), theta0))
        xs = _smoothed_x(ctx, prev["sigma0"])
        starts.append(("matching", xs, _derivative_matching_theta(
            ctx, xs, mu, prev["psi0"])))
    runs = {}
    for name, x0, th0 in starts:
        v0 = post.layout.pack(x0, th0, ps_raw, sg_raw)
        runs[name] = adam_minimize(post, v0, cfg.adam_stage2, scale=scale)
    best = _pick_start({k: r.value for k, r in runs.items()}, cfg.multistart_margin)
    res = runs[best]
    x, th, ps_raw, sg_raw = post.layout.unpack(res.x)
    return {
        "theta_tilde": th.copy(),
        "x_tilde": x.copy(),
        "psi_tilde": psi_from_raw(model, ps_raw),
        "sigma_tilde": np.exp(sg_raw),
        "start": best,
        "trace": res.trace,
        "traces": {k: r.trace for k, r in runs.items()},
        "iters": res.iters,
        "failed": res.failed,
    }


def stage3_theta_hyper(theta_tilde, grid, mu_theta_hat, cfg: TvmagiConfig,
                       bounds=None) -> list:
    """One kernel fit per time-varying parameter around the stage-1 constant."""
    theta_tilde = np.atleast_2d(np.asarray(theta_tilde, dtype=float))
    grid = np.asarray(grid, dtype=float)
    bounds = cfg.theta_phi2_bounds if bounds is None else bounds
    if bounds is None:
        raise ValueError("theta length-scale bounds are required")
    fits = []
    for p in range(theta_tilde.shape[0]):
        mu = float(mu_theta_hat[p])
        try:
            fit = fit_theta_hyperparams(theta_tilde[p], grid, mu, bounds, cfg.nu_theta,
                                        seed=cfg.seed + 100 + p)
        except DegenerateFitError:
            # flat point-wise path: pin theta near its constant with the longest length scale
            amp = 1e-3 * max(abs(mu), 1e-6)
            fit = ThetaHyperFit(amp, float(bounds[1]), 0.0, tuple(bounds))
            log.warning("theta %d: flat point-wise estimate, using a tight prior", p)
        fits.append(fit)
    return fits


def _theta_context(ctx: PosteriorContext, fits, mu_theta_hat, cfg) -> PosteriorContext:
    priors, grams = [], []
    for fit, mu in zip(fits, mu_theta_hat):
        kcfg = KernelConfig(fit.phi1, fit.phi2, cfg.nu_theta)
        priors.append(GpPriorSpec(float(mu), kcfg))
        grams.append(build_gram(kcfg, ctx.grid, cfg.jitter))
    return ctx.with_theta(priors, grams)


def stage4_map(prev: dict, data: ObservationSet, model: OdeModel, cfg: TvmagiConfig) -> dict:
    """Full posterior MAP from the stage-2 point, optionally restarted from
    interpolated observations; the better end point is kept."""
    ctx = prev["context"]
    post = Posterior(ctx, FULL)
    pos = np.asarray(model.psi_positive, dtype=bool)
    s2 = prev["stage2"]
    v0 = post.layout.pack(s2["x_tilde"], s2["theta_tilde"], psi_to_raw(model, s2["psi_tilde"]),
                          np.log(s2["sigma_tilde"]))
    scale = _adam_scale(post.layout, prev["x_scale"], prev["theta_scale"], s2["psi_tilde"], pos)
    runs = [("stage2", v0)]
    if cfg.multistart:
        x_alt = _interp_init(data, ctx.grid, ctx.x_priors)
        runs.append(("interp", post.layout.pack(x_alt, s2["theta_tilde"],
                                                psi_to_raw(model, s2["psi_tilde"]),
                                                np.log(s2["sigma_tilde"]))))
        th_m = _derivative_matching_theta(ctx, s2["x_tilde"], prev["mu_theta_hat"],
                                          s2["psi_tilde"], prior=True)
        runs.append(("matching", post.layout.pack(s2["x_tilde"], th_m,
                                                  psi_to_raw(model, s2["psi_tilde"]),
                                                  np.log(s2["sigma_tilde"]))))
    results = {}
    for name, v in runs:
        f0 = post.value(v)
        res = adam_minimize(post, v, cfg.adam_stage4, scale=scale)
        results[name] = (res, f0)
    best = _pick_start({k: r.value for k, (r, _) in results.items()}, cfg.multistart_margin)
    res, f0 = results[best]
    state = InferenceState.from_vector(ctx, res.x)
    return {
        "state": state,
        "objective": res.value,
        "initial_objective": f0,
        "start": best,
        "traces": {k: r.trace for k, (r, _) in results.items()},
        "iters": {k: r.iters for k, (r, _) in results.items()},
        "failed": res.failed,
    }


def stage5_intervals(map_state: InferenceState, data: ObservationSet, model: OdeModel,
                     cfg: TvmagiConfig):
    """HMC on the full posterior started at the MAP."""
    post = Posterior(map_state.context, FULL)
    samples = hmc_sample(post, map_state.pack(), cfg.hmc)
    labels = post.layout.labels(model, map_state.context.grid)
    return samples, summarize_intervals(samples, labels)


def run_tvmagi(data: ObservationSet, model: OdeModel, cfg: TvmagiConfig = TvmagiConfig()) -> FitResult:
    if data.dim != model.dim_x:
        raise ValueError("observation set does not match the model dimension")
    if all(t.size == 0 for t in data.tau):
        raise ValueError("no observations")
    diag = {}
    bounds = cfg.theta_phi2_bounds or _default_theta_bounds(data)
    t_start = time.perf_counter()

    def stage(k, fn, *args):
        t0 = time.perf_counter()
        try:
            out = fn(*args)
        except (FitError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            raise StageError(k, exc) from exc
        diag[f"stage{k}_seconds"] = time.perf_counter() - t0
        return out

    s1 = stage(1, stage1_constant_init, data, model, cfg)
    ctx = s1["context"]
    s2 = stage(2, stage2_pointwise, s1, data, model, cfg)
    if model.dim_theta:
        fits = stage(3, stage3_theta_hyper, s2["theta_tilde"], ctx.grid, s1["mu_theta_hat"],
                     cfg, bounds)
    else:
        fits = []
    ctx4 = _theta_context(ctx, fits, s1["mu_theta_hat"], cfg)
    prev = dict(s1, context=ctx4, stage2=s2)
    s4 = stage(4, stage4_map, prev, data, model, cfg)
    state = s4["state"]

    samples, summary = None, {}
    if not cfg.skip_hmc:
        samples, summary = stage(5, stage5_intervals, state, data, model, cfg)
    diag.update({
        "grid_size": int(ctx.grid.size),
        "x_hyper": s1["x_hyper"],
        "mu_theta_hat": s1["mu_theta_hat"],
        "psi0": s1["psi0"],
        "sigma0": s1["sigma0"],
        "stage1_trace": s1["trace"],
        "stage1_failed": s1["failed"],
        "theta_tilde": s2["theta_tilde"],
        "psi_tilde": s2["psi_tilde"],
        "stage2_trace": s2["trace"],
        "theta_hyper": [f.__dict__ for f in fits],
        "theta_phi2_bounds": tuple(bounds),
        "stage4_start": s4["start"],
        "stage4_traces": s4["traces"],
        "stage4_objective": s4["objective"],
        "stage4_initial_objective": s4["initial_objective"],
        "hmc_accept_rate": None if samples is None else samples.accept_rate,
        "seconds": time.perf_counter() - t_start,
    })
    return FitResult(grid=ctx.grid, map_state=state, theta_map=state.theta_grid,
                     psi_map=state.psi, sigma_map=state.sigma, posterior=summary,
                     samples=samples, stage_diagnostics=diag)


def with_overrides(cfg: TvmagiConfig, **kw) -> TvmagiConfig:
    return replace(cfg, **kw)
