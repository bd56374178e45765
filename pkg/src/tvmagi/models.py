"""ODE systems with time-varying and time-constant parameters.

Every right-hand side is vectorized over trailing axes: ``x`` has shape
``(D, ...)``, ``theta`` ``(P, ...)``, ``psi`` ``(Q,)`` or ``(Q, ...)`` and
``t`` broadcasts against the trailing shape.  Jacobians come back as
``(D, D, ...)``, ``(D, P, ...)`` and ``(D, Q, ...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "OdeModel",
    "TrueParamSpec",
    "NonFiniteError",
    "eval_f",
    "eval_jacobians",
    "log_transform",
    "builtin_truth",
    "seird_model",
    "lv_model",
    "hiv_model",
    "hiv_reduced_model",
    "BUILTIN_MODELS",
]


class NonFiniteError(FloatingPointError):
    """Model evaluation produced NaN or Inf."""


@dataclass(frozen=True)
class OdeModel:
    name: str
    component_names: tuple[str, ...]
    theta_names: tuple[str, ...]
    psi_names: tuple[str, ...]
    rhs: Callable = field(repr=False)
    jac: Callable = field(repr=False)
    psi_positive: tuple[bool, ...] = ()
    exogenous: Optional[Callable] = field(default=None, repr=False)
    log_scale: bool = False
    base: Optional["OdeModel"] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim_x < 1:
            raise ValueError("model needs at least one component")
        if self.dim_theta + self.dim_psi < 1:
            raise ValueError("model needs at least one parameter")
        if not self.psi_positive:
            object.__setattr__(self, "psi_positive", (False,) * self.dim_psi)
        if len(self.psi_positive) != self.dim_psi:
            raise ValueError("psi_positive length does not match psi_names")

    @property
    def dim_x(self) -> int:
        return len(self.component_names)

    @property
    def dim_theta(self) -> int:
        return len(self.theta_names)

    @property
    def dim_psi(self) -> int:
        return len(self.psi_names)


@dataclass(frozen=True)
class TrueParamSpec:
    """Ground truth used to simulate a dataset."""

    theta_funcs: tuple[Callable, ...]
    psi: np.ndarray
    x0: np.ndarray
    horizon: float
    noise_sigma: np.ndarray
    obs_schedule: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if np.any(np.asarray(self.noise_sigma) < 0):
            raise ValueError("noise levels must be nonnegative")

    def theta_at(self, t):
        t = np.asarray(t, dtype=float)
        if not self.theta_funcs:
            return np.zeros((0,) + t.shape)
        return np.stack([np.broadcast_to(np.asarray(f(t), dtype=float), t.shape)
                         for f in self.theta_funcs])


def _check(model: OdeModel, x, theta, psi):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if x.shape[:1] != (model.dim_x,):
        raise ValueError(f"{model.name}: x must have leading dim {model.dim_x}, got {x.shape}")
    if theta.shape[:1] != (model.dim_theta,):
        raise ValueError(f"{model.name}: theta must have leading dim {model.dim_theta}")
    if psi.shape[:1] != (model.dim_psi,):
        raise ValueError(f"{model.name}: psi must have leading dim {model.dim_psi}")
    return x, theta, psi


def eval_f(model: OdeModel, x, theta, psi, t=0.0) -> np.ndarray:
    x, theta, psi = _check(model, x, theta, psi)
    out = model.rhs(x, theta, psi, np.asarray(t, dtype=float))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{model.name}: non-finite derivative")
    return out


def eval_jacobians(model: OdeModel, x, theta, psi, t=0.0):
    """Analytic Jacobians (df/dx, df/dtheta, df/dpsi)."""
    x, theta, psi = _check(model, x, theta, psi)
    jx, jth, jps = model.jac(x, theta, psi, np.asarray(t, dtype=float))
    for j in (jx, jth, jps):
        if not np.all(np.isfinite(j)):
            raise NonFiniteError(f"{model.name}: non-finite Jacobian")
    return jx, jth, jps


def log_transform(model: OdeModel) -> OdeModel:
    """Same system in log coordinates: d(log x_d)/dt = f_d(exp(x)) / x_d."""
    if model.log_scale:
        raise ValueError(f"{model.name} is already log-transformed")

    def rhs(xl, theta, psi, t):
        x = np.exp(xl)
        return model.rhs(x, theta, psi, t) / x

    def jac(xl, theta, psi, t):
        x = np.exp(xl)
        f = model.rhs(x, theta, psi, t)
        jx, jth, jps = model.jac(x, theta, psi, t)
        inv = 1.0 / x
        D = x.shape[0]
        jx_l = jx * x[None, :] * inv[:, None]
        idx = np.arange(D)
        jx_l[idx, idx] -= f * inv
        return jx_l, jth * inv[:, None], jps * inv[:, None]

    return replace(model, name=f"log-{model.name}", rhs=rhs, jac=jac, log_scale=True, base=model)


# --- SEIRD --------------------------------------------------------------------

def seird_model(population: float = 100200.0) -> OdeModel:
    """SEIRD with time-varying (beta, ve, pd) and constant vi."""
    N = float(population)

    def rhs(x, th, ps, t):
        S, E, I, D = x
        beta, ve, pd = th
        vi = ps[0]
        inf = beta * I * S / N
        return np.stack([-inf, inf - ve * E, ve * E - vi * I, vi * I * pd])

    def jac(x, th, ps, t):
        S, E, I, D = x
        beta, ve, pd = th
        vi = ps[0]
        z = np.zeros(np.broadcast(S, beta, vi).shape)
        vi = vi + z
        jx = np.stack([
            np.stack([-beta * I / N, z, -beta * S / N, z]),
            np.stack([beta * I / N, -ve + z, beta * S / N, z]),
            np.stack([z, ve + z, -vi, z]),
            np.stack([z, z, vi * pd, z]),
        ])
        jth = np.stack([
            np.stack([-I * S / N, z, z]),
            np.stack([I * S / N, -E + z, z]),
            np.stack([z, E + z, z]),
            np.stack([z, z, vi * I]),
        ])
        jps = np.stack([z[None], z[None], (-I + z)[None], (I * pd + z)[None]])
        return jx, jth, jps

    return OdeModel("seird", ("S", "E", "I", "D"), ("beta", "ve", "pd"), ("vi",),
                    rhs, jac, psi_positive=(True,))


# --- Lotka-Volterra -----------------------------------------------------------

def lv_model() -> OdeModel:
    """Predator-prey with time-varying (alpha, gamma), constant (beta, delta)."""

    def rhs(x, th, ps, t):
        u, v = x
        alpha, gamma = th
        beta, delta = ps[0], ps[1]
        return np.stack([alpha * u - beta * u * v, delta * u * v - gamma * v])

    def jac(x, th, ps, t):
        u, v = x
        alpha, gamma = th
        beta, delta = ps[0], ps[1]
        z = np.zeros(np.broadcast(u, alpha, beta).shape)
        jx = np.stack([
            np.stack([alpha - beta * v + z, -beta * u + z]),
            np.stack([delta * v + z, delta * u - gamma + z]),
        ])
        jth = np.stack([np.stack([u + z, z]), np.stack([z, -v + z])])
        jps = np.stack([np.stack([-u * v + z, z]), np.stack([z, u * v + z])])
        return jx, jth, jps

    return OdeModel("lv", ("prey", "predator"), ("alpha", "gamma"), ("beta", "delta"),
                    rhs, jac, psi_positive=(True, True))


# --- HIV ----------------------------------------------------------------------

def hiv_model() -> OdeModel:
    """Three-state HIV dynamics driven by time-varying drug efficacy r(t)."""

    def rhs(x, th, ps, t):
        T, Ts, X = x
        r = th[0]
        lam, rho, k, dl, N, c = (ps[i] for i in range(6))
        infect = k * (1.0 - r) * T * X
        return np.stack([lam - rho * T - infect, infect - dl * Ts, N * dl * Ts - c * X])

    def jac(x, th, ps, t):
        T, Ts, X = x
        r = th[0]
        lam, rho, k, dl, N, c = (ps[i] for i in range(6))
        z = np.zeros(np.broadcast(T, r, lam).shape)
        kr = k * (1.0 - r)
        jx = np.stack([
            np.stack([-rho - kr * X, z, -kr * T + z]),
            np.stack([kr * X + z, -dl + z, kr * T + z]),
            np.stack([z, N * dl + z, -c + z]),
        ])
        jth = np.stack([(k * T * X + z)[None], (-k * T * X + z)[None], z[None]])
        one = np.ones_like(z)
        jps = np.stack([
            np.stack([one, -T + z, -(1 - r) * T * X + z, z, z, z]),
            np.stack([z, z, (1 - r) * T * X + z, -Ts + z, z, z]),
            np.stack([z, z, z, N * Ts + z, dl * Ts + z, -X + z]),
        ])
        return jx, jth, jps

    return OdeModel("hiv", ("T", "Tstar", "X"), ("r",),
                    ("lambda", "rho", "k", "delta", "N", "c"), rhs, jac,
                    psi_positive=(True,) * 6)


def hiv_reduced_model(t_cells: Callable, clearance: float = 3.5) -> OdeModel:
    """Viral load dX/dt = a1(t) + a2(t) T(t) - c X with T(t) a known covariate."""
    c = float(clearance)

    def rhs(x, th, ps, t):
        a1, a2 = th
        return (a1 + a2 * t_cells(t) - c * x[0])[None]

    def jac(x, th, ps, t):
        a1, a2 = th
        z = np.zeros(np.broadcast(x[0], a1, t).shape)
        Tt = t_cells(t) + z
        jx = (z - c)[None, None]
        jth = np.stack([np.ones_like(z), Tt])[None]
        jps = np.zeros((1, 0) + z.shape)
        return jx, jth, jps

    return OdeModel("hiv-reduced", ("X",), ("a1", "a2"), (), rhs, jac, exogenous=t_cells)


# --- ground truth settings ------------------------------------------------------

def _seird_truth():
    w = math.pi / 8.0
    schedule = (
        np.arange(0.0, 33.0),        # S daily
        np.arange(0.0, 33.0, 2.0),   # E every other day
        np.arange(0.0, 33.0),        # I daily
        np.arange(0.0, 33.0),        # D daily
    )
    x0 = np.array([100000.0, 100.0, 50.0, 50.0])
    truth = TrueParamSpec(
        theta_funcs=(lambda t: 1.8 - np.cos(w * t),
                     lambda t: 0.1 - 0.02 * np.cos(w * t),
                     lambda t: 0.05 + 0.025 * np.cos(w * t)),
        psi=np.array([0.1]),
        x0=x0,
        horizon=32.0,
        noise_sigma=np.full(4, 0.03),
        obs_schedule=schedule,
    )
    return seird_model(population=float(x0.sum())), truth


def _lv_truth():
    w = math.pi / 5.0
    months = np.arange(0, 241) / 12.0
    truth = TrueParamSpec(
        theta_funcs=(lambda t: 0.6 + 0.3 * np.cos(w * t),
                     lambda t: 1.0 + 0.1 * np.sin(w * t)),
        psi=np.array([0.75, 1.0]),
        x0=np.array([3.0, 1.0]),
        horizon=20.0,
        noise_sigma=np.full(2, 0.03),
        obs_schedule=(months, months.copy()),
    )
    return lv_model(), truth


def _hiv_truth():
    days = np.arange(0.0, 101.0)
    truth = TrueParamSpec(
        theta_funcs=(lambda t: np.cos(math.pi * t / 500.0),),
        psi=np.array([36.0, 0.108, 5e-4, 0.1, 1000.0, 3.5]),
        x0=np.array([350.0, 20.0, 1000.0]),
        horizon=100.0,
        # T is measured without error; T* is never observed
        noise_sigma=np.array([0.0, 0.0, 0.05]),
        obs_schedule=(days, np.array([]), days.copy()),
    )
    return hiv_model(), truth


BUILTIN_MODELS = {"seird": _seird_truth, "lv": _lv_truth, "hiv": _hiv_truth}


def builtin_truth(name: str):
    """Model and ground-truth settings of a built-in case study."""
    try:
        factory = BUILTIN_MODELS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory()


def finite_difference_jacobians(model: OdeModel, x, theta, psi, t=0.0, h: float = 1e-6):
    """Central-difference Jacobians of ``eval_f`` at a single point (test helper)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    out = []
    for which, arr in enumerate((x, theta, psi)):
        cols = []
        for i in range(arr.shape[0]):
            step = h * max(1.0, abs(arr[i]))
            args = [x, theta, psi]
            hi, lo = arr.copy(), arr.copy()
            hi[i] += step
            lo[i] -= step
            args[which] = hi
            fp = eval_f(model, *args, t)
            args[which] = lo
            fm = eval_f(model, *args, t)
            cols.append((fp - fm) / (2 * step))
        out.append(np.stack(cols, axis=1) if cols else np.zeros((x.shape[0], 0)))
    return tuple(out)

