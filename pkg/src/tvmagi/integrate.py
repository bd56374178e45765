"""Fixed-step RK4 integration and the Runge-Kutta least-squares benchmark."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .models import OdeModel
from .optimize import AdamConfig, adam_minimize

__all__ = [
    "IntegrationError",
    "rk4_solve",
    "rk4_step",
    "rk4_step_tangent",
    "interp_theta",
    "RkEstimate",
    "rk_least_squares",
]


class IntegrationError(FloatingPointError):
    """The integrated state became non-finite."""

    def __init__(self, message: str, partial: Optional[np.ndarray] = None):
        super().__init__(message)
        self.partial = partial


def rk4_step(model: OdeModel, x, t: float, h: float, theta_fn: Callable, psi):
    """One classic RK4 step; ``theta_fn`` is evaluated at the stage times."""
    f = model.rhs
    th_a, th_m, th_b = theta_fn(t), theta_fn(t + 0.5 * h), theta_fn(t + h)
    k1 = f(x, th_a, psi, t)
    k2 = f(x + 0.5 * h * k1, th_m, psi, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, th_m, psi, t + 0.5 * h)
    k4 = f(x + h * k3, th_b, psi, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_solve(model: OdeModel, x0, theta_fn: Callable, psi, grid, substeps: int = 10):
    """Integrate from ``x0`` at ``grid[0]``; returns states at every grid time.

    The state may carry trailing batch axes (e.g. an ensemble); the result
    then has shape ``(D, len(grid), ...)``.
    """
    grid = np.asarray(grid, dtype=float)
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be increasing")
    x = np.array(x0, dtype=float)
    psi = np.asarray(psi, dtype=float)
    out = np.empty((x.shape[0], grid.size) + x.shape[1:])
    out[:, 0] = x
    for i in range(grid.size - 1):
        t0 = grid[i]
        h = (grid[i + 1] - t0) / substeps
        for j in range(substeps):
            x = rk4_step(model, x, t0 + j * h, h, theta_fn, psi)
        if not np.all(np.isfinite(x)):
            out[:, i + 1:] = np.nan
            raise IntegrationError(f"non-finite state at t={grid[i + 1]:g}", out)
        out[:, i + 1] = x
    return out


def rk4_step_tangent(model: OdeModel, x, theta, psi, t: float, h: float):
    """RK4 step for the augmented state (x, theta, psi) held piecewise constant.

    Returns the new ``x`` and the step Jacobian d(x_new)/d(x, theta, psi),
    of shape ``(D, D + P + Q)``.
    """
    D, P, Q = model.dim_x, model.dim_theta, model.dim_psi
    n = D + P + Q

    def stage(y, tt):
        fx, fth, fps = model.jac(y, theta, psi, tt)
        return model.rhs(y, theta, psi, tt), np.concatenate([fx, fth, fps], axis=1)

    eye = np.eye(D, n)
    k1, J1 = stage(x, t)
    dk1 = J1
    k2, J2 = stage(x + 0.5 * h * k1, t + 0.5 * h)
    dk2 = J2 @ np.vstack([eye + 0.5 * h * dk1, np.eye(n)[D:]])
    k3, J3 = stage(x + 0.5 * h * k2, t + 0.5 * h)
    dk3 = J3 @ np.vstack([eye + 0.5 * h * dk2, np.eye(n)[D:]])
    k4, J4 = stage(x + h * k3, t + h)
    dk4 = J4 @ np.vstack([eye + h * dk3, np.eye(n)[D:]])
    x_new = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    jac = eye + (h / 6.0) * (dk1 + 2 * dk2 + 2 * dk3 + dk4)
    return x_new, jac


def interp_theta(grid, theta_grid):
    """Piecewise-linear theta(t) through the values on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    theta_grid = np.asarray(theta_grid, dtype=float)

    def theta_fn(t):
        return np.array([np.interp(t, grid, row) for row in theta_grid])

    return theta_fn


# --- least squares with a discrete adjoint ---------------------------------------

class _RkProblem:
    """SSE between observations and the RK4 trajectory, with its gradient.

    Integration runs over the grid with ``substeps`` RK4 steps per grid
    interval; theta(t) is linear between grid nodes.
    """

    def __init__(self, model, data, grid, substeps):
        self.model = model
        self.grid = np.asarray(grid, dtype=float)
        self.substeps = substeps
        self.D, self.P, self.Q = model.dim_x, model.dim_theta, model.dim_psi
        self.obs = []
        for d in range(self.D):
            tau, y = data.tau[d], data.y[d]
            if len(tau):
                idx = _grid_index(self.grid, tau)
                self.obs.append((d, idx, np.asarray(y, dtype=float)))
        self.log_psi = np.array(model.psi_positive, dtype=bool)

    @property
    def size(self) -> int:
        return self.D + self.P * self.grid.size + self.Q

    def pack(self, x0, theta_grid, psi):
        psi = np.asarray(psi, dtype=float)
        raw = np.where(self.log_psi, np.log(np.where(self.log_psi, psi, 1.0)), psi)
        return np.concatenate([np.asarray(x0, float), np.asarray(theta_grid, float).ravel(), raw])

    def unpack(self, v):
        n = self.grid.size
        x0 = v[:self.D]
        theta = v[self.D:self.D + self.P * n].reshape(self.P, n)
        raw = v[self.D + self.P * n:]
        psi = np.where(self.log_psi, np.exp(raw), raw)
        return x0, theta, psi

    def __call__(self, v):
        x0, theta, psi = self.unpack(v)
        model, grid, m = self.model, self.grid, self.substeps
        n = grid.size
        f, jac = model.rhs, model.jac
        x = x0.copy()
        traj = np.empty((self.D, n))
        traj[:, 0] = x
        tape = []
        for i in range(n - 1):
            t0, t1 = grid[i], grid[i + 1]
            h = (t1 - t0) / m
            for j in range(m):
                ta = t0 + j * h
                wa, wm, wb = (j / m, (j + 0.5) / m, (j + 1) / m)
                th = [(1 - w) * theta[:, i] + w * theta[:, i + 1] for w in (wa, wm, wm, wb)]
                ts = (ta, ta + 0.5 * h, ta + 0.5 * h, ta + h)
                y1 = x
                k1 = f(y1, th[0], psi, ts[0])
                y2 = x + 0.5 * h * k1
                k2 = f(y2, th[1], psi, ts[1])
                y3 = x + 0.5 * h * k2
                k3 = f(y3, th[2], psi, ts[2])
                y4 = x + h * k3
                k4 = f(y4, th[3], psi, ts[3])
                tape.append((i, h, (wa, wm, wm, wb), (y1, y2, y3, y4), th, ts))
                x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                return np.inf, np.zeros_like(v)
            traj[:, i + 1] = x

        sse = 0.0
        lam_grid = np.zeros((self.D, n))
        for d, idx, y in self.obs:
            r = traj[d, idx] - y
            sse += float(r @ r)
            np.add.at(lam_grid[d], idx, 2.0 * r)

        g_theta = np.zeros_like(theta)
        g_psi = np.zeros(self.Q)
        lam = lam_grid[:, n - 1].copy()
        pos = len(tape)
        for i in range(n - 2, -1, -1):
            for _ in range(m):
                pos -= 1
                _, h, ws, ys, th, ts = tape[pos]
                b = [h / 6.0 * lam, h / 3.0 * lam, h / 3.0 * lam, h / 6.0 * lam]
                lam_x = lam.copy()
                carry = np.zeros(self.D)
                coef = (0.5 * h, 0.5 * h, h)
                for s in (3, 2, 1, 0):
                    bs = b[s] + carry
                    jx, jth, jps = jac(ys[s], th[s], psi, ts[s])
                    ay = jx.T @ bs
                    gth = jth.T @ bs
                    g_theta[:, i] += (1 - ws[s]) * gth
                    g_theta[:, i + 1] += ws[s] * gth
                    g_psi += jps.T @ bs
                    lam_x += ay
                    carry = coef[s - 1] * ay if s > 0 else 0.0
                lam = lam_x
            lam = lam + lam_grid[:, i]
        g_raw = np.where(self.log_psi, g_psi * psi, g_psi)
        return sse, np.concatenate([lam, g_theta.ravel(), g_raw])


def _grid_index(grid, times, tol=1e-8):
    times = np.asarray(times, dtype=float)
    idx = np.searchsorted(grid, times - tol)
    idx = np.clip(idx, 0, grid.size - 1)
    if np.any(np.abs(grid[idx] - times) > tol * max(1.0, float(np.abs(grid).max()))):
        raise ValueError("observation times must lie on the grid")
    return idx


@dataclass
class RkEstimate:
    x0: np.ndarray
    theta_grid: np.ndarray
    psi: np.ndarray
    sse: float
    grid: np.ndarray
    iters: int
    trace: np.ndarray


def rk_least_squares(data, model: OdeModel, init, cfg: AdamConfig, grid,
                     substeps: int = 10, scale=None) -> RkEstimate:
    """Runge-Kutta nonlinear least squares over (x0, theta(grid), psi).

    ``init`` is ``(x0, theta_grid, psi)``.  Optimized with Adam; positive
    psi entries are optimized on the log scale.  ``scale`` optionally gives
    per-coordinate step scales in the packed (x0, theta, raw psi) layout.
    """
    problem = _RkProblem(model, data, grid, substeps)
    v0 = problem.pack(*init)
    if not np.all(np.isfinite(v0)):
        raise ValueError("initial values must be finite")
    res = adam_minimize(problem, v0, cfg, scale=scale)
    x0, theta, psi = problem.unpack(res.x)
    return RkEstimate(x0=x0, theta_grid=theta, psi=psi, sse=res.value, grid=problem.grid,
                      iters=res.iters, trace=res.trace)
