"""Adam with a stall-based stopping rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

__all__ = ["AdamConfig", "AdamResult", "adam_minimize", "STALL_WINDOW"]

STALL_WINDOW = 50


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 10000
    tol: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if not self.tol >= 0:
            raise ValueError("tol must be nonnegative")


class AdamResult(NamedTuple):
    x: np.ndarray
    value: float
    iters: int
    trace: np.ndarray
    failed: bool = False
    message: str = ""


def adam_minimize(fun: Callable, init, cfg: AdamConfig = AdamConfig(),
                  scale: Optional[np.ndarray] = None) -> AdamResult:
    """Minimize ``fun(x) -> (value, grad)`` with bias-corrected Adam.

    ``scale`` runs the iteration on ``x / scale``, i.e. multiplies the
    per-coordinate step by ``scale``.  Stops after ``max_iters`` steps or
    once ``|f_k - f_{k-1}| < tol`` holds for ``STALL_WINDOW`` consecutive
    steps.  Returns the best iterate seen; ``trace[k]`` is the best value
    after ``k`` steps.  A non-finite objective ends the run with
    ``failed=True`` and the last good iterate.
    """
    x = np.array(init, dtype=float)
    if x.ndim != 1:
        raise ValueError("init must be a vector")
    s = np.ones_like(x) if scale is None else np.broadcast_to(np.asarray(scale, float), x.shape)
    value, grad = fun(x)
    value = float(value)
    grad = np.asarray(grad, dtype=float)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise FloatingPointError("objective or gradient is not finite at the initial point")

    b1, b2 = cfg.beta1, cfg.beta2
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_val = x.copy(), value
    trace = [value]
    prev = value
    stall = 0
    it = 0
    while it < cfg.max_iters:
        it += 1
        gz = grad * s
        m = b1 * m + (1 - b1) * gz
        v = b2 * v + (1 - b2) * gz * gz
        mhat = m / (1 - b1 ** it)
        vhat = v / (1 - b2 ** it)
        x = x - s * (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps))
        value, grad = fun(x)
        value = float(value)
        grad = np.asarray(grad, dtype=float)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            trace.append(best_val)
            return AdamResult(best_x, best_val, it, np.array(trace), True,
                              f"non-finite objective at iteration {it}")
        if value < best_val:
            best_val, best_x = value, x.copy()
        trace.append(best_val)
        stall = stall + 1 if abs(value - prev) < cfg.tol else 0
        prev = value
        if stall >= STALL_WINDOW:
            break
    return AdamResult(best_x, best_val, it, np.array(trace))
