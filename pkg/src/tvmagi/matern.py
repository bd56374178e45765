"""Matern covariance family on a time grid.

Provides a self-contained evaluation of the modified Bessel function of the
second kind for fractional order, the Matern kernel with its first and
mixed second derivatives, and the precomputed Gram bundle used by the
derivative-conditional Gaussian process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "KernelConfig",
    "GramBundle",
    "FactorizationError",
    "bessel_k",
    "matern_cov",
    "matern_cov_derivs",
    "build_gram",
]

_EPS = 1e-16
_MAXIT = 10000
_TEMME_SWITCH = 2.0
# u below this is treated as zero lag in the kernel formulas
_ZERO_LAG = 1e-12

# Power series coefficients of 1/Gamma(z) = sum_k c_k z^k, k = 1..26.
_RGAMMA_COEF = np.array([
    1.0000000000000000,
    0.5772156649015329,
    -0.6558780715202538,
    -0.0420026350340952,
    0.1665386113822915,
    -0.0421977345555443,
    -0.0096219715278770,
    0.0072189432466630,
    -0.0011651675918591,
    -0.0002152416741149,
    0.0001280502823882,
    -0.0000201348547807,
    -0.0000012504934821,
    0.0000011330272320,
    -0.0000002056338417,
    0.0000000061160950,
    0.0000000050020075,
    -0.0000000011812746,
    0.0000000001043427,
    0.0000000000077823,
    -0.0000000000036968,
    0.0000000000005100,
    -0.0000000000000206,
    -0.0000000000000054,
    0.0000000000000014,
    0.0000000000000001,
])


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization failed for the named Gram matrix."""

    def __init__(self, matrix: str, message: str = ""):
        self.matrix = matrix
        super().__init__(f"cannot factorize {matrix}: {message or 'not positive definite'}")


def _temme_gammas(mu: float) -> tuple[float, float, float, float]:
    """Return gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu) for |mu| <= 1/2.

    gam1 and gam2 are the odd/even parts used by Temme's series; evaluating
    them from the 1/Gamma power series avoids the cancellation in
    (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu) at small mu.
    """
    c = _RGAMMA_COEF
    mu2 = mu * mu
    # 1/Gamma(1+x) = sum_k c_k x^(k-1); split into even and odd powers
    powers = mu2 ** np.arange(13)
    gam1 = -float(np.dot(c[1::2], powers))
    gam2 = float(np.dot(c[0::2], powers))
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    return gam1, gam2, gampl, gammi


def _k_small(mu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Temme's series for K_mu and K_{mu+1}, valid for x < 2.
    gam1, gam2, gampl, gammi = _temme_gammas(mu)
    mu2 = mu * mu
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    with np.errstate(invalid="ignore", divide="ignore"):
        fact2 = np.where(np.abs(e) < _EPS, 1.0, np.sinh(e) / np.where(e == 0, 1.0, e))
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(x)
    dd = x2 * x2
    total1 = p.copy()
    for i in range(1, _MAXIT + 1):
        ff = (i * ff + p + q) / (i * i - mu2)
        c = c * (dd / i)
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total += delta
        total1 += c * (p - i * ff)
        if np.all(np.abs(delta) < np.abs(total) * _EPS):
            break
    return total, total1 * (2.0 / x)


def _k_large(mu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Steed's continued fraction (CF2) for K_mu and K_{mu+1}, x >= 2.
    mu2 = mu * mu
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu2
    q = np.full_like(x, a1)
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAXIT + 1):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        if np.all(np.abs(dels / s) < _EPS):
            break
    h = a1 * h
    kmu = np.sqrt(math.pi / (2.0 * x)) * np.exp(-x) / s
    k1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, k1


def bessel_k(nu: float, z):
    """Modified Bessel function of the second kind K_nu(z).

    Parameters
    ----------
    nu : float
        Order; negative orders use K_{-nu} = K_nu.
    z : float or array_like
        Argument, strictly positive.

    Returns
    -------
    float or ndarray
        K_nu(z), with the shape of ``z``.  Overflow (tiny z, large order)
        is returned as ``inf``.
    """
    nu = abs(float(nu))
    zarr = np.asarray(z, dtype=float)
    if np.any(~(zarr > 0)):
        raise ValueError("bessel_k requires z > 0")
    scalar = zarr.ndim == 0
    x = np.atleast_1d(zarr).ravel()
    nl = int(nu + 0.5)
    mu = nu - nl

    out = np.empty_like(x)
    small = x < _TEMME_SWITCH
    with np.errstate(over="ignore", invalid="ignore"):
        for mask, kernel in ((small, _k_small), (~small, _k_large)):
            if not np.any(mask):
                continue
            xs = x[mask]
            kmu, k1 = kernel(mu, xs)
            # upward recurrence K_{m+1} = 2m/x K_m + K_{m-1}
            for i in range(1, nl + 1):
                kmu, k1 = k1, (mu + i) * (2.0 / xs) * k1 + kmu
            out[mask] = kmu
    out[np.isnan(out)] = np.inf
    if scalar:
        return float(out[0])
    return out.reshape(zarr.shape)


@dataclass(frozen=True)
class KernelConfig:
    """Matern hyperparameters: output scale phi1, length scale phi2, order nu."""

    phi1: float
    phi2: float
    nu: float = 2.01

    def __post_init__(self):
        for name in ("phi1", "phi2", "nu"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.phi1 > 0:
            raise ValueError(f"phi1 must be positive, got {self.phi1}")
        if not self.phi2 > 0:
            raise ValueError(f"phi2 must be positive, got {self.phi2}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")

    @property
    def norm(self) -> float:
        return 2.0 ** (1.0 - self.nu) / math.gamma(self.nu)

    @property
    def rate(self) -> float:
        return math.sqrt(2.0 * self.nu) / self.phi2


def _powk(order: float, power: float, u: np.ndarray) -> np.ndarray:
    # u^power * K_order(u), for u > 0
    return u ** power * bessel_k(order, u)


def _radial(cfg: KernelConfig, lag: np.ndarray, derivs: int) -> list[np.ndarray]:
    """k(l) and its first ``derivs`` derivatives in l, for l >= 0."""
    lag = np.asarray(lag, dtype=float)
    nu, a = cfg.nu, cfg.rate
    scale = cfg.phi1 ** 2 * cfg.norm
    u = a * lag
    pos = u > _ZERO_LAG
    up = u[pos]

    k = np.full(lag.shape, cfg.phi1 ** 2)
    k[pos] = scale * _powk(nu, nu, up)
    out = [k]
    if derivs >= 1:
        d1 = np.zeros(lag.shape)
        d1[pos] = -scale * a * _powk(nu - 1.0, nu, up)
        out.append(d1)
    if derivs >= 2:
        d2 = np.full(lag.shape, -cfg.phi1 ** 2 * nu / ((nu - 1.0) * cfg.phi2 ** 2))
        d2[pos] = -scale * a * a * (_powk(nu - 1.0, nu - 1.0, up) - _powk(nu - 2.0, nu, up))
        out.append(d2)
    return out


def matern_cov(cfg: KernelConfig, l):
    """Matern covariance at lag ``l`` (scalar or array, l >= 0)."""
    lag = np.asarray(l, dtype=float)
    if np.any(lag < 0):
        raise ValueError("lag must be nonnegative")
    k = _radial(cfg, np.atleast_1d(lag), 0)[0]
    return float(k[0]) if lag.ndim == 0 else k.reshape(lag.shape)


def matern_cov_derivs(cfg: KernelConfig, s, t, second: bool = True):
    """Kernel value and derivatives at time pairs (s, t).

    Returns ``(k, k_ds, k_dt, k_dsdt)`` where ``k_ds = dK/ds``,
    ``k_dt = dK/dt`` and ``k_dsdt = d2K/(ds dt)``.  Inputs broadcast.
    ``k_dsdt`` needs nu > 1; with ``second=False`` it is returned as None.
    """
    if second and cfg.nu <= 1.0:
        raise ValueError(f"second derivative kernel needs nu > 1, got nu={cfg.nu}")
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    diff = s_arr - t_arr
    lag = np.abs(diff)
    parts = _radial(cfg, np.atleast_1d(lag), 2 if second else 1)
    sign = np.sign(np.atleast_1d(diff))
    k = parts[0]
    k_ds = parts[1] * sign
    k_dt = -k_ds
    k_dsdt = -parts[2] if second else None
    if diff.ndim == 0:
        return (float(k[0]), float(k_ds[0]), float(k_dt[0]),
                float(k_dsdt[0]) if second else None)
    shape = diff.shape
    return (k.reshape(shape), k_ds.reshape(shape), k_dt.reshape(shape),
            k_dsdt.reshape(shape) if second else None)


def _lag_table(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # distinct lags (to ~1e-12 relative) and the map back to the full matrix
    diff = grid[:, None] - grid[None, :]
    lag = np.abs(diff)
    span = max(float(lag.max()), 1.0)
    key = np.round(lag / span, 12)
    uniq, inv = np.unique(key, return_inverse=True)
    lags = np.zeros_like(uniq)
    lags[inv.ravel()] = lag.ravel()
    return lags, inv.reshape(lag.shape), np.sign(diff)


def kernel_matrix(cfg: KernelConfig, grid) -> np.ndarray:
    """Covariance matrix of the kernel on ``grid`` (no derivatives)."""
    grid = np.asarray(grid, dtype=float)
    lags, inv, _ = _lag_table(grid)
    return _radial(cfg, lags, 0)[0][inv]


def _chol(mat: np.ndarray, name: str) -> np.ndarray:
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError(name, str(exc)) from None


@dataclass(frozen=True)
class GramBundle:
    """Gram matrices of a Matern GP and its derivative on a fixed grid.

    ``K``, ``Kprime_left``, ``Kprime_right`` and ``Kdoubleprime`` are exact
    kernel evaluations.  ``chol_K`` factors K plus jitter; the conditional
    quantities ``C`` and ``cond_op`` ('K K^-1) are computed against that
    jittered K, and ``chol_C`` factors C plus its own relative jitter.
    """

    grid: np.ndarray
    K: np.ndarray
    Kprime_left: np.ndarray
    Kprime_right: np.ndarray
    Kdoubleprime: np.ndarray
    chol_K: np.ndarray
    C: np.ndarray
    chol_C: np.ndarray
    cfg: KernelConfig
    jitter: float
    cond_op: np.ndarray = field(repr=False)
    K_inv: np.ndarray = field(repr=False)
    C_inv: np.ndarray = field(repr=False)
    logdet_K: float = 0.0
    logdet_C: float = 0.0

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def _inverse_from_chol(chol: np.ndarray) -> np.ndarray:
    inv = linalg.cho_solve((chol, True), np.eye(chol.shape[0]))
    return 0.5 * (inv + inv.T)


def build_gram(cfg: KernelConfig, grid, jitter: float = 1e-7) -> GramBundle:
    """Precompute K, 'K, K', K'' and the derivative-conditional covariance C.

    ``jitter`` is relative: jitter * mean(diag) is added to the diagonal of K
    (and, separately, of C) before factorization.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("build_gram needs a grid of at least 2 points")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")

    lags, inv, sign = _lag_table(grid)
    k0, k1, k2 = _radial(cfg, lags, 2)
    K = k0[inv]
    Kl = k1[inv] * sign          # dK/ds at (t_i, t_j)
    Kr = -Kl                     # dK/dt
    Kdd = -k2[inv]
    n = grid.size

    Kj = K + jitter * float(np.mean(np.diag(K))) * np.eye(n)
    LK = _chol(Kj, "K")
    K_inv = _inverse_from_chol(LK)
    cond_op = Kl @ K_inv
    C = Kdd - cond_op @ Kr
    C = 0.5 * (C + C.T)
    Cj = C + jitter * float(np.mean(np.diag(C))) * np.eye(n)
    LC = _chol(Cj, "C")
    C_inv = _inverse_from_chol(LC)
    return GramBundle(
        grid=grid, K=K, Kprime_left=Kl, Kprime_right=Kr, Kdoubleprime=Kdd,
        chol_K=LK, C=C, chol_C=LC, cfg=cfg, jitter=jitter,
        cond_op=cond_op, K_inv=K_inv, C_inv=C_inv,
        logdet_K=2.0 * float(np.sum(np.log(np.diag(LK)))),
        logdet_C=2.0 * float(np.sum(np.log(np.diag(LC)))),
    )
