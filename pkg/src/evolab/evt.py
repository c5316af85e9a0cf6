"""Peaks-over-threshold tail modelling with the generalized Pareto distribution.

Excesses ``z = x - q`` over a threshold ``q`` are modelled with

    F(z) = 1 - (1 + xi * z / sigma) ** (-1 / xi),    xi != 0

and the full distribution above the threshold is reconstructed as
``P(X <= q + z) = mu + (1 - mu) * F(z)`` where ``1 - mu`` is the fraction of
samples above ``q``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import (
    DegenerateDataError,
    DomainError,
    ExploitationRangeError,
    InsufficientDataError,
    InvalidInputError,
)

log = logging.getLogger(__name__)

XI_EPS = 1e-3
XI_BOUNDS = (-0.95, 5.0)
DEFAULT_MIN_PEAKS = 10


@dataclass(frozen=True)
class GpdParams:
    xi: float
    sigma: float
    n_peaks: int
    n_total: int
    threshold: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be > 0, got {self.sigma}")
        if self.xi == 0:
            raise DomainError("xi = 0 is excluded")
        if not 0 < self.n_peaks <= self.n_total:
            raise DomainError(
                f"need 0 < n_peaks <= n_total, got {self.n_peaks}, {self.n_total}")

    @property
    def exceedance(self) -> float:
        """Fraction of samples above the threshold, N_mu / n."""
        return self.n_peaks / self.n_total

    @property
    def upper_endpoint(self) -> float:
        return -self.sigma / self.xi if self.xi < 0 else math.inf

    def to_dict(self) -> dict:
        return {"xi": self.xi, "sigma": self.sigma, "n_peaks": self.n_peaks,
                "n_total": self.n_total, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "GpdParams":
        return cls(float(d["xi"]), float(d["sigma"]), int(d["n_peaks"]),
                   int(d["n_total"]), float(d.get("threshold", 0.0)))


@dataclass(frozen=True)
class TailModel:
    """Cost and reward tail fits plus the exploitation range ``nu``."""

    cost_gpd: GpdParams
    reward_gpd: GpdParams
    nu: float

    def __post_init__(self):
        if self.nu < 0:
            raise DomainError("nu must be >= 0")

    @property
    def mu_hat(self) -> float:
        return 1.0 - self.cost_gpd.exceedance

    @property
    def safety_boundary(self) -> float:
        return self.cost_gpd.threshold

    @property
    def reward_boundary(self) -> float:
        return self.reward_gpd.threshold


def extract_peaks(samples: Sequence[float], threshold: float) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    return x[x > threshold] - threshold


def _check_support(params: GpdParams, z: np.ndarray) -> None:
    if np.any(z < 0):
        raise DomainError("z must be >= 0")
    if params.xi < 0 and np.any(z >= params.upper_endpoint):
        raise DomainError(f"z must be < {params.upper_endpoint} for xi < 0")


def gpd_cdf(params: GpdParams, z):
    z_arr = np.asarray(z, dtype=float)
    _check_support(params, z_arr)
    out = -np.expm1(-np.log1p(params.xi * z_arr / params.sigma) / params.xi)
    return float(out) if out.ndim == 0 else out


def gpd_pdf(params: GpdParams, z):
    z_arr = np.asarray(z, dtype=float)
    _check_support(params, z_arr)
    xi, s = params.xi, params.sigma
    out = np.exp(-(1.0 / xi + 1.0) * np.log1p(xi * z_arr / s)) / s
    return float(out) if out.ndim == 0 else out


def gpd_quantile(params: GpdParams, p):
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr < 0) or np.any(p_arr >= 1):
        raise DomainError("p must lie in [0, 1)")
    xi = params.xi
    out = params.sigma / xi * np.expm1(-xi * np.log1p(-p_arr))
    return float(out) if out.ndim == 0 else out


def gpd_sample(params: GpdParams, size, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of excesses."""
    return gpd_quantile(params, rng.random(size))


def gpd_loglik(xi: float, sigma: float, excesses: np.ndarray) -> float:
    """Log-likelihood of excesses; -inf outside the parameter support."""
    if sigma <= 0 or xi == 0:
        return -math.inf
    t = xi * excesses / sigma
    if np.any(t <= -1.0):
        return -math.inf
    return float(-excesses.size * math.log(sigma)
                 - (1.0 + 1.0 / xi) * np.log1p(t).sum())


def _golden_max(f: Callable[[float], float], a: float, b: float,
                tol: float = 1e-10, max_iter: int = 200) -> tuple[float, float]:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    fx = f(x)
    for cand, fcand in ((c, fc), (d, fd)):
        if fcand > fx:
            x, fx = cand, fcand
    return x, fx


def _profile_sigma(xi: float, y: np.ndarray, ymax: float) -> tuple[float, float]:
    """Best log(sigma) for fixed xi by golden-section search."""
    lo = math.log(max(1e-8, ymax * 1e-6))
    if xi < 0:
        lo = max(lo, math.log(-xi * ymax) + 1e-9)
    hi = math.log(ymax * 1e3)
    return _golden_max(lambda ls: gpd_loglik(xi, math.exp(ls), y), lo, hi, tol=1e-9)


def fit_gpd_mle(excesses: Sequence[float], min_peaks: int = DEFAULT_MIN_PEAKS,
                threshold: float = 0.0, n_total: int | None = None) -> GpdParams:
    """Maximum-likelihood GPD fit.

    A coarse grid over xi with a golden-section profile over log(sigma)
    seeds a Nelder-Mead polish in (xi, log sigma). Shapes with
    |xi| < 1e-3 are excluded and clamped to the boundary.
    """
    y = np.asarray(excesses, dtype=float).ravel()
    if y.size < min_peaks:
        raise InsufficientDataError(f"need at least {min_peaks} peaks, got {y.size}")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise InvalidInputError("excesses must be finite and > 0")
    if np.ptp(y) == 0:
        raise DegenerateDataError("all excesses are identical")
    y = np.sort(y)
    ymax = float(y[-1])

    xi_grid = np.concatenate([np.linspace(XI_BOUNDS[0], -XI_EPS, 24),
                              np.linspace(XI_EPS, 2.0, 30),
                              np.linspace(2.25, XI_BOUNDS[1], 12)])
    best = (-math.inf, None, None)
    for xi in xi_grid:
        ls, ll = _profile_sigma(float(xi), y, ymax)
        if ll > best[0]:
            best = (ll, float(xi), ls)

    def negll(p):
        xi, ls = p
        if not XI_BOUNDS[0] <= xi <= XI_BOUNDS[1] or abs(xi) < XI_EPS:
            return math.inf
        ll = gpd_loglik(xi, math.exp(ls), y)
        return -ll if np.isfinite(ll) else math.inf

    res = minimize(negll, x0=[best[1], best[2]], method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 2000})
    xi, ls = float(res.x[0]), float(res.x[1])
    if not np.isfinite(res.fun) or -res.fun < best[0]:
        xi, ls = best[1], best[2]
    if abs(xi) < XI_EPS:
        xi = math.copysign(XI_EPS, xi) if xi != 0 else XI_EPS
        ls, _ = _profile_sigma(xi, y, ymax)
    n_total = y.size if n_total is None else int(n_total)
    return GpdParams(xi=xi, sigma=math.exp(ls), n_peaks=int(y.size),
                     n_total=n_total, threshold=float(threshold))


def fit_tail(samples: Sequence[float], threshold: float | None = None,
             min_peaks: int = DEFAULT_MIN_PEAKS,
             previous: GpdParams | None = None) -> tuple[GpdParams, bool]:
    """Fit a GPD to the peaks of ``samples`` over ``threshold``.

    The threshold defaults to the sample mean. When there are too few
    peaks (or they are degenerate) and ``previous`` is given, its shape and
    scale are reused with the current counts; the flag reports that.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise InsufficientDataError("no samples")
    q = float(x.mean()) if threshold is None else float(threshold)
    peaks = extract_peaks(x, q)
    try:
        return fit_gpd_mle(peaks, min_peaks, threshold=q, n_total=x.size), False
    except (InsufficientDataError, DegenerateDataError) as exc:
        if previous is None:
            raise
        log.warning("reusing previous GPD fit: %s", exc)
        n_peaks = max(int(peaks.size), 1)
        return GpdParams(previous.xi, previous.sigma, n_peaks,
                         max(int(x.size), n_peaks), q), True


def risk_quantile_level(model: TailModel) -> float:
    """Quantile level nu * n / N_mu of the excess distribution."""
    return model.nu / model.cost_gpd.exceedance


def risk_boundary(model: TailModel) -> float:
    """Safety boundary plus the GPD quantile at level nu / (1 - mu_hat)."""
    p = risk_quantile_level(model)
    if p >= 1.0:
        raise ExploitationRangeError(
            f"nu * n / N_mu = {p:.6g} >= 1; exploitation range too large")
    return model.cost_gpd.threshold + gpd_quantile(model.cost_gpd, p)


def ks_statistic(samples: Sequence[float], cdf: Callable) -> float:
    """Kolmogorov-Smirnov distance between the sample and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise InvalidInputError("samples must be non-empty")
    try:
        f = np.asarray(cdf(x), dtype=float)
        if f.shape != x.shape:
            raise ValueError
    except (TypeError, ValueError):
        f = np.asarray([cdf(v) for v in x], dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(np.abs(i / n - f)), np.max(np.abs((i - 1) / n - f))))


def gpd_support_cdf(params: GpdParams) -> Callable[[float], float]:
    """CDF that saturates at 0/1 outside the support instead of raising."""
    def cdf(z):
        z = np.asarray(z, dtype=float)
        inside = (z > 0) & (z < params.upper_endpoint)
        safe = np.where(inside, z, 0.0)
        out = np.where(inside, gpd_cdf(params, safe), np.where(z <= 0, 0.0, 1.0))
        return float(out) if out.ndim == 0 else out
    return cdf


def gaussian_cdf(mean: float, std: float) -> Callable[[float], float]:
    def cdf(x):
        x = np.asarray(x, dtype=float)
        if std == 0:
            out = (x >= mean).astype(float)
        else:
            out = ndtr((x - mean) / std)
        return float(out) if out.ndim == 0 else out
    return cdf


def fit_gaussian(samples: Sequence[float]) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientDataError("need at least 2 samples")
    return float(x.mean()), float(x.std())


def tail_fit_scores(excesses: Sequence[float], params: GpdParams) -> tuple[float, float]:
    """KS statistics of the GPD fit and of a Gaussian fit on the same excesses."""
    y = np.asarray(excesses, dtype=float)
    ks_gpd = ks_statistic(y, gpd_support_cdf(params))
    m, s = fit_gaussian(y)
    return ks_gpd, ks_statistic(y, gaussian_cdf(m, s))


_TRANSFORMS = {"identity": lambda x: np.asarray(x, dtype=float)}


def get_transform(name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Pre-fit sample transform hook. Only ``identity`` is available."""
    try:
        return _TRANSFORMS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown tail transform {name!r}; available: {sorted(_TRANSFORMS)}") from None
