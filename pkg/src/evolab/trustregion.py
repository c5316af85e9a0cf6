"""Constrained trust-region step and the tail-risk bound calculators.

The local problem solved each epoch is

    max_x  g^T x
    s.t.   c + g_C^T x <= 0
           0.5 x^T H x <= delta

where ``c`` already contains the tail-quantile term. The constraint
multiplier is called ``nu_dual`` here; ``nu`` always means the exploitation
range of the tail model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CannotRecoverError, DomainError, InvalidInputError, NumericalError, RecoveryNeeded
from .evt import GpdParams

CG_ITERS = 20
CG_TOL = 1e-8
BACKTRACK_RATIO = 0.8
BACKTRACK_STEPS = 10
_EPS = 1e-12


def conjugate_gradient(hvp: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       iters: int = CG_ITERS, tol: float = CG_TOL) -> np.ndarray:
    """Approximately solve ``H x = b`` using only products with H."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = (tol * math.sqrt(rr)) ** 2
    for _ in range(iters):
        if rr <= stop or rr == 0.0:
            break
        hp = hvp(p)
        php = float(p @ hp)
        if not np.isfinite(php) or php <= 0:
            raise NumericalError(f"non-positive curvature p^T H p = {php}")
        alpha = rr / php
        x += alpha * p
        r -= alpha * hp
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericalError("non-finite residual in conjugate gradient")
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class StepProblem:
    g: np.ndarray
    g_c: np.ndarray
    hvp: Callable[[np.ndarray], np.ndarray]
    c: float
    delta: float = 0.01
    cg_iters: int = CG_ITERS
    cg_tol: float = CG_TOL

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidInputError("delta must be > 0")
        self.g = np.asarray(self.g, dtype=float)
        self.g_c = np.asarray(self.g_c, dtype=float)
        if self.g.shape != self.g_c.shape:
            raise InvalidInputError("g and g_c must have the same shape")


@dataclass
class DualSolution:
    lambda_star: float
    nu_dual_star: float
    q: float
    u: float
    v: float
    case: str
    h_inv_g: np.ndarray | None = None
    h_inv_gc: np.ndarray | None = None


def _proj(x, lo, hi):
    return min(max(x, lo), hi)


def solve_dual(problem: StepProblem) -> DualSolution:
    """Analytic solution of the two-multiplier dual.

    With ``q = g'H^-1 g``, ``u = g'H^-1 g_C``, ``v = g_C'H^-1 g_C`` and
    ``r = -u`` the dual over lambda is piecewise:

        f_a = -(q - r^2/v)/(2 lam) - lam (2 delta - c^2/v)/2 - r c / v   if lam c > r
        f_b = -(q/lam + 2 delta lam)/2                                 otherwise

    and ``nu_dual = max(0, (lam c - r) / v)``. Ties ``lam c == r`` belong to
    the second branch. Raises RecoveryNeeded when no feasible step exists.
    """
    hvp, delta, c = problem.hvp, problem.delta, float(problem.c)
    x_g = conjugate_gradient(hvp, problem.g, problem.cg_iters, problem.cg_tol)
    x_c = conjugate_gradient(hvp, problem.g_c, problem.cg_iters, problem.cg_tol)
    q = float(problem.g @ x_g)
    u = float(problem.g @ x_c)
    v = float(problem.g_c @ x_c)
    q, v = max(q, 0.0), max(v, 0.0)

    def sol(lam, nu, case):
        return DualSolution(lam, nu, q, u, v, case, x_g, x_c)

    if v <= _EPS:
        if c > 0:
            raise CannotRecoverError("constraint violated but its gradient vanishes")
        return sol(math.sqrt(q / (2 * delta)), 0.0, "unconstrained")

    b_term = 2.0 * delta - c * c / v
    if c > 0 and b_term < 0:
        raise RecoveryNeeded(f"infeasible: c={c:.6g}, c^2/v={c * c / v:.6g} > 2 delta")
    lam_b_free = math.sqrt(q / (2.0 * delta))
    if c < 0 and b_term < 0:
        # the whole trust region satisfies the linear constraint
        return sol(lam_b_free, 0.0, "inactive")

    r = -u
    a_term = max(q - r * r / v, 0.0)

    def f_a(lam):
        if lam <= 0:
            return -math.inf if a_term > 0 else -r * c / v
        return -a_term / (2 * lam) - lam * b_term / 2 - r * c / v

    def f_b(lam):
        if lam <= 0:
            return -math.inf if q > 0 else 0.0
        return -(q / lam + 2 * delta * lam) / 2

    lam_a_free = math.sqrt(a_term / b_term) if b_term > 0 else math.inf
    cands = []
    if c > 0:
        lo = max(r / c, 0.0)
        # branch a: lam > r/c (open at r/c, approached from above)
        cands.append(("a", _proj(lam_a_free, lo, math.inf)))
        if r / c >= 0:
            cands.append(("b", _proj(lam_b_free, 0.0, r / c)))
    elif c < 0:
        # lam c > r  <=>  lam < r/c
        if r / c > 0:
            cands.append(("a", _proj(lam_a_free, 0.0, r / c)))
        cands.append(("b", _proj(lam_b_free, max(r / c, 0.0), math.inf)))
    else:
        if r < 0:
            cands.append(("a", lam_a_free))
        else:
            cands.append(("b", lam_b_free))

    best_case, best_lam, best_val = None, None, -math.inf
    for case, lam in cands:
        val = f_a(lam) if case == "a" else f_b(lam)
        if val > best_val or (val == best_val and case == "b"):
            best_case, best_lam, best_val = case, lam, val
    lam = best_lam
    nu = max(0.0, (lam * c - r) / v) if best_case == "a" else 0.0
    return sol(lam, nu, best_case)


def recovery_step(problem: StepProblem, h_inv_gc: np.ndarray | None = None) -> np.ndarray:
    """Pure constraint-decrease step on the trust-region boundary."""
    if h_inv_gc is None:
        h_inv_gc = conjugate_gradient(problem.hvp, problem.g_c, problem.cg_iters, problem.cg_tol)
    v = float(problem.g_c @ h_inv_gc)
    if v <= _EPS:
        raise CannotRecoverError("constraint violated but its gradient vanishes")
    return -math.sqrt(2.0 * problem.delta / v) * h_inv_gc


def propose_step(problem: StepProblem) -> tuple[np.ndarray, bool]:
    """Return ``(step, is_recovery)`` for the linearized problem."""
    if not (np.all(np.isfinite(problem.g)) and np.all(np.isfinite(problem.g_c))):
        raise NumericalError("non-finite gradient")
    try:
        dual = solve_dual(problem)
    except RecoveryNeeded:
        return recovery_step(problem), True
    if dual.lambda_star <= _EPS:
        # g is parallel to g_C: walk to the constraint boundary
        if dual.v <= _EPS:
            return np.zeros_like(problem.g), False
        return -(problem.c / dual.v) * dual.h_inv_gc, False
    step = (dual.h_inv_g - dual.nu_dual_star * dual.h_inv_gc) / dual.lambda_star
    return step, False


def line_search(theta_k: np.ndarray, step: np.ndarray, *,
                kl_fn: Callable[[np.ndarray], float],
                surrogate_fn: Callable[[np.ndarray], tuple[float, float]],
                delta: float, c: float, recovery: bool,
                ratio: float = BACKTRACK_RATIO, n_steps: int = BACKTRACK_STEPS,
                ) -> tuple[np.ndarray, float]:
    """Backtrack along ``step``; return the accepted parameters and alpha.

    ``surrogate_fn(theta)`` gives (reward surrogate, cost surrogate). A
    candidate is accepted when the KL is within ``delta`` and
      - recovery: the cost surrogate decreases;
      - otherwise: the cost surrogate increase stays within ``max(-c, 0)``
        and, if the constraint is slack (c < 0), the reward surrogate
        does not decrease.
    alpha = 0 (theta_k unchanged) when nothing is accepted.
    """
    if not np.any(step):
        return theta_k.copy(), 0.0
    r0, c0 = surrogate_fn(theta_k)
    for j in range(n_steps):
        alpha = ratio ** j
        theta = theta_k + alpha * step
        kl = kl_fn(theta)
        if not np.isfinite(kl) or kl > delta:
            continue
        r1, c1 = surrogate_fn(theta)
        if not (np.isfinite(r1) and np.isfinite(c1)):
            continue
        if recovery:
            if c1 < c0:
                return theta, alpha
            continue
        if c1 - c0 > max(-c, 0.0):
            continue
        if c < 0 and r1 < r0:
            continue
        return theta, alpha
    return theta_k.copy(), 0.0


def adapt_nu(nu: float, j_c: float, d: float, alpha: float = 0.01,
             mu_hat: float | None = None) -> float:
    """One projected gradient step on the exploitation range."""
    if not alpha > 0:
        raise InvalidInputError("alpha must be > 0")
    out = max(0.0, nu + alpha * (j_c - d))
    if mu_hat is not None:
        out = min(out, max(0.0, 1.0 - mu_hat - 1e-3))
    return out


def tv_term_estimate(eps_c: float, delta: float, gamma: float) -> float:
    """2 gamma eps_C D_TV / (1 - gamma) with D_TV <= sqrt(delta / 2)."""
    return 2.0 * gamma * abs(eps_c) * math.sqrt(delta / 2.0) / (1.0 - gamma)


def max_state_mean_advantage(states: np.ndarray, cost_advantages: np.ndarray) -> float:
    """max_s |mean_a A_C(s, a)| with samples grouped by identical states."""
    states = np.asarray(states, dtype=float)
    adv = np.asarray(cost_advantages, dtype=float)
    if adv.size == 0:
        return 0.0
    _, inverse = np.unique(states.reshape(len(states), -1), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=adv)
    counts = np.bincount(inverse)
    return float(np.max(np.abs(sums / counts)))


def compute_nu0(gpd: GpdParams, tv_term: float, gamma: float) -> float:
    """Zero-violation exploitation range."""
    if tv_term < 0:
        raise DomainError("tv_term must be >= 0")
    base = gpd.xi * tv_term / (gpd.sigma * (1.0 - gamma)) + 1.0
    if base <= 0:
        # xi < 0 and the term exceeds the finite support: all tail mass
        return gpd.exceedance
    return gpd.exceedance * -math.expm1(-math.log(base) / gpd.xi)


def violation_prob_bound(gpd: GpdParams, j_terms: float, e_term: float) -> float:
    """Upper bound (J (E + 1)) ** (-1/xi) on P(C > d)."""
    if j_terms <= 0:
        raise DomainError("J_terms must be > 0")
    if e_term < 0:
        raise DomainError("E_term must be >= 0")
    return float((j_terms * (e_term + 1.0)) ** (-1.0 / gpd.xi))


def bound_terms(gpd: GpdParams, j_c: float, surrogate_cost_change: float,
                tv_term: float, gamma: float) -> tuple[float, float]:
    """Return (J_terms, E_term) from the current cost estimate and step."""
    j_terms = gpd.xi / gpd.sigma * (j_c + surrogate_cost_change) + 1.0
    e_term = gpd.xi / (gpd.sigma * (1.0 - gamma)) * tv_term
    return j_terms, e_term


def variance_pair(mu: float, nu: float, n: int, f_h_at_q: float) -> tuple[float, float]:
    """Asymptotic variances of the tail-quantile and direct-quantile estimators.

    The direct estimator uses the overall density ``(1 - mu) * f_H`` at the
    risk boundary.
    """
    if not (0 < mu and 0 < nu and mu + nu < 1 and n >= 1 and f_h_at_q > 0):
        raise DomainError("need 0 < mu, 0 < nu, mu + nu < 1, N >= 1, f_H > 0")
    f_c = (1.0 - mu) * f_h_at_q
    omega_evo = nu * (1.0 - mu - nu) / (n * (1.0 - mu) ** 2 * f_h_at_q ** 2)
    omega_qr = (mu + nu) * (1.0 - mu - nu) / (n * f_c ** 2)
    return omega_evo, omega_qr
