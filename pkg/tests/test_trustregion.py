import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from evolab.errors import CannotRecoverError, DomainError, InvalidInputError, NumericalError, RecoveryNeeded
from evolab.evt import GpdParams
from evolab.trustregion import (
    StepProblem,
    adapt_nu,
    bound_terms,
    compute_nu0,
    conjugate_gradient,
    line_search,
    max_state_mean_advantage,
    propose_step,
    recovery_step,
    solve_dual,
    tv_term_estimate,
    variance_pair,
    violation_prob_bound,
)


def spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.linspace(1.0, cond, n)) @ q.T


def problem(rng, n=5, c=None, delta=0.01):
    h = spd(rng, n)
    g, g_c = rng.standard_normal(n), rng.standard_normal(n)
    c = float(rng.uniform(-0.3, 0.1)) if c is None else c
    return StepProblem(g, g_c, lambda v: h @ v, c, delta, cg_iters=50, cg_tol=1e-14), h


def dual_value(p, h, lam, nu):
    """min-form Lagrangian dual of max g'x s.t. c + g_C'x <= 0, x'Hx/2 <= delta."""
    w = p.g - nu * p.g_c
    return w @ np.linalg.solve(h, w) / (2 * lam) - nu * p.c + lam * p.delta


def slsqp(p, h):
    cons = [{"type": "ineq", "fun": lambda x: -(p.c + p.g_c @ x)},
            {"type": "ineq", "fun": lambda x: p.delta - 0.5 * x @ h @ x}]
    best = -np.inf
    for x0 in (np.zeros(len(p.g)), np.linalg.solve(h, p.g) * 1e-3):
        r = minimize(lambda x: -p.g @ x, x0, constraints=cons, method="SLSQP",
                     options={"ftol": 1e-14, "maxiter": 500})
        x = r.x
        if p.c + p.g_c @ x <= 1e-8 and 0.5 * x @ h @ x <= p.delta * (1 + 1e-8):
            best = max(best, p.g @ x)
    return best


def test_cg_examples(rng):
    b = rng.standard_normal(6)
    np.testing.assert_array_equal(conjugate_gradient(lambda v: v, b, iters=1), b)
    assert not np.any(conjugate_gradient(lambda v: v, np.zeros(4)))
    h = spd(rng, 10, 50.0)
    x = conjugate_gradient(lambda v: h @ v, b := rng.standard_normal(10), iters=100, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(h, b), atol=1e-6)


def test_cg_errors():
    with pytest.raises(NumericalError):
        conjugate_gradient(lambda v: -v, np.ones(3))
    with pytest.raises(NumericalError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3))


def test_step_problem_validation():
    with pytest.raises(InvalidInputError):
        StepProblem(np.ones(2), np.ones(2), lambda v: v, 0.0, delta=0.0)
    with pytest.raises(InvalidInputError):
        StepProblem(np.ones(2), np.ones(3), lambda v: v, 0.0)


def test_unconstrained_scaling():
    # g_C = 0 and c << 0: the step is the natural gradient on the trust-region boundary
    g = np.array([3.0, 4.0])
    p = StepProblem(g, np.zeros(2), lambda v: v, -10.0, delta=0.5)
    d = solve_dual(p)
    assert d.nu_dual_star == 0.0
    assert d.lambda_star == pytest.approx(math.sqrt(d.q / (2 * 0.5)))
    step, rec = propose_step(p)
    assert not rec and 0.5 * step @ step == pytest.approx(0.5)
    np.testing.assert_allclose(step, g / 5.0)


def test_boundary_with_inward_gradient():
    # c = 0 and the reward direction already decreases the cost (u < 0)
    p = StepProblem(np.array([1.0, 0.0]), np.array([-1.0, 0.5]), lambda v: v, 0.0, delta=0.1)
    d = solve_dual(p)
    assert d.u < 0 and d.nu_dual_star == 0.0


def test_dual_beats_grid(rng):
    for _ in range(5):
        p, h = problem(rng, n=2)
        try:
            d = solve_dual(p)
        except RecoveryNeeded:
            continue
        lam, nu = max(d.lambda_star, 1e-12), d.nu_dual_star
        ours = dual_value(p, h, lam, nu)
        grid_l = np.linspace(1e-3, 4 * lam + 1, 400)
        grid_n = np.linspace(0, 4 * nu + 1, 400)
        best = min(dual_value(p, h, a, b) for a in grid_l for b in grid_n)
        assert ours <= best + 1e-6
        # strong duality: the dual optimum equals the primal step objective
        step, _ = propose_step(p)
        assert ours == pytest.approx(p.g @ step, rel=1e-6, abs=1e-9)


def test_step_is_optimal_and_feasible(rng):
    for _ in range(30):
        p, h = problem(rng)
        step, rec = propose_step(p)
        if rec:
            continue
        assert p.c + p.g_c @ step <= 1e-6
        assert 0.5 * step @ h @ step <= p.delta * (1 + 1e-6)
        assert p.g @ step >= slsqp(p, h) - 1e-6


def test_step_beats_random_search(rng):
    p, h = problem(rng, c=-0.05)
    step, _ = propose_step(p)
    l_inv = np.linalg.inv(np.linalg.cholesky(h)).T
    y = rng.standard_normal((100_000, 5))
    y *= (rng.random(100_000) ** 0.2 / np.linalg.norm(y, axis=1) * math.sqrt(2 * p.delta))[:, None]
    x = y @ l_inv.T
    feas = p.c + x @ p.g_c <= 0
    assert p.g @ step >= (x[feas] @ p.g).max() - 1e-4


def test_recovery_closed_form():
    p = StepProblem(np.zeros(2), np.array([3.0, 4.0]), lambda v: v, 10.0, delta=0.5)
    with pytest.raises(RecoveryNeeded):
        solve_dual(p)
    step, rec = propose_step(p)
    assert rec
    np.testing.assert_allclose(step, -0.2 * np.array([3.0, 4.0]), atol=1e-12)
    np.testing.assert_allclose(recovery_step(p), step, atol=1e-12)


def test_cannot_recover():
    p = StepProblem(np.ones(2), np.zeros(2), lambda v: v, 1.0)
    with pytest.raises(CannotRecoverError):
        propose_step(p)


def test_nonfinite_gradient():
    with pytest.raises(NumericalError):
        propose_step(StepProblem(np.array([np.nan, 0.0]), np.ones(2), lambda v: v, 0.0))


def test_zero_nu_matches_plain_constraint(rng):
    # with nu = 0 the risk boundary is J_C, so the step is the plain CPO step bitwise
    p, h = problem(rng, c=-0.02)
    q = StepProblem(p.g.copy(), p.g_c.copy(), p.hvp, -0.02 + 0.0, p.delta, p.cg_iters, p.cg_tol)
    assert propose_step(p)[0].tobytes() == propose_step(q)[0].tobytes()


def quad_setup(h, g, g_c):
    kl = lambda th: 0.5 * th @ h @ th
    sur = lambda th: (float(g @ th), float(g_c @ th))
    return kl, sur


def test_line_search_full_step_and_zero_step():
    h = np.eye(2)
    kl, sur = quad_setup(h, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    step = np.array([0.1, 0.0])
    th, a = line_search(np.zeros(2), step, kl_fn=kl, surrogate_fn=sur, delta=0.01, c=-1.0,
                        recovery=False)
    assert a == 1.0 and np.array_equal(th, step)
    th, a = line_search(np.ones(2), np.zeros(2), kl_fn=kl, surrogate_fn=sur, delta=0.01, c=-1.0,
                        recovery=False)
    assert a == 0.0 and np.array_equal(th, np.ones(2))


def test_line_search_picks_first_kl_feasible_alpha():
    h = np.eye(2)
    kl, sur = quad_setup(h, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    delta = 0.01
    # scale so that only alpha <= 0.8**3 satisfies the KL bound
    target = 0.8 ** 3
    norm = math.sqrt(2 * delta) / (target + 1e-3)
    th, a = line_search(np.zeros(2), np.array([norm, 0.0]), kl_fn=kl, surrogate_fn=sur,
                        delta=delta, c=-1.0, recovery=False)
    assert a == pytest.approx(0.8 ** 3)


def test_line_search_recovery_and_rejection():
    h = np.eye(2)
    kl, sur = quad_setup(h, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    th, a = line_search(np.zeros(2), np.array([0.0, -0.1]), kl_fn=kl, surrogate_fn=sur,
                        delta=0.01, c=1.0, recovery=True)
    assert a == 1.0
    # the cost increases along the step: recovery rejects every alpha
    th, a = line_search(np.zeros(2), np.array([0.0, 0.1]), kl_fn=kl, surrogate_fn=sur,
                        delta=0.01, c=1.0, recovery=True)
    assert a == 0.0
    # slack constraint but the reward decreases: rejected
    th, a = line_search(np.zeros(2), np.array([-0.1, 0.0]), kl_fn=kl, surrogate_fn=sur,
                        delta=0.01, c=-1.0, recovery=False)
    assert a == 0.0


def test_adapt_nu_examples():
    assert adapt_nu(0.1, 25.0, 25.0) == 0.1
    assert adapt_nu(0.1, 26.0, 25.0, 0.01) == pytest.approx(0.11)
    assert adapt_nu(0.0, 20.0, 25.0) == 0.0
    assert adapt_nu(0.5, 100.0, 25.0, 0.1, mu_hat=0.7) == pytest.approx(0.299)
    with pytest.raises(InvalidInputError):
        adapt_nu(0.1, 1.0, 1.0, alpha=0.0)


def test_adapt_nu_tracks_linear_response():
    # behaviour J_C = 40 - 100 nu; target d = 25 at nu = 0.15
    nu = 0.0
    dist = []
    for _ in range(300):
        j = 40 - 100 * nu
        new = adapt_nu(nu, j, 25.0, alpha=0.002)
        if 0 < new and abs(j - 25.0) > 1e-9:
            assert np.sign(new - nu) == np.sign(j - 25.0)
        dist.append(abs(new - 0.15))
        nu = new
    assert dist[-1] < 1e-6 and all(b <= a + 1e-15 for a, b in zip(dist, dist[1:]))


def test_nu0_examples_and_range(rng):
    g = GpdParams(0.5, 1.0, 20, 100)
    assert compute_nu0(g, 0.0, 0.99) == 0.0
    assert compute_nu0(g, 0.005, 0.99) == pytest.approx(0.2 * (1 - 1.25 ** -2))
    vals = [compute_nu0(g, t, 0.99) for t in np.linspace(0, 1, 50)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    for _ in range(500):
        n = int(rng.integers(2, 500))
        gg = GpdParams(rng.uniform(-0.9, 3) or 0.1, rng.uniform(0.1, 5), int(rng.integers(1, n + 1)), n)
        v = compute_nu0(gg, rng.exponential(), rng.uniform(0.5, 0.999))
        assert 0 <= v <= gg.exceedance
    with pytest.raises(DomainError):
        compute_nu0(g, -1.0, 0.99)


def test_tv_term_and_eps_c():
    assert tv_term_estimate(1.0, 0.02, 0.5) == pytest.approx(2 * 0.5 * 0.1 / 0.5)
    s = np.array([[0.0], [0.0], [1.0]])
    assert max_state_mean_advantage(s, np.array([1.0, 3.0, -5.0])) == 5.0
    assert max_state_mean_advantage(s, np.array([1.0, 3.0, 0.5])) == 2.0
    assert max_state_mean_advantage(np.zeros((0, 1)), np.zeros(0)) == 0.0


def test_violation_bound_examples():
    g = GpdParams(0.5, 1.0, 1, 1)
    assert violation_prob_bound(g, 2.0, 0.0) == 0.25
    assert violation_prob_bound(g, 3.0, 0.0) == pytest.approx(3.0 ** -2)
    with pytest.raises(DomainError):
        violation_prob_bound(g, 0.0, 0.0)
    with pytest.raises(DomainError):
        violation_prob_bound(g, 1.0, -0.1)
    j, e = bound_terms(g, 2.0, 0.0, 0.0, 0.99)
    assert (j, e) == (2.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.1, 10.0), st.floats(0.0, 50.0), st.floats(-1.0, 1.0),
       st.floats(0.0, 5.0), st.floats(0.5, 0.999))
def test_violation_bound_below_exceedance(xi, sigma, j_c, change, tv, gamma):
    # mu derived from the same GPD at J_C: 1 - mu = (1 + xi J / sigma)^(-1/xi)
    g = GpdParams(xi, sigma, 1, 1)
    j_terms, e_term = bound_terms(g, j_c, change, tv, gamma)
    if j_terms <= 0:
        return
    one_minus_mu = j_terms ** (-1.0 / xi)
    assert violation_prob_bound(g, j_terms, e_term) <= one_minus_mu * (1 + 1e-12)


def test_variance_pair(rng):
    evo, qr = variance_pair(0.8, 0.1, 100, 0.5)
    assert evo == pytest.approx(0.01)
    for _ in range(1000):
        mu = rng.uniform(0.01, 0.98)
        nu = rng.uniform(1e-4, 1 - mu - 1e-4)
        a, b = variance_pair(mu, nu, int(rng.integers(1, 10**5)), rng.uniform(0.01, 10))
        assert a / b == pytest.approx(nu / (mu + nu), rel=1e-12)
    for bad in [(0.0, 0.1, 10, 1.0), (0.5, 0.5, 10, 1.0), (0.5, 0.1, 0, 1.0), (0.5, 0.1, 10, 0.0)]:
        with pytest.raises(DomainError):
            variance_pair(*bad)


def test_variance_monte_carlo():
    # tail-quantile estimator spread versus the asymptotic formula
    from evolab import evt
    truth = GpdParams(0.3, 1.0, 1, 1)
    mu, nu, n = 0.0, 0.5, 500
    rng = np.random.default_rng(7)
    qs = []
    for _ in range(2000):
        y = evt.gpd_sample(truth, n, rng)
        qs.append(np.quantile(y, nu))
    q_true = evt.gpd_quantile(truth, nu)
    f_h = evt.gpd_pdf(truth, q_true)
    # mu = 0 is outside the open domain; use the formula directly
    omega = nu * (1 - mu - nu) / (n * (1 - mu) ** 2 * f_h ** 2)
    ratio = np.var(qs) / omega
    assert 1 / 1.5 < ratio < 1.5
    a, _ = variance_pair(1e-9, nu, n, f_h)
    assert a == pytest.approx(omega, rel=1e-6)
