import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bioinverse.forward import (
    LinearCoupling,
    NonlinearPower,
    ProblemError,
    ProblemSpec,
    SolverError,
    constant_upper_bound,
    construct_sector_bounds,
    discrete_residual,
    linear_coupled_solve,
    monotone_solve,
    scalar_parabolic_solve,
    solve_forward,
)
from bioinverse.grid import NEUMANN, build_grid


def newton_oracle(g, d, l, v, a, b, q, T):
    """Damped Newton on the implicit-Euler system, level by level, with a hand-built Laplacian.

    1D, M = 1, constant coefficients, zero Dirichlet data:
    f1 = -a u^2 - b u m + q,  f2 = -a m^2 - b m u + q.
    """
    n = g.shape[0] - 2
    h = 1.0 / (g.shape[0] - 1)
    lap = (np.diag(np.full(n, 2.0)) - np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)) / h**2
    dt = T / (g.nt - 1)
    I = np.eye(n)
    u, m = np.zeros(n), np.zeros(n)
    U = [np.zeros(g.n_nodes)]
    Mv = [np.zeros(g.n_nodes)]
    for _ in range(1, g.nt):
        u0, m0 = u.copy(), m.copy()

        def resid(x):
            uu, mm = x[:n], x[n:]
            r1 = (uu - u0) / dt + d * lap @ uu - l * uu + a * uu**2 + b * uu * mm - q
            r2 = (mm - m0) / dt + d * lap @ mm - v * mm + a * mm**2 + b * mm * uu - q
            return np.concatenate([r1, r2])

        x = np.concatenate([u, m])
        for _ in range(50):
            uu, mm = x[:n], x[n:]
            J = np.block([
                [I / dt + d * lap - l * I + np.diag(2 * a * uu + b * mm), np.diag(b * uu)],
                [np.diag(b * mm), I / dt + d * lap - v * I + np.diag(2 * a * mm + b * uu)],
            ])
            r = resid(x)
            step = np.linalg.solve(J, -r)
            t = 1.0
            while np.abs(resid(x + t * step)).max() > np.abs(r).max() and t > 1e-4:
                t /= 2
            x = x + t * step
            if np.abs(step).max() < 1e-15:
                break
        u, m = x[:n], x[n:]
        U.append(np.concatenate([[0.0], u, [0.0]]))
        Mv.append(np.concatenate([[0.0], m, [0.0]]))
    return np.array(U), np.array(Mv)


def nl_spec(g, l=-1.0, v=-1.0, a=1.0, b=1.0, q=1.0, d=1.0, **kw):
    return ProblemSpec(g, d, d, l, v, NonlinearPower(1, a, a, [b], [b], q, q), **kw)


# --------------------------------------------------------------------------
# sector bounds
# --------------------------------------------------------------------------
def test_constant_upper_bound_closed_form():
    # root of u^2 + u - 2 = 0 is 1, inflated by 10%
    assert constant_upper_bound(-1.0, 1.0, 2.0) == pytest.approx(1.1, abs=1e-15)


def test_symmetric_bounds_coincide():
    g = build_grid(1, nx=9, nt=5)
    s = construct_sector_bounds(nl_spec(g, q=lambda x, t: 1 + x * t))
    np.testing.assert_array_equal(s.u_upper.values, s.m_upper.values)


def test_linear_bounds_with_tiny_source():
    g = build_grid(1, nx=9, nt=9, T=0.5)
    spec = ProblemSpec(g, 1.0, 1.0, -1.0, -1.0, LinearCoupling(1.0, 1.0, 1e-14, 1e-14))
    s = construct_sector_bounds(spec)
    rho_e = np.exp(s.delta * g.times)[:, None]
    np.testing.assert_allclose(s.u_upper.flat, rho_e * np.ones(g.n_nodes), atol=1e-12)


def test_zero_bound_falls_back_to_margin():
    assert constant_upper_bound(-1.0, 1.0, 0.0) == pytest.approx(0.1)
    with pytest.raises(ProblemError):
        constant_upper_bound(-1.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# scalar solve
# --------------------------------------------------------------------------
def test_scalar_zero_source_gives_zero():
    g = build_grid(1, nx=9, nt=5)
    assert np.all(scalar_parabolic_solve(g, 1.0, None, -1.0, 0.0).values == 0)


def test_scalar_steady_state_max():
    g = build_grid(1, nx=65, nt=201, T=5.0)
    u = scalar_parabolic_solve(g, 1.0, None, 0.0, 1.0).flat
    x = g.axes[0]
    np.testing.assert_allclose(u[-1], x * (1 - x) / 2, atol=1e-3)
    assert u[-1].max() == pytest.approx(1 / 8, abs=1e-3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), vel=st.floats(-20, 20))
def test_scalar_max_principle(seed, vel):
    g = build_grid(1, nx=17, nt=9, T=0.5)
    rng = np.random.default_rng(seed)
    src = rng.random((g.nt, g.n_nodes))
    u = scalar_parabolic_solve(g, 0.05, [vel], -1.0, src).flat
    assert u.min() >= 0


def test_scalar_rejects_large_reaction():
    g = build_grid(1, nx=9, nt=3, T=1.0)
    with pytest.raises(ProblemError):
        scalar_parabolic_solve(g, 1.0, None, 10.0, 1.0)


# --------------------------------------------------------------------------
# monotone iteration
# --------------------------------------------------------------------------
def test_problem_spec_validation():
    g = build_grid(1, nx=9, nt=3)
    with pytest.raises(ProblemError, match="negative"):
        nl_spec(g, l=lambda x, t: x - 0.5)
    with pytest.raises(ProblemError, match="positive"):
        nl_spec(g, d=0.0)
    with pytest.raises(ProblemError, match="length"):
        nl_spec(g, alpha=[1.0, 2.0])


def test_zero_sources_give_zero_solution():
    g = build_grid(1, nx=9, nt=5)
    sol = monotone_solve(nl_spec(g, q=0.0))
    assert np.abs(sol.u.values).max() <= 1e-9 and np.abs(sol.m.values).max() <= 1e-9


def test_symmetric_problem_gives_equal_components():
    g = build_grid(1, nx=17, nt=9)
    sol = monotone_solve(nl_spec(g, q=lambda x, t: 1 + x * t, alpha=[0.5], beta=[0.5]))
    np.testing.assert_allclose(sol.u.values, sol.m.values, atol=1e-9)


def test_monotone_matches_newton_oracle():
    g = build_grid(1, nx=33, nt=33, T=0.5)
    sol = monotone_solve(nl_spec(g), tol=1e-9)
    U, M = newton_oracle(g, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 0.5)
    assert np.abs(sol.u.flat - U).max() <= 1e-8
    assert np.abs(sol.m.flat - M).max() <= 1e-8


def test_iterates_ordered_and_gap_nonincreasing():
    g = build_grid(1, nx=17, nt=17, T=1.0)
    sol = monotone_solve(nl_spec(g, l=lambda x, t: -1 - x * t, q=lambda x, t: 1 + x), tol=1e-10)
    assert sol.monotonicity_violation <= 1e-12
    assert np.all(np.diff(sol.gaps) <= 1e-12)
    assert sol.residual <= 1e-10


def test_comparison_and_positivity():
    g = build_grid(1, nx=17, nt=9)
    sol = monotone_solve(nl_spec(g, q=2.0, a=0.5))
    u, s = sol.u.flat, sol.sector
    assert u.min() >= -1e-12 and (u - s.u_upper.flat).max() <= 1e-12
    assert u[1:, g.interior_mask].min() > 0
    assert np.all(u[0] == 0)


def test_max_iter_exceeded():
    g = build_grid(1, nx=9, nt=5)
    with pytest.raises(SolverError, match="did not converge"):
        monotone_solve(nl_spec(g), tol=1e-15, max_iter=2)


def test_discrete_residual_small():
    g = build_grid(1, nx=17, nt=9)
    spec = nl_spec(g)
    sol = monotone_solve(spec, tol=1e-11)
    assert discrete_residual(spec, sol.u.flat, sol.m.flat) <= 1e-8


def test_neumann_monotone_solve():
    g = build_grid(1, nx=17, nt=9)
    sol = monotone_solve(nl_spec(g, boundary=NEUMANN, q=lambda x, t: 1 + x))
    assert sol.u.min() >= 0 and sol.u.flat[1:].min() > 0


# --------------------------------------------------------------------------
# linear coupling
# --------------------------------------------------------------------------
def lin_spec(g, b1=0.5, b2=0.3, q1=1.0, q2=2.0, **kw):
    return ProblemSpec(g, 1.0, 0.5, lambda x, t: -1 - x, -2.0, LinearCoupling(b1, b2, q1, q2), **kw)


def test_decoupled_linear_equals_scalar_solves():
    g = build_grid(1, nx=17, nt=9)
    sol = linear_coupled_solve(lin_spec(g, b1=0.0, b2=0.0))
    u = scalar_parabolic_solve(g, 1.0, None, lambda x, t: -1 - x, 1.0)
    m = scalar_parabolic_solve(g, 0.5, None, -2.0, 2.0)
    np.testing.assert_allclose(sol.u.values, u.values, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(sol.m.values, m.values, rtol=1e-13, atol=1e-15)


def test_linear_positive_interior():
    g = build_grid(1, nx=17, nt=9)
    sol = linear_coupled_solve(lin_spec(g))
    assert sol.u.flat[1:, g.interior_mask].min() > 0
    assert sol.m.flat[1:, g.interior_mask].min() > 0


def test_linear_direct_matches_monotone():
    g = build_grid(1, nx=17, nt=17, T=1.0)
    spec = lin_spec(g, alpha=[0.7], beta=[-0.4])
    a = linear_coupled_solve(spec)
    b = monotone_solve(spec, tol=1e-10)
    assert np.abs(a.u.flat - b.u.flat).max() <= 1e-8
    assert np.abs(a.m.flat - b.m.flat).max() <= 1e-8


@settings(max_examples=10, deadline=None)
@given(bump=st.floats(0.01, 2.0))
def test_linear_source_monotonicity(bump):
    g = build_grid(1, nx=17, nt=9)
    base = linear_coupled_solve(lin_spec(g)).u.flat
    more = linear_coupled_solve(lin_spec(g, q1=lambda x, t: 1.0 + bump * x)).u.flat
    assert (more - base).min() >= -1e-14


def test_solve_forward_dispatch():
    g = build_grid(1, nx=9, nt=5)
    assert solve_forward(lin_spec(g)).iterations == 1
    assert solve_forward(nl_spec(g)).iterations > 1
