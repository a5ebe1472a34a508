"""
Steady coupled competition system and its uniqueness check.

    -d1 Lap u - l u = b1 f(u, m) + q1,   -d2 Lap m - v m = b2 f(u, m) + q2,
    f(u, m) = -sum_{k=1}^M u^k m^(M-k+1),   u = m = 0 on the boundary.

The steady state is reached by marching the parabolic system from the two
ordered initial states ``(w1*, 0)`` and ``(0, w2*)``, where ``w_i*`` solve
the uncoupled problems. Both runs must land on the same state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .forward import ProblemError, SolverError
from .grid import SPACE_ONLY, ScalarField, SpaceTimeGrid, as_field, stencil_matrix

MARCH_STEPS = 256


@dataclass
class EllipticProblem:
    grid: SpaceTimeGrid
    d1: float
    d2: float
    l: object
    v: object
    b1: float
    b2: float
    M: int
    q1: object
    q2: object

    def __post_init__(self):
        g = self.grid
        if not (self.d1 > 0 and self.d2 > 0):
            raise ProblemError("diffusion constants must be positive")
        if self.M < 1:
            raise ProblemError("M must be >= 1")
        if not (self.b1 > 0 and self.b2 > 0):
            raise ProblemError("b_i must be positive constants")
        self.l = as_field(g, self.l, SPACE_ONLY)
        self.v = as_field(g, self.v, SPACE_ONLY)
        self.q1 = as_field(g, self.q1, SPACE_ONLY)
        self.q2 = as_field(g, self.q2, SPACE_ONLY)
        for name, fld in (("l", self.l), ("v", self.v)):
            if not fld.max() < 0:
                raise ProblemError(f"{name} must be negative, max is {fld.max()}")
        if self.q1.min() < 0 or self.q2.min() < 0:
            raise ProblemError("sources q_i must be nonnegative")

    def f(self, u, m):
        out = np.zeros_like(u)
        for k in range(1, self.M + 1):
            out -= u**k * m ** (self.M - k + 1)
        return out

    def shifts(self, rho1: float, rho2: float):
        """``b_i sup |df/d(own variable)|`` over ``[0, rho1] x [0, rho2]``."""
        M = self.M
        K1 = self.b1 * sum(k * rho1 ** (k - 1) * rho2 ** (M - k + 1) for k in range(1, M + 1))
        K2 = self.b2 * sum((M - k + 1) * rho1**k * rho2 ** (M - k) for k in range(1, M + 1))
        return K1, K2


@dataclass
class EllipticSolution:
    u: ScalarField
    m: ScalarField
    agreement_gap: float
    # (u, m) limits from (w1*, 0) and from (0, w2*)
    upper_pair: tuple
    lower_pair: tuple
    w_star: tuple
    residual: float
    steps: int


def elliptic_scalar_solve(grid: SpaceTimeGrid, d: float, c, source, boundary_values=None) -> ScalarField:
    """Solve ``(-d Lap - c) w = source`` with Dirichlet data (zero by default)."""
    if not d > 0:
        raise ProblemError("diffusion constant must be positive")
    cf = as_field(grid, c, SPACE_ONLY)
    if not cf.max() < 0:
        raise ProblemError("reaction coefficient must be negative for coercivity")
    src = as_field(grid, source, SPACE_ONLY).flat
    A = stencil_matrix(grid, d)
    I, B = grid.interior_index, grid.boundary_index
    w = np.zeros(grid.n_nodes)
    if boundary_values is not None:
        w[B] = as_field(grid, boundary_values, SPACE_ONLY).flat[B]
    M = sp.csc_matrix(A[I][:, I] - sp.diags(cf.flat[I]))
    w[I] = splu(M).solve(src[I] - A[I][:, B] @ w[B])
    return ScalarField(grid, w.reshape(grid.shape), SPACE_ONLY)


def elliptic_residual(prob: EllipticProblem, u: np.ndarray, m: np.ndarray) -> float:
    """Sup-norm residual of the discrete steady system at interior nodes."""
    g = prob.grid
    I = g.interior_index
    f = prob.f(u, m)
    r1 = stencil_matrix(g, prob.d1) @ u - prob.l.flat * u - prob.b1 * f - prob.q1.flat
    r2 = stencil_matrix(g, prob.d2) @ m - prob.v.flat * m - prob.b2 * f - prob.q2.flat
    return float(max(np.abs(r1[I]).max(), np.abs(r2[I]).max()))


def _march_to_steady(prob, u, m, K, tol, t_march, max_doublings):
    """Shifted semi-implicit march until successive levels and the residual fall below ``tol``."""
    g = prob.grid
    I, B = g.interior_index, g.boundary_index
    K1, K2 = K
    A1 = stencil_matrix(g, prob.d1)[I][:, I]
    A2 = stencil_matrix(g, prob.d2)[I][:, I]
    l, v, q1, q2 = prob.l.flat[I], prob.v.flat[I], prob.q1.flat[I], prob.q2.flat[I]
    # boundary values stay zero, so the interior blocks carry the whole operator
    if np.any(u[B] != 0) or np.any(m[B] != 0):
        raise ProblemError("initial states must vanish on the boundary")
    uI, mI = u[I].copy(), m[I].copy()
    steps, diff = 0, np.inf
    for _ in range(max_doublings + 1):
        dt = t_march / MARCH_STEPS
        eye = sp.identity(len(I), format="csc") / dt
        lu1 = splu(sp.csc_matrix(eye + A1 - sp.diags(l - K1)))
        lu2 = splu(sp.csc_matrix(eye + A2 - sp.diags(v - K2)))
        for _ in range(MARCH_STEPS):
            f = prob.f(uI, mI)
            new_u = lu1.solve(uI / dt + K1 * uI + prob.b1 * f + q1)
            new_m = lu2.solve(mI / dt + K2 * mI + prob.b2 * f + q2)
            diff = max(np.abs(new_u - uI).max(), np.abs(new_m - mI).max())
            uI, mI = new_u, new_m
            steps += 1
            if diff < tol:
                f = prob.f(uI, mI)
                res = max(np.abs(A1 @ uI - l * uI - prob.b1 * f - q1).max(),
                          np.abs(A2 @ mI - v * mI - prob.b2 * f - q2).max())
                if res <= tol:
                    u, m = np.zeros(g.n_nodes), np.zeros(g.n_nodes)
                    u[I], m[I] = uI, mI
                    return u, m, steps
        t_march *= 2
    raise SolverError(f"steady state not reached after {steps} steps (last change {diff:.3e})")


def elliptic_coupled_solve(prob: EllipticProblem, tol: float = 1e-10, t_march: float = 4.0,
                           max_doublings: int = 12) -> EllipticSolution:
    """Steady state from both ordered initial states; reports their sup-gap."""
    g = prob.grid
    w1 = elliptic_scalar_solve(g, prob.d1, prob.l, prob.q1).flat
    w2 = elliptic_scalar_solve(g, prob.d2, prob.v, prob.q2).flat
    K = prob.shifts(max(w1.max(), 0.0), max(w2.max(), 0.0))
    zero = np.zeros(g.n_nodes)
    u_hi, m_lo, n1 = _march_to_steady(prob, w1, zero, K, tol, t_march, max_doublings)
    u_lo, m_hi, n2 = _march_to_steady(prob, zero, w2, K, tol, t_march, max_doublings)
    gap = float(max(np.abs(u_hi - u_lo).max(), np.abs(m_hi - m_lo).max()))
    u, m = 0.5 * (u_hi + u_lo), 0.5 * (m_hi + m_lo)
    fld = lambda a: ScalarField(g, a.reshape(g.shape), SPACE_ONLY)
    return EllipticSolution(fld(u), fld(m), gap, (fld(u_hi), fld(m_lo)), (fld(u_lo), fld(m_hi)),
                            (fld(w1), fld(w2)), elliptic_residual(prob, u, m), n1 + n2)


def steady_uniqueness_certificate(pair_a, pair_b, prob: EllipticProblem) -> float:
    """``sup |b2 d1 xi1 + b1 d2 xi2|`` with ``xi1 = u_a - u_b``, ``xi2 = m_b - m_a``.

    ``pair_a`` plays the (upper u, lower m) role and ``pair_b`` the
    (lower u, upper m) role; for two genuine steady states this is zero.
    """
    val = lambda x: x.flat if isinstance(x, ScalarField) else np.asarray(x, float).ravel()
    ua, ma = map(val, pair_a)
    ub, mb = map(val, pair_b)
    W = prob.b2 * prob.d1 * (ua - ub) + prob.b1 * prob.d2 * (mb - ma)
    return float(np.abs(W).max())
