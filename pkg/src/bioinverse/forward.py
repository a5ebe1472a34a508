"""
Forward solvers for the coupled reaction-diffusion systems.

Both equations share the form ``w_t - d Lap w + c . grad w = k(x, t) w + f(u, m)``
with ``k`` the (negative) linear growth coefficient, ``l`` for ``u`` and ``v``
for ``m``. The linear part is kept in the implicit operator; the coupling
``f`` is handled by the monotone (upper/lower) iteration, which brackets the
unique nonnegative solution between a constant or ``p + rho e^{delta t}``
upper solution and the zero lower solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import (
    BOUNDARY_KINDS,
    DIRICHLET,
    SPACE_ONLY,
    SCHEMES,
    SPACE_TIME,
    UPWIND,
    ScalarField,
    SpaceTimeGrid,
    as_field,
    forward_matrix,
)
from .stepping import ImplicitEuler

SECTOR_MARGIN = 0.1
ORDER_SLACK = 1e-12


class ProblemError(ValueError):
    """Invalid problem data (violated sign hypotheses, bad shapes...)."""


class SolverError(RuntimeError):
    """A solve failed to converge or left its sector."""


# --------------------------------------------------------------------------
# Problem description
# --------------------------------------------------------------------------
@dataclass
class NonlinearPower:
    """``f1 = -a1 u^2 - sum_k b1[k] u^k m^(M-k+1) + q1`` and symmetrically for ``f2``."""

    M: int
    a1: object
    a2: object
    b1: Sequence
    b2: Sequence
    q1: object
    q2: object

    form = "nonlinear_power"
    monotonicity = "nonincreasing"

    @classmethod
    def uniform(cls, M, a1, a2, q1, q2):
        """Coupling weights equal to the self-limitation coefficient in both equations."""
        return cls(M, a1, a2, [a1] * M, [a2] * M, q1, q2)

    def bind(self, grid):
        if self.M < 1:
            raise ProblemError("M must be >= 1")
        if len(self.b1) != self.M or len(self.b2) != self.M:
            raise ProblemError(f"need {self.M} coupling fields per equation")
        b = lambda v: as_field(grid, v, SPACE_TIME)
        out = NonlinearPower(self.M, b(self.a1), b(self.a2), [b(x) for x in self.b1],
                             [b(x) for x in self.b2], b(self.q1), b(self.q2))
        if out.a1.min() <= 0 or out.a2.min() <= 0:
            raise ProblemError("a_i must be positive")
        if min(x.min() for x in out.b1 + out.b2) < 0:
            raise ProblemError("coupling coefficients b_i^(k) must be nonnegative")
        if out.q1.min() < 0 or out.q2.min() < 0:
            raise ProblemError("sources q_i must be nonnegative")
        return out

    def coupling(self, u, m):
        """Nonlinear parts ``(f1, f2)`` on flat space-time arrays."""
        M = self.M
        f1 = -self.a1.flat * u**2 + self.q1.flat
        f2 = -self.a2.flat * m**2 + self.q2.flat
        for k in range(1, M + 1):
            f1 = f1 - self.b1[k - 1].flat * u**k * m ** (M - k + 1)
            f2 = f2 - self.b2[k - 1].flat * m**k * u ** (M - k + 1)
        return f1, f2

    def shifts(self, u_up: float, m_up: float):
        """Lipschitz shifts from ``|df_i/d(own variable)|`` at the sector corner."""
        M = self.M
        K1 = 2 * self.a1.max() * u_up
        K2 = 2 * self.a2.max() * m_up
        for k in range(1, M + 1):
            K1 += k * self.b1[k - 1].max() * u_up ** (k - 1) * m_up ** (M - k + 1)
            K2 += k * self.b2[k - 1].max() * m_up ** (k - 1) * u_up ** (M - k + 1)
        return K1, K2


@dataclass
class LinearCoupling:
    """``f1 = b1 m + q1``, ``f2 = b2 u + q2``."""

    b1: object
    b2: object
    q1: object
    q2: object

    form = "linear_coupling"
    monotonicity = "nondecreasing"

    def bind(self, grid):
        b = lambda v: as_field(grid, v, SPACE_TIME)
        out = LinearCoupling(b(self.b1), b(self.b2), b(self.q1), b(self.q2))
        if out.b1.min() < 0 or out.b2.min() < 0:
            raise ProblemError("coupling coefficients b_i must be nonnegative")
        if out.q1.min() < 0 or out.q2.min() < 0:
            raise ProblemError("sources q_i must be nonnegative")
        return out

    def coupling(self, u, m):
        return self.b1.flat * m + self.q1.flat, self.b2.flat * u + self.q2.flat

    def shifts(self, u_up, m_up):
        # f_i does not depend on its own variable
        return 0.0, 0.0


@dataclass
class ProblemSpec:
    """Coupled parabolic problem on a grid.

    ``l`` and ``v`` may be scalars, callables ``f(x[, y], t)``, arrays or
    fields; they are stored as space-time fields and must be negative.
    Initial data are zero.
    """

    grid: SpaceTimeGrid
    d1: float
    d2: float
    l: object
    v: object
    reaction: object
    alpha: object = None
    beta: object = None
    boundary: str = DIRICHLET
    scheme: str = UPWIND

    def __post_init__(self):
        g = self.grid
        if self.scheme not in SCHEMES:
            raise ProblemError(f"unknown convection scheme {self.scheme!r}")
        if not (self.d1 > 0 and self.d2 > 0):
            raise ProblemError("diffusion constants must be positive")
        if self.boundary not in BOUNDARY_KINDS:
            raise ProblemError(f"unknown boundary kind {self.boundary!r}")
        zero = np.zeros(g.dim)
        self.alpha = zero if self.alpha is None else np.atleast_1d(np.asarray(self.alpha, float))
        self.beta = zero if self.beta is None else np.atleast_1d(np.asarray(self.beta, float))
        if self.alpha.shape != (g.dim,) or self.beta.shape != (g.dim,):
            raise ProblemError(f"convection vectors must have length {g.dim}")
        self.l = _space_time(g, self.l)
        self.v = _space_time(g, self.v)
        for name, fld in (("l", self.l), ("v", self.v)):
            if not fld.max() < 0:
                raise ProblemError(f"{name} must be negative, max is {fld.max()}")
        self.reaction = self.reaction.bind(g)

    def with_(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)


def _space_time(grid, value):
    if isinstance(value, ScalarField) and value.kind == SPACE_ONLY:
        return ScalarField(grid, np.broadcast_to(value.values, (grid.nt,) + grid.shape).copy(), SPACE_TIME)
    return as_field(grid, value, SPACE_TIME)


@dataclass
class SectorBounds:
    u_upper: ScalarField
    m_upper: ScalarField
    u_lower: ScalarField
    m_lower: ScalarField
    delta: float | None = None


@dataclass
class ForwardSolution:
    u: ScalarField
    m: ScalarField
    iterations: int
    residual: float
    sector: SectorBounds | None = None
    gaps: list = field(default_factory=list)
    # worst increase of an upper iterate / decrease of a lower iterate
    monotonicity_violation: float = 0.0


# --------------------------------------------------------------------------
# Sector construction
# --------------------------------------------------------------------------
def constant_upper_bound(l_sup: float, a_inf: float, q_sup: float, margin: float = SECTOR_MARGIN) -> float:
    """Positive root of ``a u^2 - l u - q = 0`` inflated by ``1 + margin``.

    With ``q_sup == 0`` the root is zero; ``margin`` itself is returned so the
    sector stays strictly ordered.
    """
    if a_inf <= 0:
        raise ProblemError("a_i must be positive")
    base = (l_sup + math.sqrt(l_sup**2 + 4 * a_inf * q_sup)) / (2 * a_inf)
    if not math.isfinite(base) or base < 0:
        raise ProblemError(f"upper bound {base} is not finite and nonnegative")
    return base * (1 + margin) if base > 0 else margin


def scalar_parabolic_solve(grid, d, alpha, c, source, boundary=DIRICHLET,
                           boundary_values=None, initial=None, scheme=UPWIND) -> ScalarField:
    """Implicit Euler for ``w_t - d Lap w + alpha . grad w = c w + source``.

    Zero initial and boundary data unless given. ``c`` must stay below
    ``1/dt`` so every step matrix is an M-matrix.
    """
    if not d > 0:
        raise ProblemError("diffusion constant must be positive")
    cf = _space_time(grid, c)
    if cf.max() >= 1.0 / grid.dt:
        raise ProblemError("reaction coefficient c must be < 1/dt")
    stepper = ImplicitEuler(grid, d, alpha, boundary, diag=-cf.flat, scheme=scheme)
    src = _space_time(grid, source).flat
    bv = None if boundary_values is None else _space_time(grid, boundary_values).flat
    init = None if initial is None else as_field(grid, initial, SPACE_ONLY).flat
    out = stepper.march(src, initial=init, boundary_values=bv)
    return ScalarField(grid, out.reshape((grid.nt,) + grid.shape), SPACE_TIME)


def construct_sector_bounds(spec: ProblemSpec, rho: float = 1.0, max_doublings: int = 60) -> SectorBounds:
    """Upper solution for the nonnegative sector; the lower solution is zero.

    Nonlinear power form: constant bounds from the quadratic inequality.
    Linear coupling form: ``p_i + rho e^{delta t}`` with ``p_i`` the
    uncoupled heat solution and ``delta`` the smallest power of two for which
    the discrete upper-solution inequalities hold at every level.
    """
    g = spec.grid
    r = spec.reaction
    zero = ScalarField(g, np.zeros((g.nt,) + g.shape), SPACE_TIME)
    if r.form == "nonlinear_power":
        ub = constant_upper_bound(spec.l.max(), r.a1.min(), r.q1.max())
        mb = constant_upper_bound(spec.v.max(), r.a2.min(), r.q2.max())
        full = lambda c: ScalarField(g, np.full((g.nt,) + g.shape, c), SPACE_TIME)
        return SectorBounds(full(ub), full(mb), zero, zero)

    p1 = scalar_parabolic_solve(g, spec.d1, spec.alpha, 0.0, r.q1, spec.boundary, scheme=spec.scheme).flat
    p2 = scalar_parabolic_solve(g, spec.d2, spec.beta, 0.0, r.q2, spec.boundary, scheme=spec.scheme).flat
    l, v = spec.l.flat, spec.v.flat
    b1, b2 = r.b1.flat, r.b2.flat
    t = g.times[1:, None]
    delta = 1.0
    for _ in range(max_doublings):
        growth = rho * (1 - math.exp(-delta * g.dt)) / g.dt
        decay = np.exp(-delta * t)
        ok1 = growth >= (l[1:] * p1[1:] + b1[1:] * p2[1:]) * decay + (l[1:] + b1[1:]) * rho
        ok2 = growth >= (v[1:] * p2[1:] + b2[1:] * p1[1:]) * decay + (v[1:] + b2[1:]) * rho
        if ok1.all() and ok2.all():
            break
        delta *= 2
    else:
        raise ProblemError("no exponential rate makes p_i + rho e^{delta t} an upper solution")
    E = rho * np.exp(delta * g.times)[:, None]
    shape = (g.nt,) + g.shape
    return SectorBounds(
        ScalarField(g, (p1 + E).reshape(shape), SPACE_TIME),
        ScalarField(g, (p2 + E).reshape(shape), SPACE_TIME),
        zero, zero, delta,
    )


# --------------------------------------------------------------------------
# Monotone iteration
# --------------------------------------------------------------------------
def monotone_solve(spec: ProblemSpec, sector: SectorBounds | None = None,
                   tol: float = 1e-9, max_iter: int = 200) -> ForwardSolution:
    """Upper/lower monotone iteration for the coupled system.

    Each sweep solves four decoupled linear problems
    ``(L - k + K) w_new = K w + f(...)``; with a quasi-monotone nonincreasing
    coupling the upper ``u`` iterate is paired with the lower ``m`` iterate
    and vice versa, with a nondecreasing coupling uppers pair with uppers.
    Returns the midpoint of the final pair and the sup-gap as residual.
    """
    g = spec.grid
    r = spec.reaction
    if sector is None:
        sector = construct_sector_bounds(spec)
    shape = (g.nt,) + g.shape
    if not (np.any(r.q1.flat) or np.any(r.q2.flat)):
        # zero data: the zero pair is an exact solution inside the sector
        zero = ScalarField(g, np.zeros(shape), SPACE_TIME)
        return ForwardSolution(zero, ScalarField(g, np.zeros(shape), SPACE_TIME), 0, 0.0, sector, [0.0], 0.0)
    K1, K2 = r.shifts(sector.u_upper.max(), sector.m_upper.max())
    step_u = ImplicitEuler(g, spec.d1, spec.alpha, spec.boundary, diag=-spec.l.flat + K1, scheme=spec.scheme)
    step_m = ImplicitEuler(g, spec.d2, spec.beta, spec.boundary, diag=-spec.v.flat + K2, scheme=spec.scheme)

    u_hi, m_hi = sector.u_upper.flat.copy(), sector.m_upper.flat.copy()
    u_lo, m_lo = sector.u_lower.flat.copy(), sector.m_lower.flat.copy()
    cross = r.monotonicity == "nonincreasing"
    gaps, violation = [], 0.0
    gap = max((u_hi - u_lo).max(), (m_hi - m_lo).max())
    for it in range(1, max_iter + 1):
        if cross:
            f1_uhi, f2_mlo = r.coupling(u_hi, m_lo)
            f1_ulo, f2_mhi = r.coupling(u_lo, m_hi)
        else:
            f1_uhi, f2_mhi = r.coupling(u_hi, m_hi)
            f1_ulo, f2_mlo = r.coupling(u_lo, m_lo)
        new_u_hi = step_u.march(K1 * u_hi + f1_uhi)
        new_u_lo = step_u.march(K1 * u_lo + f1_ulo)
        new_m_hi = step_m.march(K2 * m_hi + f2_mhi)
        new_m_lo = step_m.march(K2 * m_lo + f2_mlo)
        violation = max(violation,
                        (new_u_hi - u_hi).max(), (new_m_hi - m_hi).max(),
                        (u_lo - new_u_lo).max(), (m_lo - new_m_lo).max())
        u_hi, u_lo, m_hi, m_lo = new_u_hi, new_u_lo, new_m_hi, new_m_lo
        order = min((u_hi - u_lo).min(), (m_hi - m_lo).min())
        if order < -ORDER_SLACK or violation > ORDER_SLACK * max(1.0, np.abs(u_hi).max()):
            raise SolverError(
                f"sector ordering violated at iteration {it} "
                f"(order {order:.3e}, monotonicity {violation:.3e})"
            )
        gap = max((u_hi - u_lo).max(), (m_hi - m_lo).max())
        gaps.append(gap)
        if gap <= tol:
            break
    else:
        raise SolverError(f"monotone iteration did not converge in {max_iter} sweeps (gap {gap:.3e})")
    u = ScalarField(g, (0.5 * (u_hi + u_lo)).reshape(shape), SPACE_TIME)
    m = ScalarField(g, (0.5 * (m_hi + m_lo)).reshape(shape), SPACE_TIME)
    return ForwardSolution(u, m, it, float(gap), sector, gaps, float(violation))


def linear_coupled_solve(spec: ProblemSpec) -> ForwardSolution:
    """Implicit Euler on the 2x2 block system, one sparse solve per level."""
    g = spec.grid
    r = spec.reaction
    if r.form != "linear_coupling":
        raise ProblemError("linear_coupled_solve needs the linear coupling form")
    su = ImplicitEuler(g, spec.d1, spec.alpha, spec.boundary, scheme=spec.scheme)
    sm = ImplicitEuler(g, spec.d2, spec.beta, spec.boundary, scheme=spec.scheme)
    uk = su.unknown
    n_uk = len(uk)
    eye = sp.identity(n_uk, format="csc") / g.dt
    l, v = spec.l.flat, spec.v.flat
    b1, b2 = r.b1.flat, r.b2.flat
    q1, q2 = r.q1.flat, r.q2.flat
    u = np.zeros((g.nt, g.n_nodes))
    m = np.zeros((g.nt, g.n_nodes))
    lu, key = None, None
    for n in range(1, g.nt):
        k = np.concatenate([l[n, uk], v[n, uk], b1[n, uk], b2[n, uk]])
        if key is None or not np.array_equal(k, key):
            block = sp.bmat([
                [eye + su.A_uu - sp.diags(l[n, uk]), -sp.diags(b1[n, uk])],
                [-sp.diags(b2[n, uk]), eye + sm.A_uu - sp.diags(v[n, uk])],
            ], format="csc")
            lu, key = splu(block), k
        rhs = np.concatenate([u[n - 1, uk] / g.dt + q1[n, uk], m[n - 1, uk] / g.dt + q2[n, uk]])
        sol = lu.solve(rhs)
        u[n, uk], m[n, uk] = sol[:n_uk], sol[n_uk:]
    shape = (g.nt,) + g.shape
    return ForwardSolution(ScalarField(g, u.reshape(shape), SPACE_TIME),
                           ScalarField(g, m.reshape(shape), SPACE_TIME), 1, 0.0)


def discrete_residual(spec: ProblemSpec, u: np.ndarray, m: np.ndarray):
    """Sup-norm residual of the implicit-Euler equations at levels >= 1."""
    g = spec.grid
    A1 = forward_matrix(g, spec.d1, spec.alpha, spec.boundary, spec.scheme)
    A2 = forward_matrix(g, spec.d2, spec.beta, spec.boundary, spec.scheme)
    f1, f2 = spec.reaction.coupling(u, m)
    r1 = (u[1:] - u[:-1]) / g.dt + (A1 @ u[1:].T).T - spec.l.flat[1:] * u[1:] - f1[1:]
    r2 = (m[1:] - m[:-1]) / g.dt + (A2 @ m[1:].T).T - spec.v.flat[1:] * m[1:] - f2[1:]
    if spec.boundary == DIRICHLET:
        mask = g.interior_mask
        r1, r2 = r1[:, mask], r2[:, mask]
    return float(max(np.abs(r1).max(), np.abs(r2).max()))


def solve_forward(spec: ProblemSpec, tol: float = 1e-9, max_iter: int = 200) -> ForwardSolution:
    """Dispatch: exact block solve for linear coupling, monotone iteration otherwise."""
    if spec.reaction.form == "linear_coupling":
        return linear_coupled_solve(spec)
    return monotone_solve(spec, tol=tol, max_iter=max_iter)
