"""
Adjoint problems and the discrete Green identities behind the measurements.

The backward problem ``-w_t - d Lap w - c . grad w - k w = 0`` with
``w(., T) = 0`` is solved by marching the transposed implicit-Euler step
matrices of the forward scheme. Boundary data enter either as Dirichlet
values of ``w`` (flux measurements) or as a weighted boundary source
(value measurements on a Neumann problem).

With these transposes the identities

    dual(rho, w) = -d * F          (Dirichlet, F = flux functional)
    dual(rho, w) = +F              (Neumann, F = value functional)

hold to round-off, where ``rho = F_1(u, m) - l u`` is the effective source of
the forward solve and ``dual`` is :func:`bioinverse.grid.dual_pairing`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import (
    DIRICHLET,
    SPACE_ONLY,
    SPACE_TIME,
    UPWIND,
    ScalarField,
    SpaceTimeGrid,
    adjoint_matrix,
    as_field,
    dual_pairing,
    stencil_matrix,
)
from .stepping import ImplicitEuler


class AdjointError(ValueError):
    pass


@dataclass
class AdjointField:
    w: ScalarField
    coefficient: ScalarField
    boundary_kind: str
    d: float
    velocity: np.ndarray


def _boundary_data(grid, h0, kind):
    h = as_field(grid, h0, kind)
    if h.min() < 0:
        raise AdjointError("boundary weight must be nonnegative")
    if np.any(h.flat[..., ~grid.obs_mask] != 0):
        raise AdjointError("boundary weight must vanish outside the observation patch")
    return h


def adjoint_parabolic_solve(grid: SpaceTimeGrid, l, d: float, alpha=None, h0=0.0,
                            boundary_kind: str = DIRICHLET, scheme: str = UPWIND) -> AdjointField:
    """Backward adjoint with terminal value zero.

    ``h0`` is a nonnegative space-time field vanishing off the observation
    patch. Dirichlet kind: ``w = h0`` on the boundary. Neumann kind: the flux
    source ``patch_weight * h0`` is injected, so ``d dw/dnu`` (plus the
    convective boundary term) equals ``h0``.

    The coefficient at level ``n`` multiplies ``w^{n-1}``, mirroring the
    forward step from ``n-1`` to ``n``; the stored field has ``w^{nt-1} = 0``.
    """
    lf = as_field(grid, l, SPACE_TIME) if not (isinstance(l, ScalarField) and l.kind == SPACE_ONLY) \
        else ScalarField(grid, np.broadcast_to(l.values, (grid.nt,) + grid.shape).copy(), SPACE_TIME)
    if not lf.max() < 0:
        raise AdjointError("adjoint coefficient must be negative")
    h = _boundary_data(grid, h0, SPACE_TIME)
    stepper = ImplicitEuler(grid, d, alpha, boundary_kind, diag=-lf.flat, scheme=scheme)
    if boundary_kind == DIRICHLET:
        data = h.flat
    else:
        data = h.flat * (grid.patch_weights / grid.space_weights)[None, :]
    w = stepper.march_adjoint(boundary_data=data)
    return AdjointField(ScalarField(grid, w.reshape((grid.nt,) + grid.shape), SPACE_TIME),
                        lf, boundary_kind, float(d), stepper.velocity)


def elliptic_matrix(grid: SpaceTimeGrid, d: float, c) -> tuple:
    """Interior system of ``-d Lap - diag(c)``: ``(M_II, A_IB)``."""
    A = stencil_matrix(grid, d, None)
    I, B = grid.interior_index, grid.boundary_index
    cvals = as_field(grid, c, SPACE_ONLY).flat
    M = A[I][:, I] - sp.diags(cvals[I])
    return sp.csc_matrix(M), A[I][:, B].tocsr()


def adjoint_elliptic_solve(grid: SpaceTimeGrid, l, d: float, h0=0.0) -> AdjointField:
    """``-d Lap w - l w = 0`` in the interior, ``w = h0`` on the boundary."""
    lf = as_field(grid, l, SPACE_ONLY)
    if not lf.max() < 0:
        raise AdjointError("adjoint coefficient must be negative")
    h = _boundary_data(grid, h0, SPACE_ONLY)
    M, A_IB = elliptic_matrix(grid, d, lf)
    I, B = grid.interior_index, grid.boundary_index
    w = np.zeros(grid.n_nodes)
    w[B] = h.flat[B]
    w[I] = splu(M).solve(-(A_IB @ w[B]))
    return AdjointField(ScalarField(grid, w.reshape(grid.shape), SPACE_ONLY), lf, DIRICHLET,
                        float(d), np.zeros(grid.dim))


# --------------------------------------------------------------------------
# Measurement functionals
# --------------------------------------------------------------------------
def consistent_flux(grid: SpaceTimeGrid, u: np.ndarray, d: float, velocity=None,
                    scheme: str = UPWIND) -> np.ndarray:
    """Matrix-consistent outward flux ``d(u)/dnu`` on boundary nodes.

    ``(A*_IB)^T W u_I / (d mu_b)`` with ``A*`` the adjoint stencil; this is
    the exact dual of injecting Dirichlet data into the adjoint, so the flux
    pairing reproduces the volume pairing without truncation error.
    ``u`` is flat (n_nodes,) or (nt, n_nodes). Nodes with zero patch weight
    (corners, off-patch nodes) get the unnormalised value ``mu_b = 1``.
    """
    As = adjoint_matrix(grid, d, velocity, DIRICHLET, scheme)
    I = grid.interior_index
    coupling = As[I].T  # (n_nodes, n_interior)
    wI = grid.space_weights[I]
    mu = np.where(grid.patch_weights > 0, grid.patch_weights, 1.0)
    uu = np.atleast_2d(u)
    out = (coupling @ (wI[:, None] * uu[:, I].T)).T / (d * mu[None, :])
    out[:, grid.interior_mask] = 0.0
    return out if np.ndim(u) == 2 else out[0]


def flux_functional(grid: SpaceTimeGrid, u: np.ndarray, h: np.ndarray, d: float, velocity=None,
                    scheme: str = UPWIND) -> float:
    """``sum_n dt sum_b mu_b h_b^{n-1} flux_b(u^n)`` over the patch."""
    if np.ndim(u) == 1:
        return float(np.sum(grid.patch_weights * h * consistent_flux(grid, u, d, velocity, scheme)))
    flux = consistent_flux(grid, u, d, velocity, scheme)
    return float(grid.dt * np.sum(h[:-1] * flux[1:] * grid.patch_weights[None, :]))


def value_functional(grid: SpaceTimeGrid, u: np.ndarray, h: np.ndarray) -> float:
    """``sum_n dt sum_b mu_b h_b^{n-1} u_b^n`` over the patch."""
    return float(grid.dt * np.sum(h[:-1] * u[1:] * grid.patch_weights[None, :]))


def duality_residual(grid: SpaceTimeGrid, rho: np.ndarray, adjoint: AdjointField, measured: float,
                     relative: bool = True) -> float:
    """Mismatch between the volume pairing and the measured boundary functional.

    ``rho`` is the flat effective source ``F_1(u, m) - l u`` of the forward
    solve; ``measured`` the flux functional (Dirichlet) or value functional
    (Neumann) of the forward solution against the adjoint's boundary data.
    """
    w = adjoint.w
    if w.grid != grid:
        raise AdjointError("adjoint lives on a different grid")
    if w.kind == SPACE_ONLY:
        wts = np.where(grid.interior_mask, grid.space_weights, 0.0)
        lhs = float(np.sum(wts * rho * w.flat))
        rhs = -adjoint.d * measured
    elif adjoint.boundary_kind == DIRICHLET:
        lhs = dual_pairing(grid, rho, w.flat, nodes=grid.interior_mask)
        rhs = -adjoint.d * measured
    else:
        lhs = dual_pairing(grid, rho, w.flat)
        rhs = measured
    diff = abs(lhs - rhs)
    if not relative:
        return diff
    scale = max(abs(lhs), abs(rhs))
    return diff / scale if scale > 0 else diff


def effective_source(spec, u: np.ndarray, m: np.ndarray, equation: int = 1) -> np.ndarray:
    """``F_i(u, m) - k_i * (own variable)``: the right side seen by the adjoint."""
    f1, f2 = spec.reaction.coupling(u, m)
    return f1 if equation == 1 else f2
