"""Implicit-Euler time stepping shared by the forward and adjoint solvers."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import DIRICHLET, NEUMANN, UPWIND, SpaceTimeGrid, adjoint_matrix, forward_matrix


class ImplicitEuler:
    """Backward-Euler stepper for ``u_t + A u + s(x, t) u = f``.

    ``A`` is the convection-diffusion matrix (upwind unless ``scheme`` says otherwise) and ``s`` an extra
    diagonal (e.g. ``-l + K``). The step matrix of level ``n`` is
    ``M_n = I/dt + A + diag(s^n)`` restricted to the unknown nodes (interior
    for Dirichlet, all nodes for Neumann). Factorizations are computed once
    per distinct level and reused by both marching directions.
    """

    def __init__(self, grid: SpaceTimeGrid, d: float, velocity, boundary: str, diag=None,
                 scheme: str = UPWIND):
        if boundary not in (DIRICHLET, NEUMANN):
            raise ValueError(f"unknown boundary kind {boundary!r}")
        self.grid = grid
        self.d = float(d)
        self.velocity = np.zeros(grid.dim) if velocity is None else np.atleast_1d(np.asarray(velocity, float))
        self.boundary = boundary
        self.scheme = scheme
        A = forward_matrix(grid, d, self.velocity, boundary, scheme)
        As = adjoint_matrix(grid, d, self.velocity, boundary, scheme)
        if boundary == DIRICHLET:
            self.unknown = grid.interior_index
            self.fixed = grid.boundary_index
        else:
            self.unknown = np.arange(grid.n_nodes)
            self.fixed = np.array([], dtype=int)
        uk, fx = self.unknown, self.fixed
        self.A_uu = A[uk][:, uk].tocsc()
        self.A_uf = A[uk][:, fx].tocsr()
        self.As_uf = As[uk][:, fx].tocsr()
        self.weights = grid.space_weights[uk]
        if diag is None:
            diag = np.zeros((grid.nt, grid.n_nodes))
        diag = np.broadcast_to(np.asarray(diag, dtype=float), (grid.nt, grid.n_nodes))
        self._factors = [None]
        prev_key, prev_lu = None, None
        eye = sp.identity(len(uk), format="csc") / grid.dt
        for n in range(1, grid.nt):
            key = diag[n, uk]
            if prev_key is None or not np.array_equal(key, prev_key):
                if np.any(1.0 / grid.dt + key <= 0):
                    raise ValueError("step matrix is not an M-matrix: reaction too large for dt")
                prev_lu = splu(sp.csc_matrix(eye + self.A_uu + sp.diags(key)))
                prev_key = key
            self._factors.append(prev_lu)

    # ------------------------------------------------------------------
    def march(self, source, initial=None, boundary_values=None):
        """Forward march; returns flat ``(nt, n_nodes)`` values."""
        g = self.grid
        uk, fx = self.unknown, self.fixed
        out = np.zeros((g.nt, g.n_nodes))
        if initial is not None:
            out[0] = initial
        src = np.broadcast_to(source, (g.nt, g.n_nodes))
        bv = None
        if boundary_values is not None and len(fx):
            bv = np.broadcast_to(boundary_values, (g.nt, g.n_nodes))
            out[:, fx] = bv[:, fx]
        for n in range(1, g.nt):
            rhs = out[n - 1, uk] / g.dt + src[n, uk]
            if bv is not None:
                rhs = rhs - self.A_uf @ bv[n, fx]
            out[n, uk] = self._factors[n].solve(rhs)
        return out

    def march_adjoint(self, boundary_data=None, terminal=None):
        """Backward march with the transposed step matrices.

        ``w^{n-1} = W^-1 M_n^{-T} W (w^n/dt + b^{n-1})`` for ``n = nt-1 .. 1``,
        starting from ``w^{nt-1} = terminal`` (zero by default). For Dirichlet
        problems ``boundary_data`` holds the boundary values of ``w`` and
        ``b`` is the coupling through the adjoint stencil; for Neumann problems
        ``boundary_data`` is the weighted flux source already divided by the
        trapezoidal weights.
        """
        g = self.grid
        uk, fx = self.unknown, self.fixed
        w = np.zeros((g.nt, g.n_nodes))
        if terminal is not None:
            w[-1] = terminal
        bd = None if boundary_data is None else np.broadcast_to(boundary_data, (g.nt, g.n_nodes))
        if bd is not None and self.boundary == DIRICHLET:
            w[:-1, fx] = bd[:-1, fx]
        W = self.weights
        for n in range(g.nt - 1, 0, -1):
            rhs = w[n, uk] / g.dt
            if bd is not None:
                if self.boundary == DIRICHLET:
                    rhs = rhs - self.As_uf @ bd[n - 1, fx]
                else:
                    rhs = rhs + bd[n - 1, uk]
            w[n - 1, uk] = self._factors[n].solve(W * rhs, trans="T") / W
        return w
