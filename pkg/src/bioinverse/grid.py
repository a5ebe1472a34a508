"""
Space-time lattice, nodal fields, finite-difference operators and quadrature.

The spatial domain is an axis-aligned box in the first quadrant (1D or 2D)
sampled on a vertex-centred uniform lattice that includes the boundary nodes.
Time levels are ``t_n = n * dt`` for ``n = 0 .. nt-1``.

Nodal arrays use C ordering over ``grid.shape``; space-time arrays put the
time level first, i.e. ``values.shape == (nt,) + grid.shape``.

Two families of operators live here:

* stencil operators acting on arrays (``apply_diff_operator``,
  ``boundary_trace``), used for reporting and for manufactured checks;
* assembled sparse matrices (``stencil_matrix``, ``neumann_matrix``,
  ``adjoint_matrix``) used by the solvers. The adjoint matrices are exact
  transposes of the forward ones with respect to the trapezoidal inner
  product, which is what makes the discrete Green identities hold to
  round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DIRICHLET = "dirichlet_zero"
NEUMANN = "neumann_zero"
BOUNDARY_KINDS = (DIRICHLET, NEUMANN)
UPWIND = "upwind"
CENTERED = "centered"
SCHEMES = (UPWIND, CENTERED)

SPACE_ONLY = "space_only"
SPACE_TIME = "space_time"


class GridError(ValueError):
    """Raised for invalid grid parameters or grid/field mismatches."""


def _face_names(dim):
    return [f"x{a}{s}" for a in range(dim) for s in "-+"]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform lattice over ``box x (0, T]``.

    Parameters
    ----------
    extents : tuple of (low, high) pairs, one per spatial axis
    shape : nodes per spatial axis
    nt : number of time levels, including ``t = 0``
    T : final time
    obs_faces : faces making up the observation patch, named ``"x0-"``,
        ``"x0+"``, ``"x1-"``, ``"x1+"`` (low/high side of an axis).
    """

    extents: tuple
    shape: tuple
    nt: int
    T: float
    obs_faces: tuple = ("x0+",)

    # -- basic geometry ---------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array(
            [(hi - lo) / (n - 1) for (lo, hi), n in zip(self.extents, self.shape)]
        )

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt)

    @cached_property
    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.extents, self.shape)]

    @cached_property
    def mesh(self) -> list:
        """Coordinate arrays of shape ``grid.shape`` (one per axis)."""
        return np.meshgrid(*self.axes, indexing="ij")

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(n_nodes, dim) array of node coordinates."""
        return np.stack([m.ravel() for m in self.mesh], axis=1)

    # -- boundary classification ------------------------------------------
    def face_mask(self, face: str) -> np.ndarray:
        """Flat boolean mask of the nodes lying on ``face``."""
        axis, side = int(face[1]), face[2]
        if face not in _face_names(self.dim):
            raise GridError(f"unknown face {face!r} for a {self.dim}D grid")
        index = np.indices(self.shape)[axis]
        target = 0 if side == "-" else self.shape[axis] - 1
        return (index == target).ravel()

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for face in _face_names(self.dim):
            mask |= self.face_mask(face)
        return mask

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def boundary_index(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def obs_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for face in self.obs_faces:
            mask |= self.face_mask(face)
        return mask

    @cached_property
    def outward_normals(self) -> np.ndarray:
        """(n_nodes, dim) unit outward normals; zero rows at interior nodes.

        Corner nodes get the normalised sum of the adjacent face normals.
        """
        normals = np.zeros((self.n_nodes, self.dim))
        for face in _face_names(self.dim):
            axis = int(face[1])
            normals[self.face_mask(face), axis] += -1.0 if face[2] == "-" else 1.0
        norm = np.linalg.norm(normals, axis=1)
        nz = norm > 0
        normals[nz] /= norm[nz, None]
        return normals

    # -- quadrature weights -----------------------------------------------
    @cached_property
    def space_weights(self) -> np.ndarray:
        """Trapezoidal weights over the box (flat)."""
        w = np.ones(1)
        for h, n in zip(self.spacing, self.shape):
            w1 = np.full(n, h)
            w1[[0, -1]] *= 0.5
            w = np.multiply.outer(w, w1)
        return w.ravel()

    @cached_property
    def patch_weights(self) -> np.ndarray:
        """Trapezoidal surface weights of the observation patch (flat).

        In 1D a face is a single point and carries unit (counting) weight.
        A corner shared by two patch faces collects both contributions.
        """
        mu = np.zeros(self.n_nodes)
        for face in self.obs_faces:
            axis = int(face[1])
            w = np.ones(1)
            for a, (h, n) in enumerate(zip(self.spacing, self.shape)):
                if a == axis:
                    w1 = np.ones(n)
                else:
                    w1 = np.full(n, h)
                    w1[[0, -1]] *= 0.5
                w = np.multiply.outer(w, w1)
            mu += np.where(self.face_mask(face), w.ravel(), 0.0)
        return mu

    @cached_property
    def time_weights(self) -> np.ndarray:
        w = np.full(self.nt, self.dt)
        w[[0, -1]] *= 0.5
        return w

    @property
    def patch_measure(self) -> float:
        return float(self.patch_weights.sum())

    # -- field helpers ----------------------------------------------------
    def field(self, values, kind: str = SPACE_TIME, tag: str | None = None) -> "ScalarField":
        return as_field(self, values, kind, tag)

    def evaluate(self, func: Callable, kind: str = SPACE_TIME) -> np.ndarray:
        """Evaluate ``func(*coords, t)`` (or ``func(*coords)``) on the lattice."""
        if kind == SPACE_ONLY:
            return np.broadcast_to(np.asarray(func(*self.mesh), dtype=float), self.shape).copy()
        tt = self.times.reshape((-1,) + (1,) * self.dim)
        coords = [m[None, ...] for m in self.mesh]
        out = np.asarray(func(*coords, tt), dtype=float)
        return np.broadcast_to(out, (self.nt,) + self.shape).copy()


def build_grid(
    dim: int = 1,
    extents: Sequence | None = None,
    nx: int | Sequence[int] = 33,
    nt: int = 33,
    T: float = 1.0,
    obs_faces: Sequence[str] | str = ("x0+",),
    require_patch: bool = True,
) -> SpaceTimeGrid:
    """Validate grid parameters and build a :class:`SpaceTimeGrid`.

    ``obs_faces="all"`` selects every face of the box.
    """
    if dim not in (1, 2):
        raise GridError("only 1D and 2D boxes are supported")
    if extents is None:
        extents = [(0.0, 1.0)] * dim
    extents = tuple((float(lo), float(hi)) for lo, hi in extents)
    if len(extents) != dim:
        raise GridError(f"expected {dim} extents, got {len(extents)}")
    shape = (int(nx),) * dim if np.isscalar(nx) else tuple(int(n) for n in nx)
    if len(shape) != dim:
        raise GridError(f"expected {dim} node counts, got {len(shape)}")
    if min(shape) < 3:
        raise GridError("no interior nodes: need nx >= 3 on every axis")
    if nt < 2:
        raise GridError("need nt >= 2 time levels")
    if not T > 0:
        raise GridError("final time T must be positive")
    for lo, hi in extents:
        if not hi > lo:
            raise GridError(f"degenerate extent [{lo}, {hi}]")
        if lo < 0:
            raise GridError(
                f"negative coordinate {lo}: shift the domain into the first quadrant"
            )
    if isinstance(obs_faces, str):
        obs_faces = _face_names(dim) if obs_faces == "all" else (obs_faces,)
    obs_faces = tuple(obs_faces)
    for face in obs_faces:
        if face not in _face_names(dim):
            raise GridError(f"unknown face {face!r} for a {dim}D grid")
    if require_patch and not obs_faces:
        raise GridError("observation patch is empty")
    return SpaceTimeGrid(extents, shape, int(nt), float(T), obs_faces)


# --------------------------------------------------------------------------
# Fields
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class ScalarField:
    """Nodal values on a grid, either over space only or over space-time."""

    grid: SpaceTimeGrid
    values: np.ndarray
    kind: str = SPACE_TIME
    tag: str | None = None  # "positive", "nonnegative", "negative" or None
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        expected = self.grid.shape if self.kind == SPACE_ONLY else (self.grid.nt,) + self.grid.shape
        if self.kind not in (SPACE_ONLY, SPACE_TIME):
            raise GridError(f"unknown field kind {self.kind!r}")
        if self.values.shape != expected:
            raise GridError(
                f"{self.kind} field needs shape {expected}, got {self.values.shape}"
            )
        check_tag(self.values, self.tag)

    @property
    def flat(self) -> np.ndarray:
        """Values with the spatial axes flattened."""
        if self.kind == SPACE_ONLY:
            return self.values.reshape(-1)
        return self.values.reshape(self.grid.nt, -1)

    def space_time(self) -> np.ndarray:
        """Flat (nt, n_nodes) values, broadcasting space-only fields in time."""
        if self.kind == SPACE_TIME:
            return self.flat
        return np.broadcast_to(self.flat, (self.grid.nt, self.grid.n_nodes))

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def check_tag(values: np.ndarray, tag: str | None, name: str = "field"):
    if tag is None:
        return
    lo, hi = float(np.min(values)), float(np.max(values))
    if tag == "positive" and not lo > 0:
        raise GridError(f"{name} tagged positive has min {lo}")
    if tag == "nonnegative" and not lo >= 0:
        raise GridError(f"{name} tagged nonnegative has min {lo}")
    if tag == "negative" and not hi < 0:
        raise GridError(f"{name} tagged negative has max {hi}")


def as_field(grid: SpaceTimeGrid, value, kind: str = SPACE_TIME, tag=None) -> ScalarField:
    """Coerce a scalar, array, callable or field to a :class:`ScalarField`."""
    if isinstance(value, ScalarField):
        if value.grid != grid:
            raise GridError("field lives on a different grid")
        if tag is not None:
            check_tag(value.values, tag)
        return value
    if callable(value):
        arr = grid.evaluate(value, kind)
    else:
        arr = np.asarray(value, dtype=float)
        shape = grid.shape if kind == SPACE_ONLY else (grid.nt,) + grid.shape
        if arr.ndim == 0:
            arr = np.full(shape, float(arr))
        elif arr.shape == (grid.n_nodes,) and kind == SPACE_ONLY:
            arr = arr.reshape(shape)
        elif arr.shape == (grid.nt, grid.n_nodes):
            arr = arr.reshape(shape)
        elif arr.shape != shape:
            raise GridError(f"cannot use array of shape {arr.shape} as a {kind} field")
    return ScalarField(grid, np.array(arr, dtype=float), kind, tag)


# --------------------------------------------------------------------------
# Stencil operators on arrays
# --------------------------------------------------------------------------
def _second_difference(u, axis, h):
    out = np.full_like(u, np.nan)
    sl = [slice(None)] * u.ndim
    mid, lo, hi = list(sl), list(sl), list(sl)
    mid[axis], lo[axis], hi[axis] = slice(1, -1), slice(None, -2), slice(2, None)
    out[tuple(mid)] = (u[tuple(lo)] - 2 * u[tuple(mid)] + u[tuple(hi)]) / h**2
    return out


def _upwind_difference(u, axis, h, c):
    out = np.full_like(u, np.nan)
    sl = [slice(None)] * u.ndim
    mid, lo, hi = list(sl), list(sl), list(sl)
    mid[axis], lo[axis], hi[axis] = slice(1, -1), slice(None, -2), slice(2, None)
    if c >= 0:
        out[tuple(mid)] = c * (u[tuple(mid)] - u[tuple(lo)]) / h
    else:
        out[tuple(mid)] = c * (u[tuple(hi)] - u[tuple(mid)]) / h
    return out


def apply_diff_operator(fld: ScalarField, op_kind: str, vector=None) -> ScalarField:
    """Apply a finite-difference operator to a field.

    ``op_kind`` is ``"laplacian"`` (centred, second order), ``"convection"``
    (first-order upwind ``vector . grad``) or ``"time_derivative"`` (backward
    difference). Nodes where the operator is undefined (boundary nodes for
    spatial operators, level 0 for the time derivative) are set to NaN.
    """
    grid = fld.grid
    vals = fld.values
    offset = 0 if fld.kind == SPACE_ONLY else 1
    if op_kind == "time_derivative":
        if fld.kind != SPACE_TIME:
            raise GridError("time derivative needs a space_time field")
        out = np.full_like(vals, np.nan)
        out[1:] = (vals[1:] - vals[:-1]) / grid.dt
        return ScalarField(grid, out, fld.kind)
    if op_kind == "laplacian":
        out = np.zeros_like(vals)
        for a, h in enumerate(grid.spacing):
            out = out + _second_difference(vals, a + offset, h)
    elif op_kind == "convection":
        vec = np.atleast_1d(np.asarray(vector, dtype=float))
        if vec.shape != (grid.dim,):
            raise GridError(f"convection vector must have length {grid.dim}")
        out = np.zeros_like(vals)
        for a, h in enumerate(grid.spacing):
            out = out + _upwind_difference(vals, a + offset, h, vec[a])
    else:
        raise GridError(f"unknown operator {op_kind!r}")
    # NaN marks every node that is not interior in all axes
    return ScalarField(grid, out, fld.kind)


def boundary_trace(fld: ScalarField, mode: str = "value") -> np.ndarray:
    """Time series on the observation patch, shape ``(nt, n_patch_nodes)``.

    ``mode="normal_derivative"`` uses second-order one-sided differences along
    each axis in which the node sits on a face, combined with the outward
    normal of the node.
    """
    grid = fld.grid
    if fld.kind != SPACE_TIME:
        raise GridError("boundary trace needs a space_time field")
    idx = np.flatnonzero(grid.obs_mask)
    flat = fld.flat
    if mode == "value":
        return flat[:, idx].copy()
    if mode != "normal_derivative":
        raise GridError(f"unknown trace mode {mode!r}")
    if min(grid.shape) < 3:
        raise GridError("need at least 3 nodes along the normal direction")
    vals = fld.values
    out = np.zeros((grid.nt, grid.n_nodes))
    normals = grid.outward_normals
    for a, h in enumerate(grid.spacing):
        lo = [slice(None)] * vals.ndim
        d = np.zeros_like(vals)
        n = grid.shape[a]

        def take(i):
            s = list(lo)
            s[a + 1] = i
            return vals[tuple(s)]

        def put(i, v):
            s = list(lo)
            s[a + 1] = i
            d[tuple(s)] = v

        put(0, (-3 * take(0) + 4 * take(1) - take(2)) / (2 * h))
        put(n - 1, (3 * take(n - 1) - 4 * take(n - 2) + take(n - 3)) / (2 * h))
        s = list(lo)
        s[a + 1] = slice(1, -1)
        sp_, sm = list(lo), list(lo)
        sp_[a + 1], sm[a + 1] = slice(2, None), slice(None, -2)
        d[tuple(s)] = (vals[tuple(sp_)] - vals[tuple(sm)]) / (2 * h)
        out += normals[:, a][None, :] * d.reshape(grid.nt, -1)
    return out[:, idx]


def integrate_region(fld, region: str, weight=None) -> float:
    """Composite trapezoidal integral of ``field * weight`` over a region.

    ``region`` is ``"patch"`` (Gamma_T, the observation patch over (0, T]),
    ``"space_time"`` (D_T) or ``"space"`` (Omega, space-only fields).
    For ``"patch"`` the field may be a full space-time field or an
    ``(nt, n_patch_nodes)`` trace array.
    """
    if isinstance(fld, ScalarField):
        grid = fld.grid
    else:
        raise GridError("integrate_region needs a ScalarField (or trace via integrate_trace)")
    wvals = None
    if weight is not None:
        weight = as_field(grid, weight, fld.kind) if not isinstance(weight, ScalarField) else weight
        if weight.grid != grid:
            raise GridError("weight and field live on different grids")
        if weight.kind != fld.kind:
            raise GridError("weight and field must have the same kind")
        wvals = weight.flat
    vals = fld.flat if wvals is None else fld.flat * wvals
    if region == "space":
        if fld.kind != SPACE_ONLY:
            raise GridError("region 'space' needs a space_only field")
        return float(vals @ grid.space_weights)
    if fld.kind != SPACE_TIME:
        raise GridError(f"region {region!r} needs a space_time field")
    if region == "space_time":
        return float(grid.time_weights @ vals @ grid.space_weights)
    if region == "patch":
        return float(grid.time_weights @ vals @ grid.patch_weights)
    raise GridError(f"unknown region {region!r}")


def integrate_trace(grid: SpaceTimeGrid, trace: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Trapezoidal integral over Gamma_T of an ``(nt, n_patch_nodes)`` trace."""
    mu = grid.patch_weights[grid.obs_mask]
    vals = trace if weight is None else trace * weight
    return float(grid.time_weights @ vals @ mu)


# --------------------------------------------------------------------------
# Assembled operators
# --------------------------------------------------------------------------
def _axis_matrices(n, h, c, reflect, scheme=UPWIND):
    """1D second-difference (as -d2/dx2, unscaled) and ``c d/dx``.

    ``scheme`` selects upwind (monotone) or centred convection; centred is
    kept for debugging and loses the M-matrix property at high Peclet number.
    """
    main = np.full(n, 2.0)
    lower = np.full(n - 1, -1.0)
    upper = np.full(n - 1, -1.0)
    if reflect:
        upper[0] = -2.0
        lower[-1] = -2.0
    lap = sp.diags([lower, main, upper], [-1, 0, 1], format="lil") / h**2
    conv = sp.lil_matrix((n, n))
    if scheme == CENTERED:
        for i in range(n):
            left = i - 1 if i > 0 else (1 if reflect else None)
            right = i + 1 if i < n - 1 else (n - 2 if reflect else None)
            if left is not None:
                conv[i, left] += -c / (2 * h)
            if right is not None:
                conv[i, right] += c / (2 * h)
    for i in range(n if scheme == UPWIND else 0):
        if c >= 0:
            j = i - 1 if i > 0 else (1 if reflect else None)
        else:
            j = i + 1 if i < n - 1 else (n - 2 if reflect else None)
        conv[i, i] = abs(c) / h
        if j is not None:
            conv[i, j] = -abs(c) / h
    if not reflect:
        for M in (lap, conv):
            M[0, :] = 0
            M[n - 1, :] = 0
    return lap.tocsr(), conv.tocsr()


def _assemble(grid, d, velocity, reflect, scheme=UPWIND):
    if scheme not in SCHEMES:
        raise GridError(f"unknown convection scheme {scheme!r}")
    vel = np.atleast_1d(np.asarray(velocity, dtype=float)) if velocity is not None else np.zeros(grid.dim)
    if vel.shape != (grid.dim,):
        raise GridError(f"convection vector must have length {grid.dim}")
    total = sp.csr_matrix((grid.n_nodes, grid.n_nodes))
    for a, (n, h) in enumerate(zip(grid.shape, grid.spacing)):
        lap, conv = _axis_matrices(n, h, vel[a], reflect, scheme)
        op = d * lap + conv
        left = sp.identity(int(np.prod(grid.shape[:a])), format="csr")
        right = sp.identity(int(np.prod(grid.shape[a + 1:])), format="csr")
        total = total + sp.kron(sp.kron(left, op), right, format="csr")
    if not reflect:
        keep = sp.diags(grid.interior_mask.astype(float))
        total = keep @ total
    return sp.csr_matrix(total)


def stencil_matrix(grid: SpaceTimeGrid, d: float, velocity=None, scheme: str = UPWIND) -> sp.csr_matrix:
    """``-d Laplacian + velocity . grad`` (upwind) with rows on interior nodes.

    Columns span all nodes, so boundary values enter through the stencil.
    Boundary rows are zero.
    """
    return _assemble(grid, d, velocity, reflect=False, scheme=scheme)


def neumann_matrix(grid: SpaceTimeGrid, d: float, velocity=None, scheme: str = UPWIND) -> sp.csr_matrix:
    """Same operator on all nodes with ghost-node reflection (zero flux)."""
    return _assemble(grid, d, velocity, reflect=True, scheme=scheme)


def forward_matrix(grid: SpaceTimeGrid, d: float, velocity, boundary: str,
                   scheme: str = UPWIND) -> sp.csr_matrix:
    if boundary == DIRICHLET:
        return stencil_matrix(grid, d, velocity, scheme)
    if boundary == NEUMANN:
        return neumann_matrix(grid, d, velocity, scheme)
    raise GridError(f"unknown boundary kind {boundary!r}")


def adjoint_matrix(grid: SpaceTimeGrid, d: float, velocity, boundary: str,
                   scheme: str = UPWIND) -> sp.csr_matrix:
    """Adjoint of :func:`forward_matrix` in the trapezoidal inner product.

    Dirichlet: the same stencil for ``-velocity`` on interior rows; its
    interior block equals the transpose of the forward interior block and its
    boundary columns carry the boundary data of the adjoint field.
    Neumann: ``W^-1 A^T W`` with ``W`` the trapezoidal weights.
    """
    vel = np.atleast_1d(np.asarray(velocity if velocity is not None else np.zeros(grid.dim), dtype=float))
    if boundary == DIRICHLET:
        return stencil_matrix(grid, d, -vel, scheme)
    if boundary == NEUMANN:
        A = neumann_matrix(grid, d, vel, scheme)
        w = grid.space_weights
        return sp.csr_matrix(sp.diags(1.0 / w) @ A.T @ sp.diags(w))
    raise GridError(f"unknown boundary kind {boundary!r}")


def dual_pairing(grid: SpaceTimeGrid, forward_side: np.ndarray, adjoint_side: np.ndarray, nodes=None) -> float:
    """Implicit-Euler dual pairing of two flat ``(nt, n_nodes)`` arrays.

    ``sum_{n=1}^{nt-1} dt * sum_i w_i f_i^n g_i^{n-1}`` where ``w`` are the
    trapezoidal space weights restricted to ``nodes`` (a boolean mask; the
    interior for Dirichlet problems). This is the quadrature under which the
    backward-Euler transpose reproduces the forward scheme exactly.
    """
    w = grid.space_weights if nodes is None else np.where(nodes, grid.space_weights, 0.0)
    return float(grid.dt * np.sum((forward_side[1:] * adjoint_side[:-1]) @ w))
