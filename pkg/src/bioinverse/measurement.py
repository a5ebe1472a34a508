"""
Boundary measurement maps, admissible input families and dataset generation.

A record ``(s, n, j)`` stores the two averaged boundary observations of the
solution driven by the coefficient ``a^s`` and the source ``q^n`` (or the
separated source ``phi^n V_j``). Dirichlet problems are observed through the
outward flux of ``u`` and ``m`` on the patch, Neumann problems through their
values there.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adjoint import flux_functional, value_functional
from .elliptic import EllipticProblem, elliptic_coupled_solve
from .forward import (
    LinearCoupling,
    NonlinearPower,
    ProblemError,
    ProblemSpec,
    SolverError,
    linear_coupled_solve,
    monotone_solve,
)
from .grid import (
    DIRICHLET,
    NEUMANN,
    SPACE_ONLY,
    SPACE_TIME,
    UPWIND,
    ScalarField,
    SpaceTimeGrid,
    as_field,
    boundary_trace,
)

EPS0 = 1e-6

NONLINEAR = "nonlinear_parabolic"
LINEAR_SPATIAL = "linear_spatial"
ELLIPTIC = "elliptic"
NEUMANN_SCENARIO = "neumann"
SCENARIOS = (NONLINEAR, LINEAR_SPATIAL, ELLIPTIC, NEUMANN_SCENARIO)

CSV_HEADER = ("scenario", "s", "n", "j", "a_norm", "F", "G")


class MeasurementError(ValueError):
    pass


def scenario_kind(scenario: str) -> str:
    """Field kind of the unknown coefficients and of the adjoint weight."""
    if scenario not in SCENARIOS:
        raise MeasurementError(f"unknown scenario {scenario!r}")
    return SPACE_ONLY if scenario == ELLIPTIC else SPACE_TIME


def scenario_boundary(scenario: str) -> str:
    return NEUMANN if scenario == NEUMANN_SCENARIO else DIRICHLET


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------
def _check_weight(grid: SpaceTimeGrid, fld: ScalarField, name: str):
    vals = fld.flat
    if vals.min() < 0:
        raise MeasurementError(f"weight {name} has negative values")
    if not vals.max() > 0:
        raise MeasurementError(f"weight {name} vanishes identically")
    if np.any(vals[..., ~grid.obs_mask] != 0):
        raise MeasurementError(f"weight {name} leaks outside the observation patch")


@dataclass(frozen=True)
class WeightSpec:
    """Nonnegative, nonzero weights ``h`` (for ``u``) and ``g`` (for ``m``) on the patch."""

    h: ScalarField
    g: ScalarField

    def __post_init__(self):
        if self.h.grid != self.g.grid or self.h.kind != self.g.kind:
            raise MeasurementError("h and g must share grid and kind")
        _check_weight(self.h.grid, self.h, "h")
        _check_weight(self.g.grid, self.g, "g")

    @property
    def kind(self) -> str:
        return self.h.kind


def extend_weight(grid: SpaceTimeGrid, h, kind: str = SPACE_TIME) -> ScalarField:
    """Zero extension of a patch weight to the whole boundary.

    ``h`` is either given on the patch nodes only (last axis of length
    ``obs_mask.sum()``) or on all nodes, in which case it must already vanish
    off the patch.
    """
    arr = np.asarray(h, dtype=float)
    n_patch = int(grid.obs_mask.sum())
    lead = (grid.nt,) if kind == SPACE_TIME else ()
    if arr.shape in (lead + (n_patch,), (n_patch,)):
        full = np.zeros(lead + (grid.n_nodes,))
        full[..., grid.obs_mask] = arr
        fld = ScalarField(grid, full.reshape(lead + grid.shape), kind)
    else:
        fld = as_field(grid, arr, kind)
    _check_weight(grid, fld, "h")
    return fld


def weight_profile(grid: SpaceTimeGrid, kind: str = SPACE_TIME, decay: float = 1.0,
                   spatial: str = "uniform") -> ScalarField:
    """Default adjoint weight on the patch.

    In time ``(1 - t/T)^decay``: positive from the start and vanishing at the
    final time, where the adjoint field itself is pinned to zero. In space
    either constant on the patch (``"uniform"``) or the product of
    ``sin^2`` bumps along each face, which vanishes on the face edges
    (``"bump"``; only meaningful in 2D).
    """
    if spatial not in ("uniform", "bump"):
        raise MeasurementError(f"unknown spatial profile {spatial!r}")
    space = grid.obs_mask.astype(float)
    if spatial == "bump" and grid.dim > 1:
        prof = np.ones(grid.n_nodes)
        for a, (lo, hi) in enumerate(grid.extents):
            s = (grid.node_coords[:, a] - lo) / (hi - lo)
            along = np.sin(np.pi * s) ** 2
            # normal axis of the face carries no variation
            on_face_normal = np.isclose(s, 0.0) | np.isclose(s, 1.0)
            prof *= np.where(on_face_normal, 1.0, along)
        space = space * prof
    if kind == SPACE_ONLY:
        return ScalarField(grid, space.reshape(grid.shape), SPACE_ONLY)
    if not decay >= 0:
        raise MeasurementError("decay exponent must be nonnegative")
    tp = (1.0 - grid.times / grid.T) ** decay
    vals = tp[:, None] * space[None, :]
    return ScalarField(grid, vals.reshape((grid.nt,) + grid.shape), SPACE_TIME)


def default_weights(grid: SpaceTimeGrid, kind: str = SPACE_TIME, decay: float = 1.0,
                    spatial: str = "uniform") -> WeightSpec:
    h = weight_profile(grid, kind, decay, spatial)
    return WeightSpec(h, h)


# --------------------------------------------------------------------------
# Measurements
# --------------------------------------------------------------------------
def measure_field(grid: SpaceTimeGrid, u: np.ndarray, weight: ScalarField, mode: str,
                  d: float = 1.0, velocity=None, scheme: str = UPWIND) -> float:
    """One boundary functional of the flat field ``u``.

    ``"flux"`` is the matrix-consistent outward flux paired with the weight
    (exact dual of Dirichlet data injection; assumes ``u`` vanishes on the
    boundary). ``"value"`` pairs the boundary values. ``"flux_stencil"``
    uses the one-sided stencil derivative with trapezoidal quadrature, for
    reporting only.
    """
    hw = weight.flat
    if mode == "flux":
        return flux_functional(grid, u, hw, d, velocity, scheme)
    if mode == "value":
        if u.ndim == 1:
            return float(np.sum(grid.patch_weights * hw * u))
        return value_functional(grid, u, hw)
    if mode == "flux_stencil":
        levels = u if u.ndim == 2 else np.broadcast_to(u, (grid.nt, grid.n_nodes))
        fld = ScalarField(grid, levels.reshape((grid.nt,) + grid.shape), SPACE_TIME)
        trace = boundary_trace(fld, "normal_derivative")
        mu = grid.patch_weights[grid.obs_mask]
        if u.ndim == 1:
            return float(np.sum(trace[0] * hw[grid.obs_mask] * mu))
        vals = trace * hw[:, grid.obs_mask]
        return float(grid.time_weights @ vals @ mu)
    raise MeasurementError(f"unknown measurement mode {mode!r}")


def evaluate_measurement(problem, solution, weights: WeightSpec, mode: str | None = None) -> tuple:
    """``(F, G)`` for a forward or steady solution of ``problem``."""
    boundary = getattr(problem, "boundary", DIRICHLET)
    if mode is None:
        mode = "value" if boundary == NEUMANN else "flux"
    if mode.startswith("flux") and boundary != DIRICHLET:
        raise MeasurementError("flux measurements need a Dirichlet problem")
    if mode == "value" and boundary != NEUMANN:
        raise MeasurementError("value measurements need a Neumann problem")
    g = problem.grid
    alpha = getattr(problem, "alpha", None)
    beta = getattr(problem, "beta", None)
    scheme = getattr(problem, "scheme", UPWIND)
    F = measure_field(g, solution.u.flat, weights.h, mode, problem.d1, alpha, scheme)
    G = measure_field(g, solution.m.flat, weights.g, mode, problem.d2, beta, scheme)
    return F, G


# --------------------------------------------------------------------------
# Families
# --------------------------------------------------------------------------
def monomial_exponents(n_vars: int, degree: int) -> list:
    """Exponent tuples with each entry ``<= degree``, ordered by total degree.

    Within one total degree, earlier variables carry the higher power first.
    """
    grid = np.indices((degree + 1,) * n_vars).reshape(n_vars, -1).T
    return sorted((tuple(int(e) for e in row) for row in grid), key=lambda e: (sum(e), tuple(-x for x in e)))


@dataclass
class SourceFamily:
    a_norms: np.ndarray
    a_family: list
    q_family: list
    exponents: list
    phi_family: list | None = None
    phi_exponents: list | None = None
    V: np.ndarray | None = None
    V_prime: np.ndarray | None = None

    @property
    def S(self) -> int:
        return len(self.a_family)

    @property
    def N(self) -> int:
        return len(self.phi_family) if self.phi_family is not None else len(self.q_family)


def _monomial(grid, exps, kind):
    sp_exps = exps[: grid.dim]
    vals = np.ones(grid.shape)
    for a, e in enumerate(sp_exps):
        vals = vals * grid.mesh[a] ** e
    if kind == SPACE_ONLY:
        return ScalarField(grid, vals + EPS0, SPACE_ONLY)
    tt = grid.times.reshape((-1,) + (1,) * grid.dim) ** exps[grid.dim]
    return ScalarField(grid, tt * vals[None, ...] + EPS0, SPACE_TIME)


def build_source_families(grid: SpaceTimeGrid, S: int, N: int, a_max: float, basis_degree: int,
                          scenario: str = NONLINEAR) -> SourceFamily:
    """Admissible families for one scenario.

    ``a^s = a_max 2^-(s-1)`` as constant fields. Parabolic scenarios use
    space-time monomials ``x^i t^k + EPS0``; the elliptic scenario uses
    spatial monomials; the linear spatial scenario builds separated sources
    ``phi^n(x) V_j(t)`` with ``V = t`` and ``V_2`` its backward difference.
    """
    if S < 1 or N < 1:
        raise MeasurementError("S and N must be positive")
    if not a_max > 0:
        raise MeasurementError("a_max must be positive")
    scenario_kind(scenario)  # rejects unknown names
    a_norms = a_max * 0.5 ** np.arange(S)
    a_family = [ScalarField(grid, np.full((grid.nt,) + grid.shape, a), SPACE_TIME) for a in a_norms]
    separated = scenario in (LINEAR_SPATIAL, ELLIPTIC)
    n_vars = grid.dim if separated else grid.dim + 1
    exps = monomial_exponents(n_vars, basis_degree)
    if N > len(exps):
        raise MeasurementError(
            f"N={N} exceeds the {len(exps)} basis functions of degree {basis_degree}"
        )
    exps = exps[:N]
    if scenario == ELLIPTIC:
        q = [_monomial(grid, e, SPACE_ONLY) for e in exps]
        return SourceFamily(a_norms, a_family, q, exps, q, exps)
    if scenario == LINEAR_SPATIAL:
        phi = [_monomial(grid, e, SPACE_ONLY) for e in exps]
        V = grid.times.copy()
        Vp = np.empty_like(V)
        Vp[1:] = np.diff(V) / grid.dt
        Vp[0] = Vp[1]
        q = []
        for p in phi:
            for prof in (V, Vp):
                tt = prof.reshape((-1,) + (1,) * grid.dim)
                q.append(ScalarField(grid, tt * p.values[None, ...], SPACE_TIME))
        return SourceFamily(a_norms, a_family, q, exps, phi, exps, V, Vp)
    q = [_monomial(grid, e, SPACE_TIME) for e in exps]
    return SourceFamily(a_norms, a_family, q, exps)


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------
@dataclass
class ExperimentTemplate:
    """Everything about an experiment except the swept inputs ``a^s`` and ``q^n``."""

    grid: SpaceTimeGrid
    d1: float
    d2: float
    l: object
    v: object
    alpha: object = None
    beta: object = None
    M: int = 1

    def coefficient(self, which: str, kind: str) -> ScalarField:
        val = self.l if which == "l" else self.v
        if isinstance(val, ScalarField) and val.kind == SPACE_ONLY and kind == SPACE_TIME:
            g = self.grid
            return ScalarField(g, np.broadcast_to(val.values, (g.nt,) + g.shape).copy(), SPACE_TIME)
        return as_field(self.grid, val, kind)


@dataclass(frozen=True)
class MeasurementRecord:
    scenario: str
    s: int
    n: int
    j: int
    a_norm: float
    F: float
    G: float


def record_indices(scenario: str, S: int, N: int) -> list:
    """``(s, n, j)`` in dataset order: s-major, then n, then j (1-based)."""
    js = (1, 2) if scenario == LINEAR_SPATIAL else (0,)
    return [(s, n, j) for s in range(1, S + 1) for n in range(1, N + 1) for j in js]


def _solve_one(template, families, weights, scenario, idx, tol):
    s, n, j = idx
    g = template.grid
    a = families.a_family[s - 1]
    if scenario == ELLIPTIC:
        q = families.q_family[n - 1]
        prob = EllipticProblem(g, template.d1, template.d2, template.coefficient("l", SPACE_ONLY),
                               template.coefficient("v", SPACE_ONLY), float(families.a_norms[s - 1]),
                               float(families.a_norms[s - 1]), template.M, q, q)
        sol = elliptic_coupled_solve(prob, tol=tol)
        return evaluate_measurement(prob, sol, weights, "flux")
    l = template.coefficient("l", SPACE_TIME)
    v = template.coefficient("v", SPACE_TIME)
    if scenario == LINEAR_SPATIAL:
        q = families.q_family[2 * (n - 1) + (j - 1)]
        reaction = LinearCoupling(a, a, q, q)
    else:
        q = families.q_family[n - 1]
        reaction = NonlinearPower.uniform(template.M, a, a, q, q)
    spec = ProblemSpec(g, template.d1, template.d2, l, v, reaction, template.alpha, template.beta,
                       scenario_boundary(scenario))
    sol = linear_coupled_solve(spec) if scenario == LINEAR_SPATIAL else monotone_solve(spec, tol=tol)
    return evaluate_measurement(spec, sol, weights)


def generate_dataset(template: ExperimentTemplate, families: SourceFamily, weights: WeightSpec,
                     scenario: str, tol: float = 1e-11, workers: int = 1) -> list:
    """Solve every experiment the scenario calls for and record its measurements."""
    kind = scenario_kind(scenario)
    if weights.kind != kind:
        raise MeasurementError(f"scenario {scenario} needs {kind} weights")
    if scenario == ELLIPTIC and families.q_family[0].kind != SPACE_ONLY:
        raise MeasurementError("elliptic scenario needs spatial source families")
    if scenario == LINEAR_SPATIAL and families.V is None:
        raise MeasurementError("linear_spatial scenario needs separated source families")
    indices = record_indices(scenario, families.S, families.N)

    def run(idx):
        try:
            return _solve_one(template, families, weights, scenario, idx, tol)
        except (SolverError, ProblemError) as exc:
            raise type(exc)(f"experiment (s={idx[0]}, n={idx[1]}, j={idx[2]}): {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, indices))
    else:
        values = [run(idx) for idx in indices]
    return [
        MeasurementRecord(scenario, s, n, j, float(families.a_norms[s - 1]), float(F), float(G))
        for (s, n, j), (F, G) in zip(indices, values)
    ]


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------
def fmt(x: float) -> str:
    return format(float(x), ".17g")


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.scenario, r.s, r.n, r.j, fmt(r.a_norm), fmt(r.F), fmt(r.G)])
    return buf.getvalue()


def atomic_write(path: str, text: str):
    """Write through a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(path: str, records):
    atomic_write(path, records_to_csv(records))


def read_records(path: str) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise MeasurementError(f"unexpected dataset header {header!r}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise MeasurementError(f"line {lineno}: expected {len(CSV_HEADER)} columns")
            sc, s, n, j, a, F, G = row
            try:
                out.append(MeasurementRecord(sc, int(s), int(n), int(j), float(a), float(F), float(G)))
            except ValueError:
                raise MeasurementError(f"line {lineno}: malformed number in {row!r}") from None
    return out
