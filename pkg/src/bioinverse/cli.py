"""
Command-line front end.

    bioinverse forward     --config cfg.yaml --out DIR
    bioinverse dataset     --config cfg.yaml --out DIR [--threads K]
    bioinverse invert      --config cfg.yaml --out DIR [--dataset PATH]
    bioinverse verify      --config cfg.yaml --out DIR
    bioinverse convergence --config cfg.yaml --out DIR

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
Every output file is written through a temporary file and renamed, and all
contents are computed before the first file is written.
"""

from __future__ import annotations

import argparse
import ast
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from .adjoint import (
    AdjointError,
    adjoint_parabolic_solve,
    duality_residual,
    flux_functional,
    value_functional,
)
from .config import ConfigError, ExperimentConfig, load_config
from .elliptic import (
    EllipticProblem,
    elliptic_coupled_solve,
    elliptic_scalar_solve,
    steady_uniqueness_certificate,
)
from .forward import (
    LinearCoupling,
    NonlinearPower,
    ProblemError,
    ProblemSpec,
    SolverError,
    discrete_residual,
    monotone_solve,
    scalar_parabolic_solve,
    solve_forward,
)
from .grid import (
    DIRICHLET,
    NEUMANN,
    SPACE_ONLY,
    SPACE_TIME,
    GridError,
    ScalarField,
    SpaceTimeGrid,
)
from .inverse import ReconstructionError, run_pipeline
from .measurement import (
    ELLIPTIC,
    MeasurementError,
    atomic_write,
    default_weights,
    fmt,
    generate_dataset,
    read_records,
    records_to_csv,
)

log = logging.getLogger("bioinverse")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

# verification thresholds
DUALITY_TOL = 1e-10
ORDER_TOL = 1e-12
STEADY_TOL = 1e-7


# --------------------------------------------------------------------------
# Serialisation helpers
# --------------------------------------------------------------------------
def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def to_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _coord_names(grid: SpaceTimeGrid) -> list:
    return ["x"] if grid.dim == 1 else ["x1", "x2"]


def field_csv(grid: SpaceTimeGrid, fld: ScalarField) -> str:
    """Node coordinates followed by one column per time level (or one value column)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if fld.kind == SPACE_ONLY:
        w.writerow(_coord_names(grid) + ["value"])
        vals = fld.flat[None, :]
    else:
        w.writerow(_coord_names(grid) + [f"t={fmt(t)}" for t in grid.times])
        vals = fld.flat
    for i in range(grid.n_nodes):
        w.writerow([fmt(c) for c in grid.node_coords[i]] + [fmt(v) for v in vals[:, i]])
    return buf.getvalue()


def estimate_csv(grid: SpaceTimeGrid, kind: str, columns: dict) -> str:
    """One row per (level, node) with coordinates and the given columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    coords = _coord_names(grid) + ([] if kind == SPACE_ONLY else ["t"])
    w.writerow(coords + names)
    arrays = [np.atleast_2d(columns[k]) for k in names]
    levels = 1 if kind == SPACE_ONLY else grid.nt
    for n in range(levels):
        for i in range(grid.n_nodes):
            row = [fmt(c) for c in grid.node_coords[i]]
            if kind == SPACE_TIME:
                row.append(fmt(grid.times[n]))
            for a in arrays:
                v = a[n, i]
                row.append(str(int(v)) if a.dtype == bool else fmt(v))
            w.writerow(row)
    return buf.getvalue()


def write_outputs(out_dir: str, files: dict):
    """Create ``out_dir`` and write every file atomically, in sorted order."""
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(files):
        atomic_write(os.path.join(out_dir, name), files[name])
        log.info("wrote %s", os.path.join(out_dir, name))


# --------------------------------------------------------------------------
# Problem builders
# --------------------------------------------------------------------------
def _constant(cfg: ExperimentConfig, key: str) -> float:
    fld = cfg.coefficient(key, kind=SPACE_ONLY)
    if fld.max() != fld.min():
        raise ConfigError(f"problem.{key}", "the elliptic scenario needs a constant coefficient")
    return float(fld.max())


def forward_problem(cfg: ExperimentConfig, grid: SpaceTimeGrid | None = None) -> ProblemSpec:
    g = grid or cfg.grid()
    p = cfg.data["problem"]
    co = lambda k: cfg.coefficient(k, g, SPACE_TIME)
    if p["reaction"] == "linear_coupling":
        reaction = LinearCoupling(co("b1"), co("b2"), co("q1"), co("q2"))
    else:
        M = p["M"]
        reaction = NonlinearPower(M, co("a1"), co("a2"), [co("b1")] * M, [co("b2")] * M, co("q1"), co("q2"))
    return ProblemSpec(g, p["d1"], p["d2"], co("l"), co("v"), reaction, p["alpha"], p["beta"],
                       cfg.boundary, cfg.scheme)


def elliptic_problem(cfg: ExperimentConfig) -> EllipticProblem:
    g = cfg.grid()
    p = cfg.data["problem"]
    co = lambda k: cfg.coefficient(k, g, SPACE_ONLY)
    return EllipticProblem(g, p["d1"], p["d2"], co("l"), co("v"), _constant(cfg, "b1"),
                           _constant(cfg, "b2"), p["M"], co("q1"), co("q2"))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------
def cmd_forward(cfg: ExperimentConfig, args) -> dict:
    g = cfg.grid()
    if cfg.scenario == ELLIPTIC:
        prob = elliptic_problem(cfg)
        sol = elliptic_coupled_solve(prob, tol=cfg.data["solver"]["tol"])
        summary = {
            "scenario": cfg.scenario,
            "steps": sol.steps,
            "residual": sol.residual,
            "agreement_gap": sol.agreement_gap,
            "sector_upper": [float(sol.w_star[0].max()), float(sol.w_star[1].max())],
        }
    else:
        spec = forward_problem(cfg, g)
        sol = solve_forward(spec, tol=cfg.data["solver"]["tol"], max_iter=cfg.data["solver"]["max_iter"])
        sector = sol.sector
        summary = {
            "scenario": cfg.scenario,
            "reaction": spec.reaction.form,
            "iterations": sol.iterations,
            "gap": sol.residual,
            "residual": discrete_residual(spec, sol.u.flat, sol.m.flat),
            "monotonicity_violation": sol.monotonicity_violation,
            "sector_upper": None if sector is None else [sector.u_upper.max(), sector.m_upper.max()],
            "sector_delta": None if sector is None else sector.delta,
        }
    files = {"forward_summary.json": to_json(summary)}
    if cfg.data["output"]["fields"]:
        files.update({"u.csv": field_csv(g, sol.u), "m.csv": field_csv(g, sol.m)})
    return files


def cmd_dataset(cfg: ExperimentConfig, args) -> dict:
    g = cfg.grid()
    records = generate_dataset(cfg.template(g), cfg.families(g), cfg.weights(g), cfg.scenario,
                               tol=cfg.data["solver"]["tol"], workers=args.threads)
    log.info("generated %d records", len(records))
    return {"dataset.csv": records_to_csv(records)}


def cmd_invert(cfg: ExperimentConfig, args) -> dict:
    g = cfg.grid()
    path = args.dataset or os.path.join(args.out, "dataset.csv")
    records = read_records(path)
    template = cfg.template(g)
    result = run_pipeline(cfg.scenario, records, template, cfg.families(g), cfg.inverse_config())
    diag = result.diagnostics
    report = {
        "scenario": result.scenario,
        "lambda": diag["lambda"],
        "tau": diag["tau"],
        "delta_T": None if cfg.scenario == ELLIPTIC else diag["delta_T"],
        "rel_error_l": result.rel_error_l,
        "rel_error_v": result.rel_error_v,
        "moment_residual": result.moment_residual,
    }
    files = {"result.json": to_json(report)}
    if not cfg.data["output"]["fields"]:
        return files
    kind = result.l_hat.values.kind
    cols = {}
    for which, est in (("l", result.l_hat), ("v", result.v_hat)):
        cols[f"{which}_true"] = template.coefficient(which, kind).flat
        cols[f"{which}_hat"] = est.values.flat
        cols[f"mask_{which}"] = est.mask
    files["fields.csv"] = estimate_csv(g, kind, cols)
    return files


def _check(name: str, value: float, threshold: float, note: str = "") -> dict:
    ok = value is not None and math.isfinite(value) and value <= threshold
    out = {"name": name, "status": "pass" if ok else "fail", "value": value, "threshold": threshold,
           "margin": None if value is None else threshold - value}
    if note:
        out["note"] = note
    return out


def _duality_check(cfg: ExperimentConfig, g: SpaceTimeGrid, boundary: str) -> dict:
    """Linear scalar problem with a unit source against the default weight."""
    p = cfg.data["problem"]
    name = f"duality_{'dirichlet' if boundary == DIRICHLET else 'neumann'}"
    l = cfg.coefficient("l", g, SPACE_TIME)
    src = np.ones((g.nt, g.n_nodes))
    u = scalar_parabolic_solve(g, p["d1"], p["alpha"], l, src, boundary, scheme=cfg.scheme).flat
    w = cfg.data["weights"]
    h = default_weights(g, SPACE_TIME, w["decay"], w["spatial"]).h.flat
    adj = adjoint_parabolic_solve(g, l, p["d1"], p["alpha"], h, boundary, scheme=cfg.scheme)
    if boundary == DIRICHLET:
        F = flux_functional(g, u, h, p["d1"], p["alpha"], cfg.scheme)
    else:
        F = value_functional(g, u, h)
    return _check(name, duality_residual(g, src, adj, F), DUALITY_TOL)


def cmd_verify(cfg: ExperimentConfig, args) -> dict:
    g = cfg.grid()
    checks = []
    note = "centered convection is not monotone at high Peclet number" if cfg.centered else ""
    if g.nt > 1:
        for boundary in (DIRICHLET, NEUMANN):
            checks.append(_duality_check(cfg, g, boundary))
    try:
        spec = forward_problem(cfg, g)
        sol = monotone_solve(spec, tol=1e-9, max_iter=cfg.data["solver"]["max_iter"]) \
            if spec.reaction.form == "nonlinear_power" else solve_forward(spec)
        u, m = sol.u.flat, sol.m.flat
        below = max(-u.min(), -m.min(), 0.0)
        if sol.sector is not None:
            above = max((u - sol.sector.u_upper.flat).max(), (m - sol.sector.m_upper.flat).max(), 0.0)
        else:
            above = 0.0
        checks.append(_check("comparison_principle", float(max(below, above)) + 0.0, ORDER_TOL, note))
        gaps_up = float(np.max(np.diff(sol.gaps))) if len(sol.gaps) > 1 else 0.0
        checks.append(_check("monotone_ordering", max(sol.monotonicity_violation, gaps_up, 0.0), ORDER_TOL, note))
    except (SolverError, ProblemError) as exc:
        # a failed sweep is itself the diagnostic
        checks.append({"name": "comparison_principle", "status": "fail", "value": None,
                       "threshold": ORDER_TOL, "margin": None, "note": f"{note}; {exc}".lstrip("; ")})
        checks.append({"name": "monotone_ordering", "status": "fail", "value": None,
                       "threshold": ORDER_TOL, "margin": None, "note": str(exc)})
    try:
        steady_cfg = _steady_config(cfg)
        prob = elliptic_problem(steady_cfg)
        es = elliptic_coupled_solve(prob)
        cert = steady_uniqueness_certificate(es.upper_pair, es.lower_pair, prob)
        checks.append(_check("steady_state_agreement", max(es.agreement_gap, cert), STEADY_TOL))
    except (SolverError, ProblemError, ConfigError) as exc:
        checks.append({"name": "steady_state_agreement", "status": "fail", "value": None,
                       "threshold": STEADY_TOL, "margin": None, "note": str(exc)})
    report = {
        "scenario": cfg.scenario,
        "convection": cfg.scheme,
        "checks": checks,
        "all_pass": all(c["status"] == "pass" for c in checks),
    }
    return {"verify.json": to_json(report)}


def _steady_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The configured problem frozen at ``t = 0`` as an elliptic scenario."""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.data.items()}
    data["scenario"] = ELLIPTIC
    for key in ("l", "v", "a1", "a2", "b1", "b2", "q1", "q2"):
        expr = cfg.expression(key)
        if expr.time_dependent:
            data["problem"][key] = _at_t0(expr)
    return ExperimentConfig(data)


def _at_t0(expr) -> str:
    """Source of ``expr`` with ``t`` replaced by zero."""

    class Freeze(ast.NodeTransformer):
        def visit_Name(self, node):
            return ast.Constant(0.0) if node.id == "t" else node

    tree = Freeze().visit(ast.parse(expr.source.replace("^", "**"), mode="eval"))
    return ast.unparse(tree)


def _manufactured(g: SpaceTimeGrid, d: float, alpha) -> tuple:
    """``u = (1 - e^-t) prod sin(pi s_a)`` on unit coordinates ``s`` and its source for ``c = -1``.

    Also returns the spatial profile and its source for the steady problem.
    """
    alpha = np.zeros(g.dim) if alpha is None else np.asarray(alpha, float)
    s = [(g.node_coords[:, a] - lo) / (hi - lo) for a, (lo, hi) in enumerate(g.extents)]
    L = [hi - lo for lo, hi in g.extents]
    sines = [np.sin(np.pi * sa) for sa in s]
    prod = np.prod(sines, axis=0)
    lap = sum((np.pi / La) ** 2 for La in L) * prod
    conv = np.zeros_like(prod)
    for a in range(g.dim):
        others = np.prod([sines[b] for b in range(g.dim) if b != a], axis=0) if g.dim > 1 else 1.0
        conv += alpha[a] * (np.pi / L[a]) * np.cos(np.pi * s[a]) * others
    t = g.times[:, None]
    exact = (1 - np.exp(-t)) * prod[None, :]
    source = np.exp(-t) * prod[None, :] + (1 - np.exp(-t)) * (d * lap + conv + prod)[None, :]
    return exact, source, prod, d * lap + prod


def cmd_convergence(cfg: ExperimentConfig, args) -> dict:
    """Manufactured-solution errors of the parabolic and elliptic scalar solvers."""
    p = cfg.data["problem"]
    rows = []
    for study in ("parabolic", "elliptic"):
        prev = None
        for n in cfg.data["convergence"]["levels"]:
            g = cfg.grid(nx=n, nt=n)
            exact, source, prod, ell_src = _manufactured(g, p["d1"], p["alpha"])
            if study == "parabolic":
                u = scalar_parabolic_solve(g, p["d1"], p["alpha"], -1.0, source, DIRICHLET,
                                           scheme=cfg.scheme).flat
                err = float(np.abs(u - exact).max())
            else:
                u = elliptic_scalar_solve(g, p["d1"], -1.0, ScalarField(g, ell_src.reshape(g.shape), SPACE_ONLY))
                err = float(np.abs(u.flat - prod).max())
            h = float(g.spacing.max())
            order = math.log(prev[1] / err) / math.log(prev[0] / h) if prev and err > 0 else None
            rows.append((study, n, h, g.dt, err, order))
            prev = (h, err)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study", "nx", "h", "dt", "sup_error", "observed_order"])
    for study, n, h, dt, err, order in rows:
        w.writerow([study, n, fmt(h), fmt(dt), fmt(err), "" if order is None else fmt(order)])
    return {"convergence.csv": buf.getvalue()}


COMMANDS = {
    "forward": cmd_forward,
    "dataset": cmd_dataset,
    "invert": cmd_invert,
    "verify": cmd_verify,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bioinverse", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else name)
        sp.add_argument("--config", required=True, help="YAML experiment configuration")
        sp.add_argument("--out", default=".", help="output directory (created if missing)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for dataset generation")
        sp.add_argument("--seed", type=int, default=0, help="reserved; all pipelines are deterministic")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "invert":
            sp.add_argument("--dataset", default=None, help="dataset CSV (default: OUT/dataset.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if not 0 <= args.seed < 2**64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        files = COMMANDS[args.command](cfg, args)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, ProblemError, AdjointError, MeasurementError, ReconstructionError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    try:
        write_outputs(args.out, files)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
