"""
Experiment configuration: YAML schema, validation and closed-form expressions.

A configuration is a mapping with the blocks below; every key is optional and
falls back to the default shown.

.. code-block:: yaml

    scenario: nonlinear_parabolic   # nonlinear_parabolic | linear_spatial | elliptic | neumann
    grid:
      dim: 1
      extents: [[0.0, 1.0]]
      nx: 33                        # int, or one int per axis
      nt: 33
      T: 1.0
      obs_faces: all                # "all" or a list such as [x0-, x0+]
    problem:
      d1: 1.0
      d2: 1.0
      alpha: [0.0]                  # convection vectors, one entry per axis
      beta: [0.0]
      l: "-1 - x*(1 - x)*t"         # expressions in x (x1, x2), t; or numbers
      v: "-1"
      reaction: nonlinear_power     # forward command only: nonlinear_power | linear_coupling
      M: 1
      a1: "1"                       # nonlinear_power coefficients
      a2: "1"
      b1: "1"                       # linear_coupling / elliptic coefficients
      b2: "1"
      q1: "1"
      q2: "1"
    families: {S: 4, N: 10, a_max: 0.05, basis_degree: 4, V: t}
    weights: {decay: 1.0, spatial: uniform}
    inverse: {lambda: 1.0e-8, tau: 1.0e-3, delta_T: 4}
    solver: {tol: 1.0e-11, max_iter: 200, convection: upwind}
    convergence: {levels: [9, 17, 33, 65]}
    output: {fields: true}

The boundary kind follows the scenario (``neumann`` uses zero-flux walls,
every other scenario zero Dirichlet data). ``delta_T`` counts time levels.
"""

from __future__ import annotations

import ast
import copy
import math
import operator

import numpy as np
import yaml

from .grid import (
    CENTERED,
    SCHEMES,
    SPACE_ONLY,
    SPACE_TIME,
    UPWIND,
    GridError,
    ScalarField,
    SpaceTimeGrid,
    build_grid,
)
from .inverse import InverseConfig
from .measurement import (
    ELLIPTIC,
    LINEAR_SPATIAL,
    SCENARIOS,
    ExperimentTemplate,
    SourceFamily,
    WeightSpec,
    build_source_families,
    default_weights,
    scenario_boundary,
    scenario_kind,
)

__all__ = [
    "ConfigError",
    "Expression",
    "ExperimentConfig",
    "DEFAULTS",
    "load_config",
    "parse_config",
    "dump_config",
]

REACTIONS = ("nonlinear_power", "linear_coupling")

DEFAULTS = {
    "scenario": "nonlinear_parabolic",
    "grid": {"dim": 1, "extents": None, "nx": 33, "nt": 33, "T": 1.0, "obs_faces": "all"},
    "problem": {
        "d1": 1.0, "d2": 1.0, "alpha": None, "beta": None,
        "l": "-1", "v": "-1",
        "reaction": "nonlinear_power", "M": 1,
        "a1": "1", "a2": "1", "b1": "1", "b2": "1", "q1": "1", "q2": "1",
    },
    "families": {"S": 4, "N": 10, "a_max": 0.05, "basis_degree": 4, "V": "t"},
    "weights": {"decay": 1.0, "spatial": "uniform"},
    "inverse": {"lambda": 1e-8, "tau": 1e-3, "delta_T": 4},
    "solver": {"tol": 1e-11, "max_iter": 200, "convection": UPWIND},
    "convergence": {"levels": [9, 17, 33, 65]},
    "output": {"fields": True},
}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": math.pi}


class Expression:
    """Closed-form scalar expression over ``x`` (``x1``, ``x2``) and ``t``.

    Only numbers, ``+ - * / ^ **``, unary signs, ``sin``, ``cos``, ``exp``,
    ``pi`` and the coordinate names are accepted; anything else is rejected
    when the expression is parsed, so evaluation never runs arbitrary code.
    """

    def __init__(self, source, path: str = "expression"):
        if isinstance(source, bool) or not isinstance(source, (str, int, float)):
            raise ConfigError(path, f"expected a number or expression string, got {source!r}")
        self.source = source if isinstance(source, str) else repr(float(source))
        self.path = path
        try:
            # "^" is power with Python's ** precedence, not XOR
            tree = ast.parse(self.source.strip().replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(path, f"cannot parse {self.source!r} ({exc.msg})") from None
        self.names = set()
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and type(node.value) in (int, float):
            pass
        elif isinstance(node, ast.Name) and (node.id in ("x", "x1", "x2", "t") or node.id in _CONSTS):
            if node.id not in _CONSTS:
                self.names.add(node.id)
        elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
              and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            self._check(node.args[0])
        else:
            raise ConfigError(self.path, f"unsupported syntax in {self.source!r}: {ast.dump(node)[:40]}")

    @property
    def time_dependent(self) -> bool:
        return "t" in self.names

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return _CONSTS[node.id] if node.id in _CONSTS else env[node.id]
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, *coords, t=0.0):
        env = {"t": t}
        for i, c in enumerate(coords):
            env[f"x{i + 1}"] = c
        if coords:
            env["x"] = coords[0]
        missing = self.names - set(env)
        if missing:
            raise ConfigError(self.path, f"variable {sorted(missing)[0]} is not defined in {len(coords)}D")
        with np.errstate(all="ignore"):
            return self._eval(self._tree, env)

    def field(self, grid: SpaceTimeGrid, kind: str = SPACE_TIME) -> ScalarField:
        """Evaluate on the lattice; non-finite values are rejected with the node."""
        if kind == SPACE_ONLY:
            if self.time_dependent:
                raise ConfigError(self.path, f"{self.source!r} depends on t but a spatial field is needed")
            vals = np.broadcast_to(np.asarray(self(*grid.mesh), float), grid.shape).copy()
        else:
            tt = grid.times.reshape((-1,) + (1,) * grid.dim)
            coords = [m[None, ...] for m in grid.mesh]
            vals = np.broadcast_to(np.asarray(self(*coords, t=tt), float), (grid.nt,) + grid.shape).copy()
        fld = ScalarField(grid, vals, kind)
        bad = ~np.isfinite(fld.flat)
        if bad.any():
            raise ConfigError(self.path, f"non-finite value at {_node_name(grid, kind, bad)}")
        return fld

    def __repr__(self):
        return f"Expression({self.source!r})"


def _node_name(grid: SpaceTimeGrid, kind: str, mask: np.ndarray) -> str:
    """Human-readable coordinates of the first ``True`` entry of a flat mask."""
    idx = np.unravel_index(int(np.argmax(mask)), mask.shape)
    node = idx[-1]
    names = ["x"] if grid.dim == 1 else ["x1", "x2"]
    parts = [f"{n}={grid.node_coords[node, a]:.6g}" for a, n in enumerate(names)]
    if kind == SPACE_TIME:
        parts.append(f"t={grid.times[idx[0]]:.6g}")
    return "node (" + ", ".join(parts) + ")"


# --------------------------------------------------------------------------
# Loading and validation
# --------------------------------------------------------------------------
def _merge(defaults: dict, raw: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in raw.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(where, "unknown key")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected a mapping")
            out[key] = _merge(defaults[key], val, where)
        else:
            out[key] = val
    return out


def _num(data, path, kind=float, positive=False, nonneg=False):
    block, _, key = path.rpartition(".")
    val = data[block][key] if block else data[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(path, f"expected a number, got {val!r}")
    if kind is int:
        if float(val) != int(val):
            raise ConfigError(path, f"expected an integer, got {val!r}")
        val = int(val)
    else:
        val = float(val)
    if not math.isfinite(val):
        raise ConfigError(path, "must be finite")
    if positive and not val > 0:
        raise ConfigError(path, f"must be positive, got {val!r}")
    if nonneg and val < 0:
        raise ConfigError(path, f"must be nonnegative, got {val!r}")
    if block:
        data[block][key] = val
    else:
        data[key] = val
    return val


def _vector(data, path, dim):
    block, _, key = path.rpartition(".")
    val = data[block][key]
    if val is None:
        return
    vals = [val] if isinstance(val, (int, float)) and not isinstance(val, bool) else val
    if not isinstance(vals, list) or len(vals) != dim:
        raise ConfigError(path, f"expected {dim} numbers")
    out = []
    for i, x in enumerate(vals):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(f"{path}[{i}]", f"expected a finite number, got {x!r}")
        out.append(float(x))
    data[block][key] = out


def _expr_source(data, path):
    block, _, key = path.rpartition(".")
    val = data[block][key]
    expr = Expression(val, path)
    # numbers are normalised to strings so a dump/load cycle is a fixed point
    data[block][key] = expr.source
    return expr


class ExperimentConfig:
    """Validated configuration plus builders for the solver objects.

    ``data`` holds the normalised nested mapping (defaults filled in,
    numbers converted, expressions kept as source strings); it is what
    :func:`dump_config` writes back.
    """

    def __init__(self, raw: dict | None = None):
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "configuration must be a mapping")
        data = _merge(DEFAULTS, raw)
        self.data = data
        self._validate()

    # ------------------------------------------------------------------
    def _validate(self):
        d = self.data
        if d["scenario"] not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {d['scenario']!r}; choose from {list(SCENARIOS)}")
        g = d["grid"]
        dim = _num(d, "grid.dim", int)
        if dim not in (1, 2):
            raise ConfigError("grid.dim", "only 1 and 2 are supported")
        if isinstance(g["nx"], list):
            if len(g["nx"]) != dim:
                raise ConfigError("grid.nx", f"expected {dim} node counts")
            for i, n in enumerate(g["nx"]):
                if isinstance(n, bool) or not isinstance(n, int) or n < 3:
                    raise ConfigError(f"grid.nx[{i}]", f"need an integer >= 3, got {n!r}")
        else:
            if _num(d, "grid.nx", int) < 3:
                raise ConfigError("grid.nx", "need nx >= 3 (no interior nodes otherwise)")
        if _num(d, "grid.nt", int) < 2:
            raise ConfigError("grid.nt", "need nt >= 2")
        _num(d, "grid.T", positive=True)
        if g["extents"] is not None:
            ext = g["extents"]
            if not isinstance(ext, list) or len(ext) != dim:
                raise ConfigError("grid.extents", f"expected {dim} [lo, hi] pairs")
            for i, pair in enumerate(ext):
                if not (isinstance(pair, list) and len(pair) == 2
                        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair)):
                    raise ConfigError(f"grid.extents[{i}]", "expected [lo, hi]")
            g["extents"] = [[float(lo), float(hi)] for lo, hi in ext]
        obs = g["obs_faces"]
        if not (obs == "all" or (isinstance(obs, list) and all(isinstance(f, str) for f in obs))):
            raise ConfigError("grid.obs_faces", "expected 'all' or a list of face names")
        try:
            self._grid = self._build_grid()
        except GridError as exc:
            raise ConfigError("grid", str(exc)) from None

        p = d["problem"]
        _num(d, "problem.d1", positive=True)
        _num(d, "problem.d2", positive=True)
        _vector(d, "problem.alpha", dim)
        _vector(d, "problem.beta", dim)
        if p["reaction"] not in REACTIONS:
            raise ConfigError("problem.reaction", f"expected one of {list(REACTIONS)}")
        if _num(d, "problem.M", int) < 1:
            raise ConfigError("problem.M", "must be >= 1")
        kind = self.coefficient_kind
        self._expr = {}
        for key in ("l", "v", "a1", "a2", "b1", "b2", "q1", "q2"):
            self._expr[key] = _expr_source(d, f"problem.{key}")
        for key, sign in (("l", "negative"), ("v", "negative"), ("a1", "positive"), ("a2", "positive"),
                          ("b1", "positive"), ("b2", "positive"), ("q1", "nonnegative"), ("q2", "nonnegative")):
            fkind = kind if key in ("l", "v") else (SPACE_ONLY if d["scenario"] == ELLIPTIC else SPACE_TIME)
            vals = self._expr[key].field(self._grid, fkind).flat
            bad = {"negative": vals >= 0, "positive": vals <= 0, "nonnegative": vals < 0}[sign]
            if bad.any():
                first = vals[np.unravel_index(int(np.argmax(bad)), bad.shape)]
                raise ConfigError(f"problem.{key}",
                                  f"must be {sign}; value {first:.6g} at {_node_name(self._grid, fkind, bad)}")

        _num(d, "families.S", int, positive=True)
        _num(d, "families.N", int, positive=True)
        _num(d, "families.a_max", positive=True)
        _num(d, "families.basis_degree", int, nonneg=True)
        if d["families"]["V"] != "t":
            raise ConfigError("families.V", "only the profile 't' is supported")

        _num(d, "weights.decay", nonneg=True)
        if d["weights"]["spatial"] not in ("uniform", "bump"):
            raise ConfigError("weights.spatial", "expected 'uniform' or 'bump'")

        _num(d, "inverse.lambda", nonneg=True)
        _num(d, "inverse.tau", positive=True)
        _num(d, "inverse.delta_T", int, positive=True)

        _num(d, "solver.tol", positive=True)
        _num(d, "solver.max_iter", int, positive=True)
        if d["solver"]["convection"] not in SCHEMES:
            raise ConfigError("solver.convection", f"expected one of {list(SCHEMES)}")

        levels = d["convergence"]["levels"]
        if not isinstance(levels, list) or len(levels) < 2:
            raise ConfigError("convergence.levels", "need at least two grid sizes")
        for i, n in enumerate(levels):
            if isinstance(n, bool) or not isinstance(n, int) or n < 3:
                raise ConfigError(f"convergence.levels[{i}]", f"need an integer >= 3, got {n!r}")
        if not isinstance(d["output"]["fields"], bool):
            raise ConfigError("output.fields", "expected true or false")

    def _build_grid(self, nx=None, nt=None) -> SpaceTimeGrid:
        g = self.data["grid"]
        return build_grid(g["dim"], g["extents"], g["nx"] if nx is None else nx,
                          g["nt"] if nt is None else nt, g["T"], g["obs_faces"])

    # ------------------------------------------------------------------
    @property
    def scenario(self) -> str:
        return self.data["scenario"]

    @property
    def boundary(self) -> str:
        return scenario_boundary(self.scenario)

    @property
    def kind(self) -> str:
        return scenario_kind(self.scenario)

    @property
    def coefficient_kind(self) -> str:
        """``l`` and ``v`` are spatial in the elliptic and linear spatial scenarios."""
        return SPACE_ONLY if self.scenario in (ELLIPTIC, LINEAR_SPATIAL) else SPACE_TIME

    @property
    def scheme(self) -> str:
        return self.data["solver"]["convection"]

    @property
    def centered(self) -> bool:
        return self.scheme == CENTERED

    def grid(self, nx=None, nt=None) -> SpaceTimeGrid:
        if nx is None and nt is None:
            return self._grid
        return self._build_grid(nx, nt)

    def expression(self, key: str) -> Expression:
        return self._expr[key]

    def coefficient(self, key: str, grid: SpaceTimeGrid | None = None, kind: str | None = None) -> ScalarField:
        return self._expr[key].field(grid or self._grid, kind or self.coefficient_kind)

    def template(self, grid: SpaceTimeGrid | None = None) -> ExperimentTemplate:
        g = grid or self._grid
        p = self.data["problem"]
        return ExperimentTemplate(g, p["d1"], p["d2"], self.coefficient("l", g), self.coefficient("v", g),
                                  p["alpha"], p["beta"], p["M"])

    def families(self, grid: SpaceTimeGrid | None = None) -> SourceFamily:
        f = self.data["families"]
        return build_source_families(grid or self._grid, f["S"], f["N"], f["a_max"], f["basis_degree"],
                                     self.scenario)

    def weights(self, grid: SpaceTimeGrid | None = None) -> WeightSpec:
        w = self.data["weights"]
        return default_weights(grid or self._grid, self.kind, w["decay"], w["spatial"])

    def inverse_config(self) -> InverseConfig:
        i = self.data["inverse"]
        return InverseConfig(lam=i["lambda"], tau=i["tau"], band_levels=i["delta_T"])

    @property
    def record_count(self) -> int:
        f = self.data["families"]
        return f["S"] * f["N"] * (2 if self.scenario == LINEAR_SPATIAL else 1)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"invalid YAML ({exc})") from None
    return ExperimentConfig(raw)


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a YAML file; I/O errors propagate as ``OSError``."""
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(config: ExperimentConfig) -> str:
    """Normalised YAML; ``parse_config(dump_config(c)) == c``."""
    return yaml.safe_dump(config.data, sort_keys=False, default_flow_style=None)
