import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bioinverse.config import ConfigError, Expression, dump_config, load_config, parse_config
from bioinverse.grid import SPACE_ONLY, build_grid

BASE = """
scenario: nonlinear_parabolic
grid: {dim: 1, nx: 9, nt: 5, T: 1.0}
problem: {d1: 2.0, d2: 1.0, l: "-1 - x*t", v: -2}
families: {S: 2, N: 3, a_max: 0.1, basis_degree: 1}
"""


def test_defaults_and_builders():
    cfg = parse_config(BASE)
    g = cfg.grid()
    assert g.shape == (9,) and g.nt == 5
    assert cfg.record_count == 6
    assert cfg.families().S == 2
    assert cfg.template().d1 == 2.0
    assert cfg.data["solver"]["convection"] == "upwind" and not cfg.centered
    np.testing.assert_allclose(cfg.coefficient("l").flat, -1 - np.outer(g.times, g.axes[0]))


def test_round_trip():
    cfg = parse_config(BASE)
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_load_from_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(BASE)
    assert load_config(str(p)) == parse_config(BASE)
    with pytest.raises(OSError):
        load_config(str(tmp_path / "missing.yaml"))


def test_sign_violation_names_the_node():
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace('l: "-1 - x*t"', 'l: "x - 0.5"'))
    assert exc.value.path == "problem.l"
    assert "must be negative" in str(exc.value) and "node (x=0.5" in str(exc.value)


@pytest.mark.parametrize("text, path", [
    (BASE + "extra: 1\n", "extra"),
    (BASE.replace("nx: 9", "nx: 2"), "grid.nx"),
    (BASE.replace("S: 2", "S: 0"), "families.S"),
    (BASE.replace("nonlinear_parabolic", "bogus"), "scenario"),
    (BASE + "solver: {convection: weird}\n", "solver.convection"),
    (BASE + "inverse: {tau: -1}\n", "inverse.tau"),
    ("[1, 2]", "<root>"),
    ("a: [", "<root>"),
])
def test_config_errors(text, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.path == path


@pytest.mark.parametrize("src", ["__import__('os')", "x.real", "[x]", "open('f')", "lambda: 1", "y + 1"])
def test_unsafe_or_unknown_expressions_rejected(src):
    g = build_grid(1, nx=5, nt=2)
    with pytest.raises(ConfigError):
        Expression(src).field(g)


def test_expression_operators():
    g = build_grid(1, nx=5, nt=3)
    e = Expression("x^2 + 2**x - sin(pi*x)*cos(t) + exp(-t)/2")
    x, t = g.axes[0][None, :], g.times[:, None]
    expected = x**2 + 2**x - np.sin(np.pi * x) * np.cos(t) + np.exp(-t) / 2
    np.testing.assert_allclose(e.field(g).flat, expected, rtol=1e-14)
    assert e.time_dependent and not Expression("x").time_dependent


def test_expression_time_dependence_rejected_for_spatial_fields():
    g = build_grid(1, nx=5, nt=3)
    with pytest.raises(ConfigError, match="depends on t"):
        Expression("x*t").field(g, SPACE_ONLY)


def test_non_finite_expression_reported():
    g = build_grid(1, nx=5, nt=3)
    with pytest.raises(ConfigError, match="non-finite"):
        Expression("1/x").field(g)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-100, 100, allow_nan=False), k=st.floats(-3, 3, allow_nan=False))
def test_numeric_expressions_match_python(c, k):
    g = build_grid(1, nx=5, nt=2)
    e = Expression(f"{c!r} + {k!r}*x")
    np.testing.assert_allclose(e.field(g, SPACE_ONLY).flat, c + k * g.axes[0], rtol=1e-14, atol=1e-12)
