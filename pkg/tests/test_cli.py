import csv
import json

import pytest

from bioinverse.cli import main

SMALL = """
scenario: {scenario}
grid: {{dim: 1, nx: 9, nt: 9, T: 1.0}}
problem: {{d1: 2.0, d2: 2.0, l: "-1 - x*t", v: -1.5{extra}}}
families: {{S: 2, N: 3, a_max: 0.05, basis_degree: 2}}
{tail}
"""


def write_config(tmp_path, scenario="nonlinear_parabolic", extra="", tail="", name="c.yaml"):
    p = tmp_path / name
    p.write_text(SMALL.format(scenario=scenario, extra=extra, tail=tail))
    return str(p)


def run(cfg, out, *more):
    return main([more[0] if more else "forward", "--config", cfg, "--out", str(out), *more[1:]])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_source_forward_is_all_zero_and_reproducible(tmp_path):
    cfg = write_config(tmp_path, extra=", q1: 0, q2: 0")
    assert run(cfg, tmp_path / "a", "forward") == 0
    assert run(cfg, tmp_path / "b", "forward") == 0
    for name in ("u.csv", "m.csv"):
        table = rows(tmp_path / "a" / name)
        assert table[0][:2] == ["x", "t=0"] and len(table) == 10
        assert all(float(v) == 0.0 for row in table[1:] for v in row[1:])
    for name in ("u.csv", "m.csv", "forward_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_forward_summary_fields(tmp_path):
    assert run(write_config(tmp_path), tmp_path, "forward") == 0
    s = json.loads((tmp_path / "forward_summary.json").read_text())
    assert s["reaction"] == "nonlinear_power" and s["monotonicity_violation"] <= 1e-12
    assert s["iterations"] > 1 and min(s["sector_upper"]) > 0


@pytest.mark.parametrize("scenario, count", [("nonlinear_parabolic", 6), ("linear_spatial", 12),
                                             ("neumann", 6), ("elliptic", 6)])
def test_dataset_row_counts(tmp_path, scenario, count):
    tail = "families: {S: 2, N: 3, a_max: 0.05, basis_degree: 2}"
    cfg = write_config(tmp_path, scenario, extra=', l: "-1 - x"' if scenario in ("elliptic", "linear_spatial") else "")
    cfg_text = open(cfg).read()
    if scenario in ("elliptic", "linear_spatial"):
        cfg_text = cfg_text.replace('l: "-1 - x*t", ', "")
        open(cfg, "w").write(cfg_text)
    assert tail in cfg_text
    assert run(cfg, tmp_path, "dataset", "--threads", "2") == 0
    table = rows(tmp_path / "dataset.csv")
    assert table[0] == ["scenario", "s", "n", "j", "a_norm", "F", "G"]
    assert len(table) - 1 == count
    assert {r[0] for r in table[1:]} == {scenario}


def test_dataset_then_invert(tmp_path):
    cfg = write_config(tmp_path)
    assert run(cfg, tmp_path, "dataset") == 0
    assert run(cfg, tmp_path, "invert") == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert set(res) == {"scenario", "lambda", "tau", "delta_T", "rel_error_l", "rel_error_v", "moment_residual"}
    assert res["delta_T"] == pytest.approx(4 * 1.0 / 8)
    table = rows(tmp_path / "fields.csv")
    assert table[0] == ["x", "t", "l_true", "l_hat", "mask_l", "v_true", "v_hat", "mask_v"]
    assert len(table) - 1 == 9 * 9
    for r in table[1:]:
        assert r[4] in ("0", "1")
        if r[4] == "0":
            assert r[3] == "nan"


def test_invert_missing_dataset_is_io_error(tmp_path):
    assert run(write_config(tmp_path), tmp_path, "invert") == 4
    assert not (tmp_path / "result.json").exists()


def test_invert_incomplete_dataset_is_solver_error(tmp_path):
    cfg = write_config(tmp_path)
    assert run(cfg, tmp_path, "dataset") == 0
    lines = (tmp_path / "dataset.csv").read_text().splitlines()
    (tmp_path / "short.csv").write_text("\n".join(lines[:-1]) + "\n")
    assert run(cfg, tmp_path, "invert", "--dataset", str(tmp_path / "short.csv")) == 3


def test_bad_output_path_leaves_no_partial_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(write_config(tmp_path), blocker, "forward") == 4
    assert blocker.read_text() == "x"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.yaml", "file"]


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, extra=", d3: 1")
    assert run(cfg, tmp_path / "o", "forward") == 2
    assert "problem.d3" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert main(["forward", "--config", str(tmp_path / "nope.yaml")]) == 4
    assert run(write_config(tmp_path), tmp_path, "forward", "--threads", "0") == 2
    assert run(write_config(tmp_path), tmp_path, "forward", "--seed", "-1") == 2


def test_verify_schema_and_upwind_pass(tmp_path):
    assert run(write_config(tmp_path), tmp_path, "verify") == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert set(rep) == {"scenario", "convection", "checks", "all_pass"}
    names = [c["name"] for c in rep["checks"]]
    assert names == ["duality_dirichlet", "duality_neumann", "comparison_principle",
                     "monotone_ordering", "steady_state_agreement"]
    for c in rep["checks"]:
        assert {"name", "status", "value", "threshold", "margin"} <= set(c)
        assert c["status"] == "pass"
    assert rep["all_pass"] is True and rep["convection"] == "upwind"


def test_verify_flags_centered_scheme_at_high_peclet(tmp_path):
    cfg = tmp_path / "cen.yaml"
    cfg.write_text(
        "scenario: nonlinear_parabolic\n"
        "grid: {dim: 1, nx: 33, nt: 33, T: 1.0}\n"
        "problem: {d1: 0.01, d2: 0.01, alpha: [5.0], beta: [5.0]}\n"
        "solver: {convection: centered}\n"
    )
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    status = {c["name"]: c for c in rep["checks"]}
    assert status["duality_dirichlet"]["status"] == "pass"
    assert status["comparison_principle"]["status"] == "fail"
    assert "centered" in status["comparison_principle"]["note"]
    assert rep["all_pass"] is False


def test_convergence_table(tmp_path):
    cfg = write_config(tmp_path, tail="convergence: {levels: [9, 17, 33]}")
    assert run(cfg, tmp_path, "convergence") == 0
    table = rows(tmp_path / "convergence.csv")
    assert table[0] == ["study", "nx", "h", "dt", "sup_error", "observed_order"]
    assert [r[0] for r in table[1:]] == ["parabolic"] * 3 + ["elliptic"] * 3
    assert table[1][5] == "" and table[4][5] == ""
    assert float(table[6][5]) > 1.8
    assert float(table[3][5]) > 0.9


def test_fields_output_can_be_disabled(tmp_path):
    cfg = write_config(tmp_path, tail="output: {fields: false}")
    assert run(cfg, tmp_path, "forward") == 0
    assert run(cfg, tmp_path, "dataset") == 0
    assert run(cfg, tmp_path, "invert") == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["c.yaml", "dataset.csv", "forward_summary.json", "result.json"]
