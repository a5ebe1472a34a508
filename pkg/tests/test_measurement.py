import numpy as np
import pytest

from bioinverse.adjoint import flux_functional
from bioinverse.forward import scalar_parabolic_solve
from bioinverse.grid import SPACE_ONLY, SPACE_TIME, as_field, build_grid
from bioinverse.measurement import (
    CSV_HEADER,
    ELLIPTIC,
    LINEAR_SPATIAL,
    NEUMANN_SCENARIO,
    NONLINEAR,
    ExperimentTemplate,
    MeasurementError,
    MeasurementRecord,
    WeightSpec,
    build_source_families,
    default_weights,
    extend_weight,
    generate_dataset,
    measure_field,
    monomial_exponents,
    read_records,
    record_indices,
    records_to_csv,
    weight_profile,
    write_records,
)


def grid(n=17, **kw):
    kw.setdefault("obs_faces", "all")
    return build_grid(1, nx=n, nt=n, **kw)


def template(g, l=-1.0, v=-2.0, d=1.0):
    return ExperimentTemplate(g, d, d, l, v)


# --------------------------------------------------------------------------
# families
# --------------------------------------------------------------------------
def test_a_norms_halve():
    fam = build_source_families(grid(), 3, 2, 0.1, 1)
    np.testing.assert_allclose(fam.a_norms, [0.1, 0.05, 0.025], rtol=0, atol=1e-17)
    for a, f in zip(fam.a_norms, fam.a_family):
        assert np.all(f.values == a)


def test_degree_one_space_time_family():
    g = grid()
    assert monomial_exponents(2, 1) == [(0, 0), (1, 0), (0, 1), (1, 1)]
    fam = build_source_families(g, 1, 4, 0.1, 1)
    assert fam.N == 4
    x, t = g.axes[0], g.times
    np.testing.assert_allclose(fam.q_family[3].flat - np.outer(t, x), fam.q_family[0].flat - 1.0)


def test_family_size_limit():
    with pytest.raises(MeasurementError, match="exceeds"):
        build_source_families(grid(), 1, 5, 0.1, 1)
    with pytest.raises(MeasurementError):
        build_source_families(grid(), 1, 1, 0.1, 1, scenario="bogus")


def test_separated_family_time_profiles():
    g = grid()
    fam = build_source_families(g, 2, 3, 0.1, 4, scenario=LINEAR_SPATIAL)
    assert fam.V[0] == 0.0
    np.testing.assert_allclose(fam.V_prime, 1.0)
    assert len(fam.q_family) == 6 and fam.N == 3
    assert fam.phi_family[0].kind == SPACE_ONLY


def test_record_counts():
    assert len(record_indices(NONLINEAR, 2, 3)) == 6
    assert len(record_indices(LINEAR_SPATIAL, 1, 3)) == 6
    assert record_indices(LINEAR_SPATIAL, 1, 1) == [(1, 1, 1), (1, 1, 2)]


# --------------------------------------------------------------------------
# weights and functionals
# --------------------------------------------------------------------------
def test_extend_weight_errors_and_zero_extension():
    g = build_grid(1, nx=9, nt=5, obs_faces=("x0+",))
    h = extend_weight(g, np.ones((5, 1)))
    assert h.flat[:, -1].tolist() == [1.0] * 5 and np.all(h.flat[:, :-1] == 0)
    with pytest.raises(MeasurementError, match="leaks"):
        extend_weight(g, np.ones((5, 9)))
    with pytest.raises(MeasurementError, match="negative"):
        extend_weight(g, -np.ones((5, 1)))
    with pytest.raises(MeasurementError):
        WeightSpec(weight_profile(g), weight_profile(g, SPACE_ONLY))


def test_zero_solution_measures_zero():
    g = grid()
    h = weight_profile(g)
    zero = np.zeros((g.nt, g.n_nodes))
    assert measure_field(g, zero, h, "flux") == 0.0
    assert measure_field(g, zero, h, "value") == 0.0


def test_stencil_flux_of_linear_profile():
    # u = x with unit weight on the right face: outward derivative 1
    g = build_grid(1, nx=9, nt=2, obs_faces=("x0+",))
    h = as_field(g, g.obs_mask.astype(float), SPACE_ONLY)
    assert measure_field(g, g.axes[0].copy(), h, "flux_stencil") == pytest.approx(1.0, abs=1e-14)


def test_consistent_flux_close_to_stencil_flux():
    g = grid(65)
    u = scalar_parabolic_solve(g, 1.0, None, -1.0, 1.0).flat
    h = weight_profile(g)
    a = measure_field(g, u, h, "flux")
    b = measure_field(g, u, h, "flux_stencil")
    assert a < 0 and abs(a - b) / abs(b) < 0.05


def test_unknown_mode():
    g = grid()
    with pytest.raises(MeasurementError, match="mode"):
        measure_field(g, np.zeros((g.nt, g.n_nodes)), weight_profile(g), "bogus")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------
def test_symmetric_problem_gives_equal_measurements():
    g = grid()
    fam = build_source_families(g, 2, 2, 0.1, 1)
    recs = generate_dataset(template(g, v=-1.0), fam, default_weights(g), NONLINEAR)
    for r in recs:
        assert r.F == pytest.approx(r.G, rel=1e-10, abs=1e-14)


def test_dataset_is_deterministic_and_thread_independent():
    g = grid()
    fam = build_source_families(g, 2, 3, 0.1, 1)
    w = default_weights(g)
    a = generate_dataset(template(g), fam, w, NONLINEAR)
    b = generate_dataset(template(g), fam, w, NONLINEAR, workers=3)
    assert a == b
    assert [(r.s, r.n, r.j) for r in a] == record_indices(NONLINEAR, 2, 3)


def test_dataset_kind_checks():
    g = grid()
    fam = build_source_families(g, 1, 1, 0.1, 1)
    with pytest.raises(MeasurementError, match="weights"):
        generate_dataset(template(g), fam, default_weights(g, SPACE_ONLY), NONLINEAR)
    with pytest.raises(MeasurementError, match="separated"):
        generate_dataset(template(g), fam, default_weights(g), LINEAR_SPATIAL)


def test_neumann_and_elliptic_datasets_run():
    g = grid()
    fam = build_source_families(g, 2, 2, 0.1, 1, scenario=NEUMANN_SCENARIO)
    recs = generate_dataset(template(g), fam, default_weights(g), NEUMANN_SCENARIO)
    assert all(r.F > 0 for r in recs)
    fam = build_source_families(g, 2, 2, 0.1, 1, scenario=ELLIPTIC)
    recs = generate_dataset(template(g), fam, default_weights(g, SPACE_ONLY), ELLIPTIC)
    assert all(r.F < 0 for r in recs)


def test_csv_round_trip(tmp_path):
    recs = [MeasurementRecord(NONLINEAR, 1, 2, 0, 0.1, -1 / 3, np.pi),
            MeasurementRecord(NONLINEAR, 2, 2, 0, 0.05, 1e-300, -0.0)]
    path = tmp_path / "d.csv"
    write_records(str(path), recs)
    assert read_records(str(path)) == recs
    assert records_to_csv(recs).splitlines()[0] == ",".join(CSV_HEADER)


def test_csv_malformed(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(",".join(CSV_HEADER) + "\nnonlinear_parabolic,1,1,0,0.1,abc,1\n")
    with pytest.raises(MeasurementError, match="line 2"):
        read_records(str(path))
    path.write_text("a,b\n")
    with pytest.raises(MeasurementError, match="header"):
        read_records(str(path))


def test_measurements_approach_linear_limit_linearly():
    # |F(a) - F_lin| = O(a): log-log slope close to 1
    g = grid(17, T=0.5)
    fam = build_source_families(g, 4, 1, 0.2, 1)
    recs = generate_dataset(template(g), fam, default_weights(g), NONLINEAR, tol=1e-13)
    q = fam.q_family[0]
    h = weight_profile(g).flat
    F_lin = flux_functional(g, scalar_parabolic_solve(g, 1.0, None, -1.0, q).flat, h, 1.0)
    err = np.array([abs(r.F - F_lin) for r in recs])
    slope = np.polyfit(np.log(fam.a_norms), np.log(err), 1)[0]
    assert slope >= 0.9


def test_space_time_template_coefficient():
    g = grid()
    t = ExperimentTemplate(g, 1.0, 1.0, as_field(g, -1.0, SPACE_ONLY), -1.0)
    assert t.coefficient("l", SPACE_TIME).values.shape == (g.nt,) + g.shape
