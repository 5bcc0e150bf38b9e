import csv

import numpy as np
import pytest

from couplopt.config import load_config
from couplopt.constraints import (
    ConstraintError,
    ConstraintRow,
    ConstraintSpec,
    build_probes,
    capture_baselines,
    cast_ray,
    evaluate_spec,
    measure_widths_and_gaps,
    write_constraint_report,
)
from couplopt.mesh import CrossSection2D, extrude
from couplopt.optim import analyze, build_problem, make_probes
from couplopt.shape_param import build_morph_operator

UM = 1e-6


@pytest.fixture(scope="module")
def two_strips():
    rects = [(-2, 0, 0, 5), (0, 0, 20, 1.5), (0, 3.5, 20, 5), (20, 0, 22, 5)]
    sec = CrossSection2D.from_rectangles([tuple(v * UM for v in r) for r in rects], ["anchor", "spring", "spring", "anchor"])
    mesh = extrude(sec, 2 * UM, 1, 0.5 * UM, fix="all")
    return mesh, build_morph_operator(mesh, None, ("spring",), 0)


@pytest.fixture(scope="module")
def problem1(configs):
    cfg = configs / "problem1.cfg"
    return build_problem(load_config(cfg), cfg.parent)


@pytest.fixture(scope="module")
def initial(problem1):
    a = analyze(problem1, np.zeros(problem1.n_params))
    return a, capture_baselines(a, problem1.specs), make_probes(problem1)


def interior_sites(mesh, probes):
    x = mesh.points2d[probes.sites, 0]
    return (x > 1 * UM) & (x < 19 * UM)


def test_spec_validation():
    with pytest.raises(ConstraintError, match="unknown"):
        ConstraintSpec("maxWidth")
    with pytest.raises(ConstraintError, match="finite"):
        ConstraintSpec("minWidth", bound=float("inf"))
    assert ConstraintSpec("freqBand", labels=("drive",)).id == "freqBand_drive"
    assert len(ConstraintSpec("couplingAbsLE", labels=(0, 1, 2), aggregate="bar").triples()) == 6


def test_strip_widths_and_gaps(two_strips):
    mesh, morph = two_strips
    width = build_probes(mesh, morph, "width")
    keep = interior_sites(mesh, width)
    w = measure_widths_and_gaps(mesh, width)[keep]
    assert np.allclose(w, 1.5 * UM, rtol=0, atol=1e-12)
    gap = build_probes(mesh, morph, "gap")
    # outer edges see nothing and are dropped; the facing edges see each other
    y = mesh.points2d[gap.sites, 1]
    assert set(np.round(y / UM, 6)) == {1.5, 3.5}
    g = measure_widths_and_gaps(mesh, gap)[interior_sites(mesh, gap)]
    assert np.allclose(g, 2.0 * UM, rtol=0, atol=1e-12)


def test_gap_horizon_drops_far_walls(two_strips):
    mesh, morph = two_strips
    assert len(build_probes(mesh, morph, "gap", horizon=1 * UM)) == 0


@pytest.mark.parametrize("kind", ["width", "gap"])
def test_ray_length_gradient(two_strips, rng, kind):
    mesh, morph = two_strips
    probes = build_probes(mesh, morph, kind)
    pts = mesh.points2d
    h = 1e-6  # in micrometers
    for k in rng.choice(len(probes), 5, replace=False):
        hit = cast_ray(pts, probes, k)
        # design motion is along the frozen normals; sideways motion of a hit
        # vertex would switch edges where the length has a kink
        v = {i: rng.standard_normal() * morph.normals[i] for i in hit.grad2d}
        moved = []
        for s in (h, -h):
            q = pts.copy()
            for i, d in v.items():
                q[i] += s * d * UM
            moved.append(cast_ray(q, probes, k).length)
        fd = (moved[0] - moved[1]) / (2 * h * UM)
        an = sum(g @ v[i] for i, g in hit.grad2d.items())
        assert an == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_width_rows_feasible_with_gradients(problem1, initial):
    a, base, probes = initial
    spec = next(s for s in problem1.specs if s.kind == "minWidth")
    rows = evaluate_spec(a, spec, base, probes)
    assert all(r.value <= 0.0 for r in rows)
    assert all(r.gradient.shape == (problem1.n_params,) for r in rows)


def test_objective_vanishes_at_initial_design(problem1, initial):
    a, base, probes = initial
    spec = next(s for s in problem1.specs if s.is_objective)
    (row,) = evaluate_spec(a, spec, base, probes)
    assert row.value == 0.0
    assert np.all(row.gradient == 0.0)


def test_coupling_rows_scale_with_factor(problem1, initial):
    a, base, _ = initial
    spec = next(s for s in problem1.specs if s.kind == "couplingAbsLE")
    values = []
    for factor in (0.001, 0.1, 1.0, 2.0):
        s = ConstraintSpec(spec.kind, spec.id, spec.labels, spec.aggregate, factor)
        (row,) = evaluate_spec(a, s, base, gradients=False)
        values.append(row.value)
    assert np.all(np.diff(values) < 0)
    assert values[2] == pytest.approx(0.0, abs=1e-15)
    ge = ConstraintSpec("couplingAbsGE", spec.id, spec.labels, spec.aggregate, 1.0)
    (row,) = evaluate_spec(a, ge, base, gradients=False)
    assert row.value == pytest.approx(0.0, abs=1e-15)


def test_initial_design_band_and_ratio_satisfied(problem1, initial):
    a, base, probes = initial
    for spec in problem1.specs:
        if spec.kind in ("freqBand", "eigvecRatioLE"):
            (row,) = evaluate_spec(a, spec, base, probes, gradients=False)
            assert row.value < 0.0


def test_constraint_report(tmp_path):
    rows = [(0, ConstraintRow("a", -0.5, 1.0, 2.0)), (1, ConstraintRow("a", 0.25, 3.0, 2.0))]
    path = tmp_path / "c.csv"
    write_constraint_report(path, rows)
    with open(path, newline="") as fh:
        data = list(csv.reader(fh))
    assert data[0] == ["iter", "constraint_id", "value", "feasible", "bound"]
    assert data[1] == ["0", "a", "-0.5", "1", "2.0"]
    assert data[2][3] == "0"
