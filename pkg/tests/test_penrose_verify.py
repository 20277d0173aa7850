import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace_penrose.elliptic_solver import make_curvature_bump
from halfspace_penrose.mass_quadrature import halfspace_mass
from halfspace_penrose.metric_core import (
    DomainSpec,
    make_conformally_flat,
    make_schwarzschild,
    make_schwarzschild_halfspace,
    pole_factor,
    unit_sphere_area,
)
from halfspace_penrose.penrose_verify import (
    NoHorizonError,
    PenroseError,
    PenroseReport,
    find_horizon_axisymmetric,
    find_horizon_radial,
    horizon_area,
    penrose_ratio,
    penrose_rhs,
)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=3, max_value=7), st.floats(0.05, 20.0))
def test_schwarzschild_halfspace_saturates(n, m):
    g = make_schwarzschild_halfspace(n, m)
    hz = find_horizon_radial(g.factor, n)
    assert hz.radius == pytest.approx(m ** (1.0 / (n - 2)), rel=1e-10)
    area = horizon_area(g.factor, n, hz.radius)
    # hemisphere of radius r_h with u = 2 there
    ref = 0.5 * unit_sphere_area(n) * 2 ** (2 * (n - 1) / (n - 2)) * hz.radius ** (n - 1)
    assert area == pytest.approx(ref, rel=1e-10)
    assert penrose_ratio(m, area, n).ratio == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("n", [3, 4, 6])
def test_closed_schwarzschild_saturates(n):
    g = make_schwarzschild(n, 2.0)
    hz = find_horizon_radial(g.factor, n)
    area = horizon_area(g.factor, n, hz.radius, kind="sphere")
    assert penrose_ratio(2.0, area, n, kind="closed").ratio == pytest.approx(1.0, abs=1e-12)


def test_unit_mass_halfspace_horizon_area():
    g = make_schwarzschild_halfspace(3, 1.0)
    assert horizon_area(g.factor, 3, 1.0) == pytest.approx(32 * math.pi, rel=1e-14)


def _multipole(scale):
    n = 3
    masses = [scale ** (n - 2) * m for m in (1.0, 0.1, 0.1)]
    centers = [[0, 0, 0], [0, 0, 0.3 * scale], [0, 0, -0.3 * scale]]
    return pole_factor(n, masses, centers)


def test_multipole_ratio_is_scale_invariant():
    ratios = []
    for lam in (1.0, 2.0, 5.0):
        u = _multipole(lam)
        g = make_conformally_flat(3, DomainSpec("half-space-annulus", 1.0 * lam), u)
        mass = halfspace_mass(g, lambdas=(20.0 * lam, 40.0 * lam, 80.0 * lam)).extrapolated
        hz = find_horizon_axisymmetric(u, 3, 1.2 * lam)
        ratios.append(penrose_ratio(mass, hz.area, 3, admissible=True).ratio)
    assert ratios[0] > 1.0
    assert np.allclose(ratios, ratios[0], rtol=1e-6)


def test_axisymmetric_finder_recovers_schwarzschild_horizon():
    g = make_schwarzschild_halfspace(3, 1.0)
    hz = find_horizon_axisymmetric(g.factor, 3, 1.5)
    assert hz.area == pytest.approx(32 * math.pi, rel=1e-8)
    assert hz.min_radius == pytest.approx(1.0, abs=1e-4)
    assert hz.max_radius == pytest.approx(1.0, abs=1e-4)


def test_flat_data_has_no_horizon():
    flat = (lambda r: np.ones_like(r), lambda r: np.zeros_like(r))
    with pytest.raises(NoHorizonError):
        find_horizon_radial(flat, 3)
    with pytest.raises(PenroseError):
        find_horizon_radial(pole_factor(3, [1.0], [[0, 0, 0.5]]), 3)


def test_multiple_horizon_candidates_are_flagged():
    g = make_curvature_bump(3, 2.0, 0.3)
    hz = find_horizon_radial(g.factor, 3)
    assert hz.multiple
    assert len(hz.roots) == 3
    assert hz.radius == max(hz.roots)


def test_admissible_data_below_bound_raises():
    n = 3
    area = 32 * math.pi
    with pytest.raises(PenroseError):
        penrose_ratio(0.9, area, n, admissible=True)
    assert penrose_ratio(0.9, area, n).ratio == pytest.approx(0.9)


@pytest.mark.parametrize("area", [0.0, -1.0, math.inf, math.nan])
def test_missing_horizon_area_raises(area):
    with pytest.raises(PenroseError):
        penrose_ratio(1.0, area, 3)


def test_rhs_kinds_differ_by_dimension_dependent_factor():
    n, area = 4, 7.0
    half = penrose_rhs(area, n, "half-space")
    closed = penrose_rhs(area, n, "closed")
    assert half / closed == pytest.approx(2 * 0.5 ** (n / (n - 1)))
    with pytest.raises(PenroseError):
        penrose_rhs(area, n, "torus")


def test_report_serialisation():
    rep = penrose_ratio(1.0, 32 * math.pi, 3, horizon_radius=1.0)
    assert isinstance(rep, PenroseReport)
    lines = rep.to_record().splitlines()
    assert lines[0] == "dim: 3"
    assert lines[1] == "kind: 'half-space'"
    assert len(lines) == 9
    row = rep.csv_row().split(",")
    assert len(row) == len(PenroseReport.CSV_HEADER.split(","))
    assert float(row[6]) == rep.ratio
