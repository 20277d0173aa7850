import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace_penrose.mass_quadrature import (
    MassError,
    adm_mass,
    extrapolate,
    flux_integral,
    halfspace_mass,
    sphere_rule,
)
from halfspace_penrose.metric_core import (
    DomainSpec,
    Field,
    make_conformally_flat,
    make_flat,
    make_schwarzschild,
    make_schwarzschild_halfspace,
    pole_factor,
    unit_sphere_area,
)


def monomial_sphere_integral(powers):
    """Integral of ``prod x_i^a_i`` over the unit sphere (zero unless all powers are even)."""
    if any(a % 2 for a in powers):
        return 0.0
    b = [(a + 1) / 2 for a in powers]
    return 2 * math.prod(math.gamma(v) for v in b) / math.gamma(sum(b))


@pytest.mark.parametrize("n", [3, 4, 5, 7])
def test_rule_areas(n):
    w = unit_sphere_area(n)
    assert sphere_rule(n, "sphere").weights.sum() == pytest.approx(w, rel=1e-13)
    assert sphere_rule(n, "hemisphere").weights.sum() == pytest.approx(w / 2, rel=1e-13)
    assert sphere_rule(n, "equator").weights.sum() == pytest.approx(unit_sphere_area(n - 1), rel=1e-13)
    hemi = sphere_rule(n, "hemisphere").points
    assert np.all(hemi[:, -1] >= 0)
    assert np.allclose(np.linalg.norm(hemi, axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=3, max_value=5), st.data())
def test_rule_is_exact_on_monomials(n, data):
    rule = sphere_rule(n, "sphere")
    deg = min(rule.exactness_degree, 10)
    powers = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n).filter(lambda p: sum(p) <= deg))
    got = float(np.dot(rule.weights, np.prod(rule.points ** np.array(powers), axis=1)))
    assert got == pytest.approx(monomial_sphere_integral(powers), abs=1e-12)


def test_hemisphere_rule_even_monomials():
    # even in x_n, so the hemisphere integral is half the sphere integral
    for n in (3, 4):
        rule = sphere_rule(n, "hemisphere")
        powers = [2] + [0] * (n - 2) + [2]
        got = float(np.dot(rule.weights, np.prod(rule.points ** np.array(powers), axis=1)))
        assert got == pytest.approx(monomial_sphere_integral(powers) / 2, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.3, 3.0))
def test_extrapolation_recovers_limit(c0, c1, p):
    lams = np.array([20.0, 40.0, 80.0])
    vals = c0 + c1 * lams**-p
    got, q, res = extrapolate(lams, vals)
    assert got == pytest.approx(c0, abs=1e-9 * (1 + abs(c0) + abs(c1)))


def test_extrapolation_needs_three_radii():
    with pytest.raises(MassError):
        extrapolate([10.0, 20.0], [1.0, 1.1])


@pytest.mark.parametrize("n", [3, 4, 5])
def test_schwarzschild_masses(n):
    assert adm_mass(make_schwarzschild(n, 2.0)).extrapolated == pytest.approx(2.0, rel=1e-2)
    assert halfspace_mass(make_schwarzschild_halfspace(n, 1.0)).extrapolated == pytest.approx(1.0, rel=1e-2)


def test_mass_is_linear_in_small_parameter_and_rejects_wrong_domain():
    m = halfspace_mass(make_schwarzschild_halfspace(3, 0.25)).extrapolated
    assert m == pytest.approx(0.25, rel=1e-2)
    with pytest.raises(MassError):
        adm_mass(make_schwarzschild_halfspace(3, 1.0))
    with pytest.raises(MassError):
        halfspace_mass(make_schwarzschild(3, 1.0))


def test_flat_mass_vanishes():
    assert abs(adm_mass(make_flat(4, DomainSpec("full-space-annulus", 1.0))).extrapolated) < 1e-12
    assert abs(halfspace_mass(make_flat(4, DomainSpec("half-space-annulus", 1.0))).extrapolated) < 1e-12


def test_mirror_pair_mass_adds_up():
    # poles at +-a e_n: the half-space mass is the total coefficient
    u = pole_factor(3, [0.5, 0.2, 0.2], [[0, 0, 0], [0, 0, 0.4], [0, 0, -0.4]])
    g = make_conformally_flat(3, DomainSpec("half-space-annulus", 1.0), u)
    assert halfspace_mass(g).extrapolated == pytest.approx(0.9, rel=1e-2)


def test_thread_count_does_not_change_result():
    g = make_schwarzschild(3, 2.0)
    a = adm_mass(g, threads=1)
    b = adm_mass(g, threads=3)
    assert a.values == b.values and a.extrapolated == b.extrapolated


@pytest.mark.parametrize("n", [3, 5])
def test_flux_of_fundamental_solution(n):
    u = Field(n, lambda x: -np.linalg.norm(x, axis=-1) ** (2 - n))
    for surface, frac in (("hemisphere", 0.5), ("sphere", 1.0)):
        got = flux_integral(u, 30.0, surface)
        assert got == pytest.approx((n - 2) * unit_sphere_area(n) * frac, rel=1e-6)


def test_mass_csv_layout():
    est = halfspace_mass(make_schwarzschild_halfspace(3, 1.0))
    lines = est.to_csv().splitlines()
    assert lines[0] == "lambda,value,abs_value_minus_extrapolated"
    assert len(lines) == 4
