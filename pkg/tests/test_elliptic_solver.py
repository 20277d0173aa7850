import math

import numpy as np
import pytest
from scipy.integrate import quad

from halfspace_penrose.elliptic_solver import (
    EllipticProblem,
    GridSpec,
    SolverError,
    conformal_apply,
    conformal_constant,
    conformal_repair,
    log_barrier,
    log_barrier_laplacian,
    make_curvature_bump,
    radial_scalar_curvature,
    solve_axisymmetric,
    solve_grid,
    solve_radial,
    subharmonic_flux_test,
    weighted_norm,
)
from halfspace_penrose.elliptic_solver import _polar_points
from halfspace_penrose.mass_quadrature import adm_mass
from halfspace_penrose.metric_core import (
    Field,
    make_schwarzschild,
    make_schwarzschild_halfspace,
    pole_factor,
)
from halfspace_penrose.tensor_calc import sphere_level


def test_conformal_constant():
    assert conformal_constant(3) == 8.0
    assert conformal_constant(4) == 6.0
    assert conformal_constant(6) == pytest.approx(5.0)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_radial_dirichlet_reproduces_fundamental_solution(n):
    sol = solve_radial(EllipticProblem(n, 1.0, 100.0, inner_kind="dirichlet", inner_value=1.0))
    r = np.geomspace(1.0, 300.0, 40)
    assert np.abs(sol(r) - r ** (2.0 - n)).max() < 1e-8
    assert sol.far_coefficient == pytest.approx(1.0, rel=1e-6)


def test_radial_problem_with_neumann_and_source():
    n = 3

    def src(r):
        r = np.asarray(r, float)
        return np.where((r > 2) & (r < 3), ((r - 2) * (3 - r)) ** 2, 0.0)

    sol = solve_radial(EllipticProblem(n, 1.0, 200.0, rhs=src, inner_kind="neumann", inner_value=0.0),
                       breakpoints=(2.0, 3.0))
    # Gauss law: the far coefficient is the enclosed source over (n - 2)
    q = quad(lambda r: float(src(r)) * r ** (n - 1), 2.0, 3.0)[0]
    assert sol.far_coefficient == pytest.approx(q / (n - 2), rel=1e-6)
    assert abs(sol.derivative(np.array([1.0]))[0]) < 1e-8


def _mirror(x):
    a = np.array([0.2, 0.0, 1.5])
    b = np.array([0.2, 0.0, -1.5])
    return 1 / np.linalg.norm(x - a, axis=-1) + 1 / np.linalg.norm(x - b, axis=-1)


def test_grid_mirror_charge_second_order():
    errs = []
    for N in (9, 17):
        grid = GridSpec((-1, -1, 0), (1, 1, 1), N)
        sol = solve_grid(EllipticProblem(3, reduction="grid", dirichlet_data=_mirror), grid)
        errs.append(np.abs(sol.values - _mirror(grid.nodes())).max())
        assert sol.maximum_principle_ok
    assert 3.3 <= errs[0] / errs[1] <= 4.7


def test_grid_rejects_singular_metric():
    g = make_schwarzschild_halfspace(3, 1.0)
    grid = GridSpec((-1, -1, 0), (1, 1, 1), 5)
    with pytest.raises(SolverError):
        solve_grid(EllipticProblem(3, reduction="grid", metric=g.unchecked(), dirichlet_data=_mirror), grid)


def test_grid_csv_has_all_nodes():
    grid = GridSpec((-1, -1, 0), (1, 1, 1), 5)
    sol = solve_grid(EllipticProblem(3, reduction="grid", dirichlet_data=_mirror), grid)
    assert len(sol.to_csv().splitlines()) == 1 + 5**3


def test_axisymmetric_solver_converges():
    n = 3
    U = pole_factor(n, [1.0, 0.1, 0.1], [[0, 0, 0], [0, 0, 0.3], [0, 0, -0.3]])

    def exact(x):
        w = 1 + sum(np.linalg.norm(x - np.array([0.0, 0.0, s]), axis=-1) ** (2 - n) for s in (0.4, -0.4))
        return w / U(x)

    errs = []
    for nr, nt in ((61, 12), (121, 24)):
        p = EllipticProblem(n, 1.5, 2000.0, coefficient=8.0, inner_kind="dirichlet", inner_value=exact,
                            far_value=1.0, factor=U, reduction="axisymmetric")
        s = solve_axisymmetric(p, nr, nt)
        errs.append(np.abs(s.values - exact(_polar_points(n, s.radii, s.angles))).max())
    assert 3.3 <= errs[0] / errs[1] <= 4.7


def test_conformal_apply_formula_agrees_with_direct_curvature():
    g = make_schwarzschild_halfspace(3, 1.0)
    u = pole_factor(3, [0.3], [[0.5, 0.0, 0.0]])
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    x = x / np.linalg.norm(x, axis=1)[:, None] * rng.uniform(2, 5, (20, 1))
    x[:, -1] = np.abs(x[:, -1])
    sp = 2.0 * x / np.linalg.norm(x, axis=1)[:, None]
    rep = conformal_apply(g, u, x, sphere_level(3), sp)
    assert rep.R_discrepancy < 1e-10
    assert rep.H_discrepancy < 1e-10


@pytest.fixture(scope="module")
def repairs():
    return [conformal_repair(make_curvature_bump(3, 2.0, eps)) for eps in (1e-2, 1e-3)]


def test_repair_removes_negative_curvature(repairs):
    for rep in repairs:
        assert rep.min_R_before < 0
        assert rep.min_R_after >= -1e-8
        assert rep.min_factor >= 1 - 1e-10
        assert abs(rep.normal_derivative) < 1e-8
        assert rep.mass_change > 0


def test_repair_factor_peaks_on_inner_sphere(repairs):
    for rep in repairs:
        assert rep.argmax_radius == pytest.approx(1.0)


def test_repair_mass_change_matches_quadrature(repairs):
    g = make_curvature_bump(3, 2.0, 1e-3)
    before = adm_mass(g).extrapolated
    after = adm_mass(repairs[1].repaired).extrapolated
    assert after - before == pytest.approx(repairs[1].mass_change, rel=0.05)


def test_repair_of_scalar_flat_data_is_identity():
    rep = conformal_repair(make_schwarzschild(3, 2.0))
    assert rep.mass_change == 0.0
    assert rep.solution is None


def test_axisymmetric_repair_agrees_with_radial(repairs):
    rep = conformal_repair(make_curvature_bump(3, 2.0, 1e-3), reduction="axisymmetric", outer_radius=2000.0,
                           radial_points=321, angular_points=16)
    assert rep.mass_change == pytest.approx(repairs[1].mass_change, rel=0.02)


def test_radial_scalar_curvature_of_harmonic_factor_vanishes():
    g = make_schwarzschild(4, 2.0)
    R = radial_scalar_curvature(4, g.factor.profile)
    assert np.abs(R(np.geomspace(1.0, 50.0, 30))).max() < 1e-12


def test_weighted_norm_classifies_decay():
    v = Field(3, lambda x: np.linalg.norm(x, axis=-1) ** -1.0,
              lambda x: -x * np.linalg.norm(x, axis=-1)[..., None] ** -3.0)
    assert not weighted_norm(v, tau=1.0).divergent
    one = Field(3, lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros(x.shape),
                lambda x: np.zeros(x.shape + (3,)))
    assert weighted_norm(one, tau=0.5).divergent


@pytest.mark.parametrize("n", [3, 5])
def test_log_barrier_laplacian(n):
    b = log_barrier(n)
    r = np.array([3.0, 10.0, 100.0])
    pts = np.zeros((3, n))
    pts[:, 0] = r
    assert np.allclose(np.trace(b.hessian(pts), axis1=-2, axis2=-1), log_barrier_laplacian(n, r), rtol=1e-10)


def test_flux_limit_of_fundamental_solution():
    rep = subharmonic_flux_test(Field(3, lambda x: -np.linalg.norm(x, axis=-1) ** -1.0))
    assert rep.limit == pytest.approx(2 * math.pi, rel=1e-6)
    assert rep.subharmonic_sampled
