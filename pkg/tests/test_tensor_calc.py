import itertools

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from halfspace_penrose.metric_core import (
    BoundaryShapeModel,
    DomainSpec,
    Field,
    MetricField,
    make_conformally_flat,
    make_fermi_model,
    make_flat,
    make_schwarzschild,
    radial_factor,
    RadialProfile,
)
from halfspace_penrose.tensor_calc import (
    christoffel,
    hypersurface_geometry,
    laplace_beltrami,
    linearized_scalar_curvature,
    plane_level,
    scalar_curvature,
    sphere_level,
    warped_collar_scalar_curvature,
)

X = sp.symbols("x0:3")
SYM_METRIC = sp.Matrix([
    [1 + X[0] ** 2 / 10, X[1] / 10, 0],
    [X[1] / 10, 1 + X[2] ** 2 / 5, X[0] / 20],
    [0, X[0] / 20, 1 + X[1] ** 2 / 10],
])


def _symbolic_oracle():
    """Christoffel symbols and scalar curvature computed symbolically from the definitions."""
    g = SYM_METRIC
    gi = g.inv()
    n = 3
    gam = [[[sum(gi[k, l] * (sp.diff(g[l, a], X[b]) + sp.diff(g[l, b], X[a]) - sp.diff(g[a, b], X[l]))
                 for l in range(n)) / 2 for b in range(n)] for a in range(n)] for k in range(n)]
    ric = sp.zeros(n, n)
    for a in range(n):
        for b in range(n):
            ric[a, b] = sum(sp.diff(gam[k][a][b], X[k]) - sp.diff(gam[k][a][k], X[b])
                            + sum(gam[k][k][l] * gam[l][a][b] - gam[k][b][l] * gam[l][a][k] for l in range(n))
                            for k in range(n))
    R = sum(gi[a, b] * ric[a, b] for a in range(n) for b in range(n))
    return sp.lambdify(X, gam), sp.lambdify(X, R)


def _symbolic_metric_field():
    g = SYM_METRIC
    val = sp.lambdify(X, g)
    grad = sp.lambdify(X, [[[sp.diff(g[a, b], X[c]) for b in range(3)] for a in range(3)] for c in range(3)])
    hess = sp.lambdify(X, [[[[sp.diff(g[a, b], X[c], X[d]) for b in range(3)] for a in range(3)]
                            for c in range(3)] for d in range(3)])

    def batch(fn):
        return lambda x: np.array([np.array(fn(*p), float) for p in np.asarray(x).reshape(-1, 3)]).reshape(
            np.asarray(x).shape[:-1] + np.array(fn(0.1, 0.1, 0.1)).shape)

    dom = DomainSpec("box", lower=(-1, -1, -1), upper=(1, 1, 1))
    return MetricField(3, dom, batch(val), batch(grad), batch(hess), name="symbolic")


def test_curvature_matches_symbolic_oracle():
    gam_ref, R_ref = _symbolic_oracle()
    g = _symbolic_metric_field()
    pts = np.array([[0.1, 0.2, -0.3], [0.5, -0.4, 0.2], [-0.7, 0.1, 0.6]])
    R = scalar_curvature(g, pts)
    gam = christoffel(g, pts)
    for i, p in enumerate(pts):
        assert R[i] == pytest.approx(float(R_ref(*p)), abs=1e-12)
        assert np.allclose(gam[i], np.array(gam_ref(*p), float), atol=1e-13)
    Rfd = scalar_curvature(g, pts, order=4, analytic=False)
    assert np.allclose(Rfd, R, atol=1e-7)


def test_conformally_flat_curvature_formula():
    # u = 1 + a r^2 in R^3: R = -8 u^-5 Lap u = -8 u^-5 (6 a)
    a = 0.1
    prof = RadialProfile(lambda r: 1 + a * r**2, lambda r: 2 * a * r, lambda r: 2 * a + 0 * r)
    u = radial_factor(3, prof)
    g = make_conformally_flat(3, DomainSpec("full-space-annulus", 0.5), u)
    x = np.array([[1.0, 0.0, 0.0], [0.3, 1.2, -0.4]])
    uv = 1 + a * np.sum(x**2, axis=1)
    assert np.allclose(scalar_curvature(g, x), -8 * uv**-5 * 6 * a, rtol=1e-12)
    f = Field(3, lambda y: y[..., 0] ** 2, lambda y: np.stack([2 * y[..., 0], 0 * y[..., 0], 0 * y[..., 0]], -1),
              lambda y: np.broadcast_to(np.diag([2.0, 0, 0]), y.shape + (3,)))
    # Lap_g f = u^-4 (Lap f + 2 grad(log u) . grad f) for g = u^4 delta, n = 3
    lap = laplace_beltrami(g, f, x)
    ref = uv**-4 * (2 + 2 * (2 * a * x[:, 0] / uv) * 2 * x[:, 0])
    assert np.allclose(lap, ref, rtol=1e-12)


@pytest.mark.parametrize("n", [3, 4, 6])
def test_sphere_mean_curvature_and_orientation(n):
    g = make_flat(n, DomainSpec("full-space-annulus", 0.5))
    x = np.zeros((2, n))
    x[0, 0] = 2.0
    x[1, -1] = 3.0
    up = hypersurface_geometry(g, sphere_level(n), x, "increasing")
    down = hypersurface_geometry(g, sphere_level(n), x, "decreasing")
    assert np.allclose(up.H, (n - 1) / np.array([2.0, 3.0]))
    assert np.allclose(down.H, -up.H)
    assert np.allclose(up.h, np.eye(n - 1) / np.array([2.0, 3.0])[:, None, None])


def test_schwarzschild_horizon_is_minimal():
    for n in (3, 5):
        g = make_schwarzschild(n, 2.0)
        x = np.zeros((1, n))
        x[0, 1] = g.horizon_radius
        H = hypersurface_geometry(g, sphere_level(n), x).H
        assert abs(H[0]) < 1e-12


def test_plane_in_fermi_model_has_shape_operator_h0():
    h0 = np.diag([1.0, -1.0])
    g = make_fermi_model(3, BoundaryShapeModel(h0), 0.3)
    # normal pointing out of the manifold is -e_s
    fr = hypersurface_geometry(g, plane_level(3), np.array([[0.0, 0.0, 0.0]]), "decreasing")
    assert np.allclose(np.sort(np.linalg.eigvalsh(fr.h[0])), [-1.0, 1.0])
    assert abs(fr.H[0]) < 1e-14


def test_warped_collar_formula_agrees_with_general_curvature():
    h0 = np.diag([0.7, -0.3])
    model = BoundaryShapeModel(h0)
    g = make_fermi_model(3, model, 0.3)
    for t in (0.0, 0.1, 0.25):
        direct = scalar_curvature(g, np.array([[0.05, 0.0, t]]))[0]
        closed = warped_collar_scalar_curvature(model.gamma(t), model.gamma(t, 1), model.gamma(t, 2))
        assert direct == pytest.approx(closed, abs=1e-12)


def _quartic_gauge_tensor(C):
    """``sigma = Hess(phi)`` for the quartic ``phi = C_ijkl x^i x^j x^k x^l``."""
    n = C.shape[0]
    return Field(n,
                 lambda x: 12 * np.einsum("abkl,...k,...l->...ab", C, x, x),
                 lambda x: 24 * np.einsum("abcl,...l->...cab", C, x),
                 lambda x: np.broadcast_to(24 * np.einsum("abcd->dcab", C), x.shape[:-1] + (n,) * 4),
                 shape=(n, n))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=3, max_value=5), st.integers(0, 2**31 - 1))
def test_linearization_kills_flat_gauge_directions(n, seed):
    # on the flat metric a Lie derivative L_X delta with X = grad(phi)/2 is pure gauge: DR = 0
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(n,) * 4)
    C = sum(np.transpose(C, p) for p in itertools.permutations(range(4))) / 24
    sig = _quartic_gauge_tensor(C)
    g = make_flat(n, DomainSpec("full-space-annulus", 0.1))
    x = rng.uniform(0.5, 2.0, size=(6, n))
    DR = linearized_scalar_curvature(g, sig, x)
    assert np.abs(DR).max() < 1e-9 * max(1.0, np.abs(C).max())


def test_linearization_of_conformal_direction():
    # sigma = 2 f g gives DR = -2(n-1) Lap f - 2 f R; on flat space with f = x0^2: -4(n-1)
    n = 4
    g = make_flat(n, DomainSpec("full-space-annulus", 0.1))

    def val(x):
        return 2 * (x[..., 0] ** 2)[..., None, None] * np.eye(n)

    def grad(x):
        out = np.zeros(x.shape[:-1] + (n, n, n))
        out[..., 0, :, :] = 4 * x[..., 0][..., None, None] * np.eye(n)
        return out

    def hess(x):
        out = np.zeros(x.shape[:-1] + (n, n, n, n))
        out[..., 0, 0, :, :] = 4 * np.eye(n)
        return out

    x = np.array([[1.0, 0.5, 0.2, -0.3]])
    DR = linearized_scalar_curvature(g, Field(n, val, grad, hess, shape=(n, n)), x)
    assert DR[0] == pytest.approx(-4 * (n - 1))
