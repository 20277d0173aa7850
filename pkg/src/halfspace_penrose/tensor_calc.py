"""Pointwise tensor calculus for batched metric fields.

Index layout follows :mod:`metric_core`: ``Gamma[..., k, a, b]`` is
``Gamma^k_ab`` and ``dGamma[..., c, k, a, b]`` is its ``c`` derivative.

Mean curvature is ``H = div_S(nu)`` for an explicitly chosen unit normal
``nu``.  For a level set ``{f = const}`` the orientation ``"increasing"``
takes ``nu`` along the gradient of ``f`` and ``"decreasing"`` against it.  A
Euclidean sphere with ``f = |x|`` and ``"increasing"`` orientation has
``H = (n-1)/r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metric_core import Field, MetricError, MetricField

__all__ = [
    "metric_jets",
    "christoffel",
    "christoffel_with_derivative",
    "ricci",
    "scalar_curvature",
    "laplace_beltrami",
    "covariant_hessian",
    "HypersurfaceFrame",
    "hypersurface_geometry",
    "linearized_scalar_curvature",
    "warped_collar_scalar_curvature",
    "sphere_level",
    "plane_level",
]


def metric_jets(g: MetricField, x, order: int = 2, analytic: bool = True):
    """Metric values, first and second derivatives at ``x``."""
    x = np.asarray(x, float)
    gv = g(x)
    dg = g.gradient(x, order=order, analytic=analytic)
    d2g = g.hessian(x, order=order, analytic=analytic)
    return gv, dg, d2g


def _inverse(gv):
    try:
        return np.linalg.inv(gv)
    except np.linalg.LinAlgError as exc:
        raise MetricError("singular metric") from exc


def _gamma_lower(dg):
    # Gamma_{l a b} = (d_a g_lb + d_b g_la - d_l g_ab) / 2
    return 0.5 * (np.einsum("...alb->...lab", dg) + np.einsum("...bla->...lab", dg) - dg)


def _christoffel_from_jets(gv, dg, d2g=None):
    ginv = _inverse(gv)
    low = _gamma_lower(dg)
    gam = np.einsum("...kl,...lab->...kab", ginv, low)
    if d2g is None:
        return ginv, gam, None
    dginv = -np.einsum("...km,...cmn,...nl->...ckl", ginv, dg, ginv)
    # d_c Gamma_{l a b}
    dlow = 0.5 * (np.einsum("...calb->...clab", d2g) + np.einsum("...cbla->...clab", d2g) - d2g)
    dgam = np.einsum("...ckl,...lab->...ckab", dginv, low) + np.einsum("...kl,...clab->...ckab", ginv, dlow)
    return ginv, gam, dgam


def christoffel(g: MetricField, x, order: int = 2, analytic: bool = True):
    """Christoffel symbols ``Gamma^k_ab`` at ``x``, shape ``(..., n, n, n)``."""
    x = np.asarray(x, float)
    gv = g(x)
    dg = g.gradient(x, order=order, analytic=analytic)
    return _christoffel_from_jets(gv, dg)[1]


def christoffel_with_derivative(g: MetricField, x, order: int = 2, analytic: bool = True):
    """Return ``(g^-1, Gamma, dGamma)`` at ``x``."""
    return _christoffel_from_jets(*metric_jets(g, x, order, analytic))


def _ricci_from(gam, dgam):
    term1 = np.einsum("...kkab->...ab", dgam)
    term2 = np.einsum("...akkb->...ab", dgam)
    trace = np.einsum("...kkl->...l", gam)
    term3 = np.einsum("...l,...lab->...ab", trace, gam)
    term4 = np.einsum("...kal,...lkb->...ab", gam, gam)
    ric = term1 - term2 + term3 - term4
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def ricci(g: MetricField, x, order: int = 2, analytic: bool = True):
    """Ricci tensor ``R_ab`` in chart components."""
    _, gam, dgam = christoffel_with_derivative(g, x, order, analytic)
    return _ricci_from(gam, dgam)


def scalar_curvature(g: MetricField, x, order: int = 2, analytic: bool = True):
    """Scalar curvature ``g^ab R_ab``."""
    ginv, gam, dgam = christoffel_with_derivative(g, x, order, analytic)
    return np.einsum("...ab,...ab->...", ginv, _ricci_from(gam, dgam))


def covariant_hessian(g: MetricField, f: Field, x, order: int = 2, analytic: bool = True):
    """``(d_a d_b f - Gamma^l_ab d_l f)`` with the field's derivatives."""
    x = np.asarray(x, float)
    gam = christoffel(g, x, order, analytic)
    df = f.gradient(x, order=order, analytic=analytic)
    d2f = f.hessian(x, order=order, analytic=analytic)
    return d2f - np.einsum("...lab,...l->...ab", gam, df), df


def laplace_beltrami(g: MetricField, f: Field, x, order: int = 2, analytic: bool = True):
    """Laplace-Beltrami operator ``g^ab (d_a d_b f - Gamma^l_ab d_l f)``."""
    x = np.asarray(x, float)
    ginv = _inverse(g(x))
    hess, _ = covariant_hessian(g, f, x, order, analytic)
    return np.einsum("...ab,...ab->...", ginv, hess)


@dataclass
class HypersurfaceFrame:
    """Unit normal, second fundamental form and mean curvature at hypersurface points.

    ``normal`` holds contravariant components of ``nu``.  ``h_ambient`` is the
    second fundamental form ``g(D_X nu, Y)`` extended by zero along ``nu``;
    ``h`` holds its components in the orthonormal tangent frame ``frame``.
    """

    x: np.ndarray
    normal: np.ndarray
    orientation: str
    h_ambient: np.ndarray
    h: np.ndarray
    H: np.ndarray
    frame: np.ndarray

    @property
    def norm_h(self):
        return np.sqrt(np.einsum("...ij,...ij->...", self.h, self.h))


def _orthonormal_tangent_frame(gv, nu_low):
    """Tangent vectors orthonormal for ``g`` and annihilated by ``nu_low``."""
    n = gv.shape[-1]
    L = np.linalg.cholesky(gv)  # g = L L^T
    # in coordinates w = L^T v the metric is Euclidean and nu_low becomes L^{-1} nu_low
    m = np.linalg.solve(L, nu_low[..., None])[..., 0]
    m = m / np.linalg.norm(m, axis=-1, keepdims=True)
    proj = np.eye(n) - m[..., :, None] * m[..., None, :]
    _, vecs = np.linalg.eigh(proj)
    w = vecs[..., :, 1:]  # eigenvalue 1 block, columns
    v = np.linalg.solve(np.swapaxes(L, -1, -2), w)
    return np.swapaxes(v, -1, -2)  # (..., n-1, n)


def hypersurface_geometry(g: MetricField, level: Field, x, orientation: str = "increasing",
                          order: int = 2, analytic: bool = True) -> HypersurfaceFrame:
    """Geometry of the level set of ``level`` through each point of ``x``."""
    if orientation not in ("increasing", "decreasing"):
        raise ValueError("orientation must be 'increasing' or 'decreasing'")
    s = 1.0 if orientation == "increasing" else -1.0
    x = np.asarray(x, float)
    gv = g(x)
    ginv = _inverse(gv)
    hess, df = covariant_hessian(g, level, x, order, analytic)
    norm = np.sqrt(np.einsum("...a,...ab,...b->...", df, ginv, df))
    if np.any(norm <= 1e-14 * np.maximum(1.0, np.abs(df).max(axis=-1))):
        raise MetricError("degenerate gradient of the level function")
    nu_low = s * df / norm[..., None]
    nu = np.einsum("...ab,...b->...a", ginv, nu_low)
    n = gv.shape[-1]
    proj = np.eye(n) - nu[..., :, None] * nu_low[..., None, :]  # P^a_b
    h_amb = s * np.einsum("...ca,...cd,...db->...ab", proj, hess, proj) / norm[..., None, None]
    frame = _orthonormal_tangent_frame(gv, nu_low)
    h = np.einsum("...ia,...ab,...jb->...ij", frame, h_amb, frame)
    H = np.einsum("...ab,...ab->...", ginv, h_amb)
    return HypersurfaceFrame(x, nu, orientation, h_amb, h, H, frame)


def linearized_scalar_curvature(g: MetricField, sigma: Field, x, order: int = 2, analytic: bool = True,
                                parts: bool = False):
    """``div div sigma - Delta tr sigma - <Ric, sigma>`` at ``x``.

    The double divergence is evaluated from second covariant derivatives
    of ``sigma``, keeping every Christoffel term.  With ``parts=True`` a dict
    with the three contributions is returned as well.
    """
    x = np.asarray(x, float)
    ginv, gam, dgam = christoffel_with_derivative(g, x, order, analytic)
    sv = sigma(x)
    ds = sigma.gradient(x, order=order, analytic=analytic)
    d2s = sigma.hessian(x, order=order, analytic=analytic)
    # first covariant derivative  nabla_c sigma_ab
    cov = (ds - np.einsum("...lca,...lb->...cab", gam, sv)
           - np.einsum("...lcb,...al->...cab", gam, sv))
    # coordinate derivative d_d (nabla_c sigma_ab)
    dcov = (d2s
            - np.einsum("...dlca,...lb->...dcab", dgam, sv)
            - np.einsum("...lca,...dlb->...dcab", gam, ds)
            - np.einsum("...dlcb,...al->...dcab", dgam, sv)
            - np.einsum("...lcb,...dal->...dcab", gam, ds))
    cov2 = (dcov
            - np.einsum("...ldc,...lab->...dcab", gam, cov)
            - np.einsum("...lda,...clb->...dcab", gam, cov)
            - np.einsum("...ldb,...cal->...dcab", gam, cov))
    divdiv = np.einsum("...da,...cb,...dcab->...", ginv, ginv, cov2)
    lap_tr = np.einsum("...dc,...ab,...dcab->...", ginv, ginv, cov2)
    ric = _ricci_from(gam, dgam)
    ric_sigma = np.einsum("...ac,...bd,...ab,...cd->...", ginv, ginv, ric, sv)
    out = divdiv - lap_tr - ric_sigma
    if parts:
        return out, {"divdiv": divdiv, "laplacian_trace": lap_tr, "ricci_pairing": ric_sigma}
    return out


def warped_collar_scalar_curvature(gamma, dgamma, d2gamma, intrinsic=0.0):
    """Scalar curvature of ``gamma_t + dt^2`` from t-derivatives of ``gamma``.

    Uses ``R = R(gamma_t) - tr(G'') + 3/4 tr(G'^2) - 1/4 (tr G')^2`` with
    ``G' = gamma^-1 d_t gamma`` and ``G'' = gamma^-1 d_t^2 gamma``.
    """
    ginv = np.linalg.inv(gamma)
    a = ginv @ dgamma
    b = ginv @ d2gamma
    tr_a = np.trace(a, axis1=-2, axis2=-1)
    tr_aa = np.einsum("...ij,...ji->...", a, a)
    return intrinsic - np.trace(b, axis1=-2, axis2=-1) + 0.75 * tr_aa - 0.25 * tr_a**2


def sphere_level(dim: int, center=None) -> Field:
    """Level function ``|x - center|`` with analytic derivatives."""
    c = np.zeros(dim) if center is None else np.asarray(center, float)

    def value(x):
        return np.linalg.norm(x - c, axis=-1)

    def grad(x):
        z = x - c
        return z / np.linalg.norm(z, axis=-1)[..., None]

    def hess(x):
        z = x - c
        r = np.linalg.norm(z, axis=-1)[..., None, None]
        return (np.eye(dim) - z[..., :, None] * z[..., None, :] / r**2) / r

    return Field(dim, value, grad, hess, name="sphere-level")


def plane_level(dim: int, axis: int = -1) -> Field:
    """Level function ``x_axis`` (coordinate hyperplanes)."""
    e = np.zeros(dim)
    e[axis] = 1.0

    def value(x):
        return x[..., axis]

    def grad(x):
        return np.broadcast_to(e, x.shape).copy()

    def hess(x):
        return np.zeros(x.shape + (dim,))

    return Field(dim, value, grad, hess, name="plane-level")
