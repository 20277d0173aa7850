"""Surface quadrature on coordinate spheres and the mass flux integrals.

Spheres use a tensor-product rule: a Gauss rule in each polar angle (the
first measured from the ``x_n`` axis) and the midpoint rule in the azimuth.
Full polar ranges use Gauss-Jacobi nodes in ``cos(theta)``, the Gauss rule for
the ``sin^k`` area weight, so full spheres integrate polynomials of degree up
to ``2k - 1`` exactly.  The hemisphere ``x_n >= 0`` restricts the first polar
angle to ``[0, pi/2]`` and uses Gauss-Legendre in the angle there.  The
equator is the ``(n-2)``-sphere rule placed in ``x_n = 0``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import roots_jacobi

from .metric_core import Field, MetricField, check_dimension, unit_sphere_area

__all__ = [
    "MassError",
    "SphereRule",
    "sphere_rule",
    "default_nodes",
    "sphere_quadrature",
    "MassEstimate",
    "extrapolate",
    "adm_mass_value",
    "halfspace_mass_value",
    "adm_mass",
    "halfspace_mass",
    "flux_integral",
]

SURFACES = ("sphere", "hemisphere", "equator")
NODE_BUDGET = 200_000
HEMISPHERE_POLAR_MIN = 24
CHUNK = 20_000


class MassError(ValueError):
    """Raised when a mass sweep cannot be extrapolated reliably."""


@lru_cache(maxsize=None)
def _angular_degree(nodes: int, half: bool) -> int:
    """Largest trigonometric degree the polar Gauss rule integrates to 1e-13."""
    s, w = np.polynomial.legendre.leggauss(nodes)
    top = math.pi / 2 if half else math.pi
    th = top / 2 * (s + 1)
    w = w * top / 2
    deg = -1
    for k in range(0, 2 * nodes + 1):
        if k == 0:
            ec, es = top, 0.0
        else:
            ec, es = math.sin(k * top) / k, (1 - math.cos(k * top)) / k
        err = max(abs(np.dot(w, np.cos(k * th)) - ec), abs(np.dot(w, np.sin(k * th)) - es))
        if err > 1e-13 * max(1.0, top):
            break
        deg = k
    return deg


def default_nodes(dim: int) -> int:
    """Polar nodes per angle: 32 when affordable, reduced to keep the node count bounded."""
    n = check_dimension(dim)
    polar = n - 2
    k = 32
    while k > 6 and max(k, HEMISPHERE_POLAR_MIN) * k ** (polar - 1) * 2 * k > NODE_BUDGET:
        k -= 1
    return k


@dataclass(frozen=True)
class SphereRule:
    """Nodes on the unit sphere piece and weights summing to its area."""

    dim: int
    surface: str
    points: np.ndarray
    weights: np.ndarray
    polar_nodes: int
    azimuth_nodes: int
    exactness_degree: int


def _polar_rule(k: int, nodes: int, half: bool):
    """Nodes ``cos(theta)`` and weights for ``sin(theta)^(k-1) d theta``.

    Full ranges use the Gauss-Jacobi rule in ``cos(theta)``, which is the
    Gauss rule for this weight.  The half range ``[0, pi/2]`` uses
    Gauss-Legendre in the angle itself.
    """
    if half:
        s, w = np.polynomial.legendre.leggauss(max(nodes, HEMISPHERE_POLAR_MIN))
        th = math.pi / 4 * (s + 1)
        return np.cos(th), np.sin(th), w * math.pi / 4 * np.sin(th) ** (k - 1)
    a = (k - 2) / 2.0
    t, w = roots_jacobi(nodes, a, a)
    return t, np.sqrt(1.0 - t**2), w


def _unit_sphere_nodes(k: int, polar_nodes: int, azimuth_nodes: int, half: bool = False):
    """Rule for the unit k-sphere in R^(k+1); ``half`` keeps the last coordinate >= 0."""
    if k == 1:
        phi = 2 * math.pi * (np.arange(azimuth_nodes) + 0.5) / azimuth_nodes
        pts = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        if half:
            raise ValueError("half circles are not used")
        return pts, np.full(azimuth_nodes, 2 * math.pi / azimuth_nodes)
    sub_p, sub_w = _unit_sphere_nodes(k - 1, polar_nodes, azimuth_nodes)
    c, s, w = _polar_rule(k, polar_nodes, half)
    pts = np.concatenate([s[:, None, None] * sub_p[None, :, :],
                          np.broadcast_to(c[:, None, None], (len(c), len(sub_p), 1))], axis=-1)
    return pts.reshape(-1, k + 1), (w[:, None] * sub_w[None, :]).reshape(-1)


@lru_cache(maxsize=64)
def sphere_rule(dim: int, surface: str = "sphere", nodes: int | None = None) -> SphereRule:
    """Quadrature rule on the unit sphere, upper hemisphere or equator of R^dim."""
    n = check_dimension(dim)
    if surface not in SURFACES:
        raise ValueError(f"surface must be one of {SURFACES}")
    k = nodes or default_nodes(n)
    m = 2 * k
    if surface == "equator":
        if n - 2 == 1:
            p, w = _unit_sphere_nodes(1, k, m)
        else:
            p, w = _unit_sphere_nodes(n - 2, k, m)
        pts = np.concatenate([p, np.zeros((len(p), 1))], axis=-1)
        polar = n - 3
    else:
        pts, w = _unit_sphere_nodes(n - 1, k, m, half=(surface == "hemisphere"))
        polar = n - 2
    # Jacobi levels and the midpoint azimuth are exact for polynomials up to 2k-1
    deg = min(m - 1, 2 * k - 1)
    if surface == "hemisphere":
        deg = min(deg, _angular_degree(max(k, HEMISPHERE_POLAR_MIN), True) - (n - 2))
    return SphereRule(n, surface, pts, w, k, m, max(deg, 0))


def sphere_quadrature(dim: int, lam: float, integrand, surface: str = "sphere", nodes: int | None = None):
    """Integral of ``integrand`` over the radius-``lam`` sphere piece (Euclidean measure).

    ``integrand`` maps points ``(N, n)`` to values ``(N,)``.
    """
    if not lam > 0:
        raise ValueError("radius must be positive")
    rule = sphere_rule(dim, surface, nodes)
    k = dim - 1 if surface != "equator" else dim - 2
    total = 0.0
    for start in range(0, len(rule.weights), CHUNK):
        pts = lam * rule.points[start:start + CHUNK]
        total += float(np.dot(rule.weights[start:start + CHUNK], integrand(pts)))
    return total * lam**k


@dataclass
class MassEstimate:
    """Mass values over a radius sweep with the extrapolated limit."""

    lambdas: list
    values: list
    extrapolated: float
    fit_exponent: float
    residual: float
    kind: str = "adm"
    nodes: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise MassError("radii must be strictly increasing")
        if not math.isfinite(self.extrapolated):
            raise MassError("extrapolated mass is not finite")

    @property
    def error_estimate(self) -> float:
        return abs(self.values[-1] - self.extrapolated)

    def rows(self):
        return [(lam, v, abs(v - self.extrapolated)) for lam, v in zip(self.lambdas, self.values)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "value", "abs_value_minus_extrapolated"])
        for row in self.rows():
            w.writerow([repr(float(c)) for c in row])
        return buf.getvalue()


def _fit_given_p(lams, vals, p):
    A = np.stack([np.ones_like(lams), lams ** (-p)], axis=1)
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    res = float(np.linalg.norm(A @ coef - vals))
    return coef, res


def extrapolate(lambdas, values, p_bounds=(0.05, 12.0), max_rel_residual=1e-3):
    """Fit ``c0 + c1 lam^-p`` with ``p`` free; return ``(c0, p, residual)``."""
    lams = np.asarray(lambdas, float)
    vals = np.asarray(values, float)
    if len(lams) < 3:
        raise MassError("at least three radii are needed for extrapolation")
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.ptp(vals) <= 1e-14 * scale:
        return float(vals[-1]), math.nan, 0.0
    lo, hi = p_bounds
    p = None
    if len(lams) == 3:
        d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
        if d2 != 0 and d1 / d2 > 0:
            target = d1 / d2

            def F(q):
                a = lams ** (-q)
                return (a[0] - a[1]) / (a[1] - a[2]) - target

            try:
                if F(lo) * F(hi) < 0:
                    p = brentq(F, lo, hi, xtol=1e-14, rtol=1e-14)
            except ValueError:
                p = None
    if p is None:
        opt = minimize_scalar(lambda q: _fit_given_p(lams, vals, q)[1], bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-10})
        p = float(opt.x)
    coef, res = _fit_given_p(lams, vals, p)
    if res > max_rel_residual * scale:
        raise MassError(f"mass sweep does not fit a single decay power (residual {res:.3e})")
    return float(coef[0]), float(p), res


def _adm_flux(g: MetricField, pts):
    dg = g.gradient(pts)
    div = np.einsum("...jij->...i", dg)
    trd = np.einsum("...ijj->...i", dg)
    return np.einsum("...i,...i->...", pts, div - trd)


def _equator_term(g: MetricField, pts):
    gv = g(pts)
    n = pts.shape[-1]
    return np.einsum("...i,...i->...", pts[..., : n - 1], gv[..., : n - 1, n - 1])


def adm_mass_value(g: MetricField, lam: float, nodes: int | None = None) -> float:
    """Single-radius value of the full-sphere mass flux, normalised to a mass."""
    n = g.dim
    total = sphere_quadrature(n, lam, lambda p: _adm_flux(g, p), "sphere", nodes) / lam
    return total / (2 * (n - 1) * unit_sphere_area(n))


def halfspace_mass_value(g: MetricField, lam: float, nodes: int | None = None) -> float:
    """Single-radius value of the hemisphere flux plus the equatorial term."""
    n = g.dim
    bulk = sphere_quadrature(n, lam, lambda p: _adm_flux(g, p), "hemisphere", nodes)
    edge = sphere_quadrature(n, lam, lambda p: _equator_term(g, p), "equator", nodes)
    return (bulk + edge) / lam / (2 * (n - 1) * unit_sphere_area(n))


def _sweep(fun, g, lambdas, nodes, threads):
    lams = [float(v) for v in lambdas]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return lams, list(ex.map(lambda lam: fun(g, lam, nodes), lams))
    return lams, [fun(g, lam, nodes) for lam in lams]


def adm_mass(g: MetricField, lambdas=(20.0, 40.0, 80.0), nodes: int | None = None, threads: int = 1) -> MassEstimate:
    """Mass of an asymptotically flat metric on a full-space annulus."""
    if g.domain.kind != "full-space-annulus":
        raise MassError("adm_mass needs a full-space domain")
    lams, vals = _sweep(adm_mass_value, g, lambdas, nodes, threads)
    c0, p, res = extrapolate(lams, vals)
    return MassEstimate(lams, vals, c0, p, res, "adm", nodes or default_nodes(g.dim))


def halfspace_mass(g: MetricField, lambdas=(20.0, 40.0, 80.0), nodes: int | None = None, threads: int = 1) -> MassEstimate:
    """Mass of an asymptotically flat half-space (hemisphere flux plus equatorial term)."""
    if g.domain.kind != "half-space-annulus":
        raise MassError("halfspace_mass needs a half-space domain")
    lams, vals = _sweep(halfspace_mass_value, g, lambdas, nodes, threads)
    c0, p, res = extrapolate(lams, vals)
    return MassEstimate(lams, vals, c0, p, res, "half-space", nodes or default_nodes(g.dim))


def flux_integral(u: Field, lam: float, surface: str = "hemisphere", nodes: int | None = None) -> float:
    """``lam^-1`` times the integral of ``x . grad u`` over the sphere piece of radius ``lam``."""
    if surface == "equator":
        raise ValueError("flux is defined on spheres and hemispheres")

    def integrand(p):
        return np.einsum("...i,...i->...", p, u.gradient(p))

    return sphere_quadrature(u.dim, lam, integrand, surface, nodes) / lam
