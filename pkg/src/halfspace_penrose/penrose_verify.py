"""Horizons, their areas and Penrose ratios for conformally flat data.

For ``g = u^(4/(n-2))`` times the Euclidean metric with ``u = u(r)`` the
coordinate sphere ``|x| = r`` is minimal when ``2 u'(r)/(n-2) + u(r)/r = 0``;
the outermost horizon is the largest root.  Axisymmetric data (rotations
fixing the ``x_n`` axis and the mirror ``x_n -> -x_n``) are handled by
minimising area over radial graphs ``r = rho(theta)`` with
``rho = sum_k a_k cos(2 k theta)``.

Penrose ratios compare the mass with

* ``(1/2)^(n/(n-1)) (|S| / omega)^((n-2)/(n-1))`` for a half-space with a
  free-boundary horizon ``S`` of area ``|S|``;
* ``(1/2) (|S| / omega)^((n-2)/(n-1))`` for a closed horizon,

``omega`` being the area of the unit (n-1)-sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import bisect, minimize

from .metric_core import Field, check_dimension, unit_sphere_area

__all__ = [
    "PenroseError",
    "NoHorizonError",
    "HorizonSearch",
    "find_horizon_radial",
    "horizon_area",
    "penrose_rhs",
    "PenroseReport",
    "penrose_ratio",
    "AxisymmetricHorizon",
    "find_horizon_axisymmetric",
    "CONVENTIONS",
]

CONVENTIONS = {
    "mean_curvature": "H = div_S(nu); horizon normal points away from the origin",
    "horizon_condition": "2 u'/(n-2) + u/r = 0 (radial class)",
    "outermost_policy": "largest root",
    "omega": "area of the unit (n-1)-sphere",
}


class PenroseError(ValueError):
    """Raised on inconsistent Penrose data."""


class NoHorizonError(PenroseError):
    """Raised when the data contain no horizon in the searched range."""


def _profile(u):
    prof = getattr(u, "profile", None)
    if prof is not None:
        centre = getattr(u, "center", None)
        if centre is not None and np.any(np.asarray(centre) != 0):
            raise PenroseError("radial search needs a factor centred at the origin")
        return prof.u, prof.du
    if isinstance(u, tuple) and len(u) == 2:
        return u
    raise PenroseError("radial search needs a factor with a radial profile or a (u, du) pair")


@dataclass
class HorizonSearch:
    """Roots of the horizon condition found by the scan."""

    radius: float
    roots: list
    multiple: bool


def find_horizon_radial(u, dim: int, r_min: float = 1e-4, r_max: float = 1e4, samples: int = 4000,
                        rel_tol: float = 1e-12) -> HorizonSearch:
    """Largest root of ``2 u'/(n-2) + u/r`` on ``[r_min, r_max]``.

    Sign changes are located on a geometric scan and refined by bisection to
    ``rel_tol`` relative accuracy.  Several roots are reported with the
    ``multiple`` flag (the largest one is the outermost horizon).
    """
    n = check_dimension(dim)
    uf, duf = _profile(u)

    def cond(r):
        r = np.asarray(r, float)
        return 2.0 * duf(r) / (n - 2) + uf(r) / r

    rs = np.geomspace(r_min, r_max, samples)
    with np.errstate(all="ignore"):
        vals = cond(rs)
    ok = np.isfinite(vals)
    roots = []
    for i in range(samples - 1):
        if not (ok[i] and ok[i + 1]):
            continue
        if vals[i] == 0.0:
            roots.append(float(rs[i]))
        elif vals[i] * vals[i + 1] < 0:
            f = lambda r: float(cond(np.array([r]))[0])
            roots.append(bisect(f, rs[i], rs[i + 1], xtol=rel_tol * rs[i], rtol=rel_tol, maxiter=400))
    if not roots:
        raise NoHorizonError("no horizon: the horizon condition does not change sign in the searched range")
    roots = sorted(set(roots))
    return HorizonSearch(roots[-1], roots, len(roots) > 1)


def horizon_area(u, dim: int, radius: float, kind: str = "hemisphere") -> float:
    """``u(r)^(2(n-1)/(n-2))`` times the Euclidean area of the (hemi)sphere of radius ``r``."""
    n = check_dimension(dim)
    if kind not in ("hemisphere", "sphere"):
        raise PenroseError("kind must be 'hemisphere' or 'sphere'")
    uf, _ = _profile(u)
    flat = unit_sphere_area(n) * radius ** (n - 1) * (0.5 if kind == "hemisphere" else 1.0)
    return float(uf(np.array([radius]))[0] ** (2.0 * (n - 1) / (n - 2)) * flat)


def penrose_rhs(area: float, dim: int, kind: str = "half-space") -> float:
    """Area term of the Penrose inequality for ``kind`` ``"half-space"`` or ``"closed"``."""
    n = check_dimension(dim)
    w = unit_sphere_area(n)
    if kind == "half-space":
        return 0.5 ** (n / (n - 1)) * (area / w) ** ((n - 2) / (n - 1))
    if kind == "closed":
        return 0.5 * (area / w) ** ((n - 2) / (n - 1))
    raise PenroseError("kind must be 'half-space' or 'closed'")


@dataclass
class PenroseReport:
    """Mass, horizon data and the Penrose ratio ``mass / rhs``."""

    dim: int
    kind: str
    mass: float
    horizon_radius: Optional[float]
    horizon_area: float
    rhs: float
    ratio: float
    rigidity_gap: float
    mass_estimate: object = field(default=None, repr=False)
    multiple_roots: bool = False

    def to_record(self) -> str:
        """``key: value`` lines (fixed order, ``repr`` floats)."""
        keys = ["dim", "kind", "mass", "horizon_radius", "horizon_area", "rhs", "ratio", "rigidity_gap",
                "multiple_roots"]
        return "".join(f"{k}: {getattr(self, k)!r}\n" for k in keys)

    def csv_row(self) -> str:
        vals = [self.dim, self.kind, self.mass, self.horizon_radius, self.horizon_area, self.rhs, self.ratio,
                self.rigidity_gap]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)

    CSV_HEADER = "dim,kind,mass,horizon_radius,horizon_area,rhs,ratio,rigidity_gap"


def penrose_ratio(mass, area: float, dim: int, kind: str = "half-space", horizon_radius: Optional[float] = None,
                  admissible: bool = False, tolerance: float = 1e-2, multiple_roots: bool = False) -> PenroseReport:
    """Penrose ratio for a mass (number or mass estimate) and a horizon area.

    With ``admissible=True`` (nonnegative scalar curvature, mean-convex
    boundary) a ratio below ``1 - tolerance`` raises.
    """
    n = check_dimension(dim)
    est = None
    if hasattr(mass, "extrapolated"):
        est = mass
        mass = mass.extrapolated
    mass = float(mass)
    if not (area > 0 and math.isfinite(area)):
        raise PenroseError("missing horizon: area must be positive and finite")
    rhs = penrose_rhs(area, n, kind)
    ratio = mass / rhs
    if not all(math.isfinite(v) for v in (mass, rhs, ratio)):
        raise PenroseError("non-finite Penrose data")
    if admissible and ratio < 1.0 - tolerance:
        raise PenroseError(f"Penrose ratio {ratio:.6g} below 1 - {tolerance:g} for admissible data")
    return PenroseReport(n, kind, mass, horizon_radius, float(area), float(rhs), float(ratio), float(ratio - 1.0),
                         est, multiple_roots)


@dataclass
class AxisymmetricHorizon:
    """Area-minimising radial graph ``r = rho(theta)`` (theta from the ``x_n`` axis)."""

    dim: int
    coefficients: np.ndarray
    area: float
    kind: str
    gradient_norm: float
    min_radius: float
    max_radius: float

    def radius(self, theta):
        k = np.arange(len(self.coefficients))
        return np.cos(2.0 * np.outer(np.asarray(theta, float), k)) @ self.coefficients


def _graph_area(u: Field, n, coeffs, nodes, weights, kind):
    k = np.arange(len(coeffs))
    C = np.cos(2.0 * np.outer(nodes, k))
    S = -2.0 * k * np.sin(2.0 * np.outer(nodes, k))
    rho = C @ coeffs
    drho = S @ coeffs
    if np.any(rho <= 0):
        return math.inf
    pts = np.zeros((len(nodes), n))
    pts[:, 0] = rho * np.sin(nodes)
    pts[:, -1] = rho * np.cos(nodes)
    with np.errstate(all="ignore"):
        uv = u(pts)
    if np.any(~np.isfinite(uv)) or np.any(uv <= 0):
        return math.inf
    dens = uv ** (2.0 * (n - 1) / (n - 2)) * (rho * np.sin(nodes)) ** (n - 2) * np.sqrt(rho**2 + drho**2)
    total = unit_sphere_area(n - 1) * float(np.sum(weights * dens))
    return total if kind == "hemisphere" else 2.0 * total


def find_horizon_axisymmetric(u: Field, dim: int, initial_radius: float, modes: int = 6, kind: str = "hemisphere",
                              nodes: int = 96, gtol: float = 1e-10) -> AxisymmetricHorizon:
    """Minimise area over graphs ``rho = sum_{k<modes} a_k cos(2 k theta)``.

    ``u`` must be invariant under rotations fixing the ``x_n`` axis and under
    ``x_n -> -x_n``; the cosine modes are symmetric about the equator so the
    graph meets the wall orthogonally.  The search starts from the sphere of
    radius ``initial_radius``, which should enclose every pole; the first
    local minimum reached from outside is the outermost minimal graph in this
    class.  ``kind="sphere"`` reports the area of the doubled surface.
    """
    n = check_dimension(dim)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    th = 0.25 * math.pi * (xg + 1.0)
    w = 0.25 * math.pi * wg
    a0 = np.zeros(modes)
    a0[0] = initial_radius

    def area(a):
        return _graph_area(u, n, a, th, w, "hemisphere")

    res = minimize(area, a0, method="BFGS", options={"gtol": gtol, "maxiter": 2000})
    a = res.x
    rr = np.cos(2.0 * np.outer(th, np.arange(modes))) @ a
    grad = float(np.linalg.norm(res.jac)) if res.jac is not None else math.nan
    total = area(a) * (1.0 if kind == "hemisphere" else 2.0)
    return AxisymmetricHorizon(n, a, float(total), kind, grad, float(rr.min()), float(rr.max()))
