"""Domains, batched smooth fields and the reference metrics.

Every field in this package is evaluated on batches of points: an input of
shape ``(..., n)`` produces values of shape ``(...,) + field.shape``.  First
derivatives are stacked on the axis directly after the batch axes, so a
metric gradient has shape ``(..., n, n, n)`` with layout ``dg[..., c, a, b] =
d_c g_ab``.  Second derivatives use ``d2g[..., c, d, a, b]``.

Fields may carry analytic derivatives.  When they do not, central finite
differences are used with the step ``h = max(1e-4, 1e-3 |x|)`` (scaled by a
per-field factor), at second order by default and fourth order on request.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "MetricError",
    "DomainError",
    "check_dimension",
    "unit_sphere_area",
    "default_step",
    "DomainSpec",
    "Field",
    "ConformalFactor",
    "MetricField",
    "RadialProfile",
    "BoundaryShapeModel",
    "harmonic_profile",
    "radial_factor",
    "pole_factor",
    "conformal_metric",
    "perturbed_metric",
    "make_flat",
    "make_schwarzschild",
    "make_schwarzschild_halfspace",
    "make_conformally_flat",
    "make_fermi_model",
]


class MetricError(ValueError):
    """Raised for singular or indefinite metrics and invalid parameters."""


class DomainError(ValueError):
    """Raised when a field is evaluated outside its declared domain."""


def check_dimension(n) -> int:
    """Return ``n`` as an int, rejecting dimensions outside 3..7."""
    if isinstance(n, bool) or int(n) != n:
        raise MetricError(f"dimension must be an integer, got {n!r}")
    n = int(n)
    if not 3 <= n <= 7:
        raise MetricError(f"dimension must satisfy 3 <= n <= 7, got {n}")
    return n


def unit_sphere_area(n: int) -> float:
    """Euclidean area of the unit (n-1)-sphere in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def default_step(x: np.ndarray) -> np.ndarray:
    """Finite-difference step ``max(1e-4, 1e-3 |x|)`` for each point of a batch."""
    return np.maximum(1e-4, 1e-3 * np.linalg.norm(x, axis=-1))


@dataclass(frozen=True)
class DomainSpec:
    """Annular (half-)space region or an axis-aligned box.

    ``kind`` is one of ``"full-space-annulus"``, ``"half-space-annulus"`` or
    ``"box"``.  Annuli are ``inner_radius <= |x| <= outer_radius`` (with
    ``x_n >= 0`` for the half-space kind); the outer radius may be infinite.
    Boxes are given by ``lower`` and ``upper`` corners.
    """

    kind: str
    inner_radius: float = 1.0
    outer_radius: float = math.inf
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None
    rel_tol: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("full-space-annulus", "half-space-annulus", "box"):
            raise MetricError(f"unknown domain kind {self.kind!r}")
        if self.kind == "box":
            if self.lower is None or self.upper is None:
                raise MetricError("box domains need lower and upper corners")
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise MetricError("box corners must satisfy lower < upper")
        elif not (0.0 < self.inner_radius < self.outer_radius):
            raise MetricError("annulus radii must satisfy 0 < inner < outer")

    @property
    def is_half_space(self) -> bool:
        return self.kind == "half-space-annulus"

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            pad = self.rel_tol * np.maximum(1.0, np.abs(hi - lo))
            return np.all((x >= lo - pad) & (x <= hi + pad), axis=-1)
        r = np.linalg.norm(x, axis=-1)
        ok = (r >= self.inner_radius * (1 - self.rel_tol)) & (r <= self.outer_radius * (1 + self.rel_tol))
        if self.is_half_space:
            ok &= x[..., -1] >= -self.rel_tol * np.maximum(1.0, r)
        return ok

    def require(self, x: np.ndarray) -> None:
        inside = self.contains(x)
        if not np.all(inside):
            bad = np.asarray(x)[~inside] if np.ndim(inside) else np.asarray(x)
            raise DomainError(f"point(s) outside {self.kind} domain, e.g. {np.asarray(bad).reshape(-1, np.shape(x)[-1])[0]}")


# One-sided weights of the fourth-order first-derivative stencil.
_W4 = ((-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0))


class Field:
    """A smooth tensor-valued field on R^n evaluated on batches of points.

    Parameters
    ----------
    dim : int
        Ambient dimension ``n``.
    value : callable
        Maps points ``(..., n)`` to values ``(...,) + shape``.
    gradient, hessian : callable, optional
        Analytic first and second derivatives.  Missing ones fall back to
        central differences.
    shape : tuple
        Tensor shape of the values.
    step_rule : callable, optional
        Maps points to finite-difference steps; defaults to :func:`default_step`.
    step_scale : float
        Multiplier applied to the step rule, used by convergence checks.
    """

    def __init__(self, dim, value, gradient=None, hessian=None, shape=(), step_rule=None,
                 step_scale=1.0, name=""):
        self.dim = int(dim)
        self._value = value
        self._gradient = gradient
        self._hessian = hessian
        self.shape = tuple(shape)
        self.step_rule = step_rule or default_step
        self.step_scale = float(step_scale)
        self.name = name

    @property
    def has_analytic_gradient(self) -> bool:
        return self._gradient is not None

    @property
    def has_analytic_hessian(self) -> bool:
        return self._hessian is not None

    def _prep(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected points with last axis {self.dim}, got shape {x.shape}")
        return x

    def __call__(self, x):
        x = self._prep(x)
        self._check(x)
        return self._value(x)

    def _check(self, x):
        """Hook for subclasses (domain checks, positivity)."""

    def _steps(self, x):
        return self.step_scale * self.step_rule(x)

    def _expand(self, h, ndim_extra):
        return h.reshape(h.shape + (1,) * ndim_extra)

    def gradient(self, x, order: int = 2, analytic: bool = True):
        """First derivatives, shape ``(..., n) + shape``."""
        x = self._prep(x)
        self._check(x)
        if analytic and self._gradient is not None:
            return self._gradient(x)
        return self._fd_gradient(self._value, x, order, len(self.shape))

    def hessian(self, x, order: int = 2, analytic: bool = True):
        """Second derivatives, shape ``(..., n, n) + shape``."""
        x = self._prep(x)
        self._check(x)
        if analytic and self._hessian is not None:
            return self._hessian(x)
        if analytic and self._gradient is not None:
            # differentiate the analytic gradient once more and symmetrise
            d = self._fd_gradient(self._gradient, x, order, len(self.shape) + 1)
            return 0.5 * (d + np.swapaxes(d, x.ndim - 1, x.ndim))
        return self._fd_hessian(x, order)

    def _fd_gradient(self, fun, x, order, extra):
        n = self.dim
        h = self._steps(x)
        he = self._expand(h, extra)
        out = []
        for c in range(n):
            e = np.zeros(n)
            e[c] = 1.0
            if order == 2:
                d = (fun(x + h[..., None] * e) - fun(x - h[..., None] * e)) / (2.0 * he)
            elif order == 4:
                d = sum(w * fun(x + k * h[..., None] * e) for k, w in _W4) / he
            else:
                raise ValueError("finite-difference order must be 2 or 4")
            out.append(d)
        return np.stack(out, axis=x.ndim - 1)

    def _fd_hessian(self, x, order):
        n = self.dim
        f = self._value
        h = self._steps(x)
        hv = h[..., None]
        h2 = self._expand(h, len(self.shape)) ** 2
        eye = np.eye(n)
        f0 = f(x)
        rows = [[None] * n for _ in range(n)]
        for c in range(n):
            ec = eye[c]
            if order == 2:
                rows[c][c] = (f(x + hv * ec) - 2.0 * f0 + f(x - hv * ec)) / h2
            elif order == 4:
                rows[c][c] = (-f(x + 2 * hv * ec) + 16 * f(x + hv * ec) - 30 * f0
                              + 16 * f(x - hv * ec) - f(x - 2 * hv * ec)) / (12.0 * h2)
            else:
                raise ValueError("finite-difference order must be 2 or 4")
            for d in range(c + 1, n):
                ed = eye[d]
                if order == 2:
                    v = (f(x + hv * (ec + ed)) - f(x + hv * (ec - ed))
                         - f(x + hv * (ed - ec)) + f(x - hv * (ec + ed))) / (4.0 * h2)
                else:
                    v = sum(wi * wj * f(x + hv * (i * ec + j * ed))
                            for i, wi in _W4 for j, wj in _W4) / h2
                rows[c][d] = rows[d][c] = v
        ax = x.ndim - 1
        return np.stack([np.stack(r, axis=ax) for r in rows], axis=ax)

    def with_step_scale(self, scale: float) -> "Field":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.step_scale = float(scale)
        return clone

    def without_analytic(self) -> "Field":
        """Copy of the field that always uses finite differences."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone._gradient = None
        clone._hessian = None
        return clone


class ConformalFactor(Field):
    """Positive scalar field ``u``; evaluation fails where ``u <= 0``."""

    def __init__(self, dim, value, gradient=None, hessian=None, **kw):
        super().__init__(dim, value, gradient, hessian, shape=(), **kw)

    def __call__(self, x):
        v = super().__call__(x)
        if np.any(~(v > 0)):
            raise MetricError("conformal factor must be positive")
        return v


@dataclass(frozen=True)
class RadialProfile:
    """Radial function ``u(r)`` with its first two derivatives."""

    u: Callable
    du: Callable
    d2u: Callable


def harmonic_profile(dim: int, coefficient: float, constant: float = 1.0) -> RadialProfile:
    """Profile ``constant + coefficient * r^(2-n)``."""
    n = dim
    return RadialProfile(
        u=lambda r: constant + coefficient * r ** (2 - n),
        du=lambda r: (2 - n) * coefficient * r ** (1 - n),
        d2u=lambda r: (2 - n) * (1 - n) * coefficient * r ** (-n),
    )


def radial_factor(dim: int, profile: RadialProfile, center=None) -> ConformalFactor:
    """Conformal factor ``u(|x - center|)`` with analytic derivatives."""
    n = check_dimension(dim)
    c = np.zeros(n) if center is None else np.asarray(center, float)

    def parts(x):
        z = x - c
        r = np.linalg.norm(z, axis=-1)
        return z, r

    def value(x):
        _, r = parts(x)
        return profile.u(r)

    def grad(x):
        z, r = parts(x)
        return (profile.du(r) / r)[..., None] * z

    def hess(x):
        z, r = parts(x)
        zz = z[..., :, None] * z[..., None, :] / (r**2)[..., None, None]
        a = profile.du(r) / r
        b = profile.d2u(r)
        return b[..., None, None] * zz + a[..., None, None] * (np.eye(n) - zz)

    f = ConformalFactor(n, value, grad, hess, name="radial")
    f.profile = profile
    f.center = c
    return f


def pole_factor(dim: int, masses: Sequence[float], centers, constant: float = 1.0) -> ConformalFactor:
    """``constant + sum_k m_k |x - c_k|^(2-n)`` (harmonic away from the poles)."""
    n = check_dimension(dim)
    m = np.asarray(masses, float)
    cs = np.asarray(centers, float).reshape(len(m), n)

    def value(x):
        out = np.full(x.shape[:-1], float(constant))
        for mk, ck in zip(m, cs):
            out = out + mk * np.linalg.norm(x - ck, axis=-1) ** (2 - n)
        return out

    def grad(x):
        out = np.zeros(x.shape)
        for mk, ck in zip(m, cs):
            z = x - ck
            r = np.linalg.norm(z, axis=-1)
            out = out + (mk * (2 - n) * r ** (-n))[..., None] * z
        return out

    def hess(x):
        out = np.zeros(x.shape + (n,))
        for mk, ck in zip(m, cs):
            z = x - ck
            r = np.linalg.norm(z, axis=-1)
            zz = z[..., :, None] * z[..., None, :]
            out = out + (mk * (2 - n))[..., None, None] * (
                (r ** (-n))[..., None, None] * np.eye(n) - (n * r ** (-n - 2))[..., None, None] * zz)
        return out

    f = ConformalFactor(n, value, grad, hess, name="poles")
    f.masses = m
    f.centers = cs
    f.constant = float(constant)
    return f


class MetricField(Field):
    """Riemannian metric on a chart domain.

    Evaluation checks that the points lie in ``domain`` and that the metric is
    positive definite there.  ``decay_rate`` records the asymptotic decay
    exponent when known; it must exceed ``(n-2)/2``.
    """

    def __init__(self, dim, domain: DomainSpec, value, gradient=None, hessian=None,
                 decay_rate=None, step_rule=None, step_scale=1.0, name="", check_domain=True):
        n = check_dimension(dim)
        super().__init__(n, value, gradient, hessian, shape=(n, n), step_rule=step_rule,
                         step_scale=step_scale, name=name)
        if decay_rate is not None and not decay_rate > (n - 2) / 2.0:
            raise MetricError(f"decay rate {decay_rate} must exceed (n-2)/2")
        self.domain = domain
        self.decay_rate = decay_rate
        self.check_domain = check_domain

    def _check(self, x):
        if self.check_domain:
            self.domain.require(x)

    def __call__(self, x):
        g = super().__call__(x)
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise MetricError("metric is not positive definite at a sampled point") from exc
        return g

    def unchecked(self) -> "MetricField":
        """Copy that skips the domain check (used for stencils straddling a wall)."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.check_domain = False
        return clone


def conformal_metric(base: MetricField, u: Field, domain: Optional[DomainSpec] = None,
                     name: str = "conformal") -> MetricField:
    """The metric ``u^(4/(n-2)) g`` with derivatives by the product rule."""
    n = base.dim
    p = 4.0 / (n - 2)
    base_raw = base.unchecked()

    def value(x):
        return (u._value(x) ** p)[..., None, None] * base_raw._value(x)

    def grad(x):
        uv = u._value(x)
        du = u.gradient(x)
        g = base_raw._value(x)
        dg = base_raw.gradient(x)
        a = p * uv ** (p - 1)
        return (a[..., None] * du)[..., None, None] * g[..., None, :, :] + (uv**p)[..., None, None, None] * dg

    def hess(x):
        uv = u._value(x)
        du = u.gradient(x)
        d2u = u.hessian(x)
        g = base_raw._value(x)
        dg = base_raw.gradient(x)
        d2g = base_raw.hessian(x)
        up = uv**p
        a1 = p * uv ** (p - 1)
        a2 = p * (p - 1) * uv ** (p - 2)
        scal = a2[..., None, None] * du[..., :, None] * du[..., None, :] + a1[..., None, None] * d2u
        out = scal[..., None, None] * g[..., None, None, :, :]
        cross = a1[..., None, None, None, None] * du[..., :, None, None, None] * dg[..., None, :, :, :]
        out = out + cross + np.swapaxes(cross, -4, -3)
        return out + up[..., None, None, None, None] * d2g

    analytic = base.has_analytic_hessian and u.has_analytic_hessian
    return MetricField(n, domain or base.domain, value, grad if analytic else None,
                       hess if analytic else None, decay_rate=base.decay_rate, name=name)


def perturbed_metric(base: MetricField, sigma: Field, t: float, name: str = "perturbed") -> MetricField:
    """The metric ``g + t sigma`` for a symmetric 2-tensor field ``sigma``."""
    n = base.dim
    b = base.unchecked()

    def value(x):
        return b._value(x) + t * sigma._value(x)

    def grad(x):
        return b.gradient(x) + t * sigma.gradient(x)

    def hess(x):
        return b.hessian(x) + t * sigma.hessian(x)

    return MetricField(n, base.domain, value, grad, hess, decay_rate=base.decay_rate, name=name)


def make_flat(dim, domain: DomainSpec) -> MetricField:
    """Euclidean metric with exactly vanishing derivatives."""
    n = check_dimension(dim)
    eye = np.eye(n)

    def value(x):
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()

    def grad(x):
        return np.zeros(x.shape[:-1] + (n, n, n))

    def hess(x):
        return np.zeros(x.shape[:-1] + (n, n, n, n))

    return MetricField(n, domain, value, grad, hess, name="flat")


def make_conformally_flat(dim, domain: DomainSpec, u: Field, name="conformally-flat",
                          decay_rate=None) -> MetricField:
    """``u^(4/(n-2))`` times the Euclidean metric."""
    n = check_dimension(dim)
    g = conformal_metric(make_flat(n, domain), u, domain=domain, name=name)
    g.decay_rate = decay_rate
    g.factor = u
    return g


def make_schwarzschild(dim, mass_tilde: float, outer_radius: float = math.inf) -> MetricField:
    """Schwarzschild space ``(1 + (m/2) |x|^(2-n))^(4/(n-2))`` outside its horizon."""
    n = check_dimension(dim)
    if not mass_tilde > 0:
        raise MetricError("mass must be positive")
    r_h = (mass_tilde / 2.0) ** (1.0 / (n - 2))
    dom = DomainSpec("full-space-annulus", r_h, outer_radius)
    u = radial_factor(n, harmonic_profile(n, mass_tilde / 2.0))
    g = make_conformally_flat(n, dom, u, name="schwarzschild", decay_rate=float(n - 2))
    g.mass = float(mass_tilde)
    g.horizon_radius = r_h
    return g


def make_schwarzschild_halfspace(dim, mass: float, outer_radius: float = math.inf) -> MetricField:
    """Schwarzschild half-space ``(1 + m |x|^(2-n))^(4/(n-2))`` on ``x_n >= 0``."""
    n = check_dimension(dim)
    if not mass > 0:
        raise MetricError("mass must be positive")
    r_h = mass ** (1.0 / (n - 2))
    dom = DomainSpec("half-space-annulus", r_h, outer_radius)
    u = radial_factor(n, harmonic_profile(n, mass))
    g = make_conformally_flat(n, dom, u, name="schwarzschild-halfspace", decay_rate=float(n - 2))
    g.mass = float(mass)
    g.horizon_radius = r_h
    return g


@dataclass
class BoundaryShapeModel:
    """Collar model ``gamma_t = I - 2 t h0 + t^2 C`` for a boundary with second fundamental form ``h0``.

    ``h0`` is taken with respect to the unit normal pointing out of the
    manifold (towards ``t < 0``), so ``d/dt gamma_t`` at ``t = 0`` equals
    ``-2 h0`` and the boundary mean curvature is ``trace(h0)``.  The quadratic
    correction ``C`` defaults to ``h0 @ h0``, giving ``gamma_t = (I - t h0)^2``.
    """

    h0: np.ndarray
    correction: Optional[np.ndarray] = None

    def __post_init__(self):
        self.h0 = np.atleast_2d(np.asarray(self.h0, float))
        if self.h0.shape[0] != self.h0.shape[1] or not np.allclose(self.h0, self.h0.T, atol=0.0):
            raise MetricError("h0 must be a symmetric square matrix")
        if self.correction is None:
            self.correction = self.h0 @ self.h0
        self.correction = np.asarray(self.correction, float)

    @property
    def mean_curvature(self) -> float:
        return float(np.trace(self.h0))

    def gamma(self, t, order: int = 0):
        """``d^order/dt^order gamma_t`` for an array of ``t`` values."""
        t = np.asarray(t, float)[..., None, None]
        k = self.h0.shape[0]
        if order == 0:
            return np.eye(k) - 2.0 * t * self.h0 + t**2 * self.correction
        if order == 1:
            return -2.0 * self.h0 + 2.0 * t * self.correction
        if order == 2:
            return np.broadcast_to(2.0 * self.correction, t.shape[:-2] + (k, k)).copy()
        return np.zeros(t.shape[:-2] + (k, k))


def make_fermi_model(dim, model: BoundaryShapeModel, t_max: float, half_width: float = 1.0) -> MetricField:
    """Metric ``gamma_t + dt^2`` on the box ``|y_i| <= half_width``, ``0 <= t <= t_max``."""
    n = check_dimension(dim)
    if model.h0.shape != (n - 1, n - 1):
        raise MetricError(f"h0 must be {(n - 1)}x{(n - 1)} for n={n}")
    ts = np.linspace(0.0, t_max, 257)
    eig = np.linalg.eigvalsh(model.gamma(ts))
    if np.any(eig <= 0):
        raise MetricError("collar model loses positive definiteness before t_max")
    dom = DomainSpec("box", lower=tuple([-half_width] * (n - 1) + [0.0]),
                     upper=tuple([half_width] * (n - 1) + [t_max]))

    def value(x):
        g = np.zeros(x.shape[:-1] + (n, n))
        g[..., : n - 1, : n - 1] = model.gamma(x[..., -1])
        g[..., -1, -1] = 1.0
        return g

    def grad(x):
        dg = np.zeros(x.shape[:-1] + (n, n, n))
        dg[..., -1, : n - 1, : n - 1] = model.gamma(x[..., -1], 1)
        return dg

    def hess(x):
        d2 = np.zeros(x.shape[:-1] + (n, n, n, n))
        d2[..., -1, -1, : n - 1, : n - 1] = model.gamma(x[..., -1], 2)
        return d2

    g = MetricField(n, dom, value, grad, hess, name="fermi-model")
    g.model = model
    return g
