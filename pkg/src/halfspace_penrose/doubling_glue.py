"""Collars, reflection doubles, seam mollification and blending.

A collar is written in coordinates ``(y, t)`` with ``y`` tangential to the
boundary and ``t`` the collar parameter (``t >= 0`` inside the manifold).  The
double evaluates the one-sided data at ``|t|``.  Mollification averages in
``t`` only:

    M[G](y, t) = int_0^1 G(y, t - w(t) s) phi(s) ds,   w(t) = delta^P eta(t / delta)

with a normalized bump ``phi`` on ``(0, 1)`` and a plateau profile ``eta``.
Substituting ``tau = t - w(t) s`` moves every derivative onto the smooth
kernel ``phi((t - tau) / w) / w``, so first and second derivatives of the
mollified field are computed by the same quadrature as its values.  The
``tau`` interval is split at the seam ``tau = 0`` and each piece uses a Gauss
rule on the kernel.  Where ``w(t) = 0`` the input is returned unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from .metric_core import (
    BoundaryShapeModel,
    DomainSpec,
    Field,
    MetricError,
    MetricField,
    check_dimension,
)
from .tensor_calc import (
    christoffel_with_derivative,
    hypersurface_geometry,
    scalar_curvature,
    sphere_level,
)

__all__ = [
    "smooth_step",
    "MollifierSpec",
    "Cutoff",
    "FermiFamily",
    "model_family",
    "corner_family",
    "build_fermi",
    "reflect_double",
    "mollify_family",
    "SmoothedDouble",
    "assemble_smoothed_double",
    "DerivativeBoundReport",
    "verify_derivative_bounds",
    "seam_scalar_curvature_floor",
    "SeamCurvatureReport",
    "seam_mean_curvature_check",
    "delta_sweep_csv",
]


# ---------------------------------------------------------------------------
# smooth building blocks


def _exp_tail(x, order):
    """``exp(-1/x)`` for ``x > 0`` (zero otherwise) and its derivatives."""
    x = np.asarray(x, float)
    pos = x > 0
    e = np.zeros_like(x)
    with np.errstate(over="ignore"):
        e[pos] = np.exp(-1.0 / x[pos])
    # below ~1/700 the exponential underflows; keep xs away from 0 there
    pos = e > 0
    xs = np.where(pos, x, 1.0)
    if order == 0:
        return e
    if order == 1:
        return e / xs**2
    return e * (1.0 / xs**4 - 2.0 / xs**3)


def smooth_step(x, order: int = 0):
    """C-infinity step: 0 for ``x <= 0``, 1 for ``x >= 1``, no polynomial pieces."""
    x = np.asarray(x, float)
    a0, b0 = _exp_tail(x, 0), _exp_tail(1.0 - x, 0)
    d = a0 + b0
    if order == 0:
        return a0 / d
    a1, b1 = _exp_tail(x, 1), -_exp_tail(1.0 - x, 1)
    d1 = a1 + b1
    s1 = (a1 * d - a0 * d1) / d**2
    if order == 1:
        return s1
    a2, b2 = _exp_tail(x, 2), _exp_tail(1.0 - x, 2)
    d2 = a2 + b2
    return (a2 * d - a0 * d2) / d**2 - 2.0 * d1 * (a1 * d - a0 * d1) / d**3


@lru_cache(maxsize=1)
def _bump_norm() -> float:
    val, _ = quad(lambda s: math.exp(-1.0 / (s * (1.0 - s))), 0.0, 1.0, epsabs=1e-16, epsrel=1e-14, limit=200)
    return val


def _bump(s, order=0):
    """Unit-integral bump ``c exp(-1/(s(1-s)))`` on ``(0, 1)``."""
    s = np.asarray(s, float)
    inside = (s > 0) & (s < 1)
    ss = np.where(inside, s, 0.5)
    q = ss * (1.0 - ss)
    e = np.where(inside, np.exp(-1.0 / q), 0.0) / _bump_norm()
    if order == 0:
        return e
    q1 = 1.0 - 2.0 * ss
    if order == 1:
        return e * q1 / q**2
    return e * (q1**2 / q**4 - 2.0 / q**2 - 2.0 * q1**2 / q**3)


@lru_cache(maxsize=8)
def _unit_gauss(nodes: int):
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class MollifierSpec:
    """Bump, plateau profile and smoothing scale.

    The shift width is ``w(t) = delta**shift_power * eta(t / delta)`` where
    ``eta`` equals ``plateau_value`` on ``|t| <= plateau_end``, decays smoothly
    and vanishes for ``|t| >= support_end``.
    """

    delta: float
    plateau_value: float = 0.01
    plateau_end: float = 0.25
    support_end: float = 0.45
    shift_power: float = 2.0
    gauss_nodes: int = 64

    def __post_init__(self):
        if not self.delta > 0:
            raise MetricError("smoothing scale must be positive")
        if not 0 < self.plateau_end < self.support_end < 0.5:
            raise MetricError("need 0 < plateau_end < support_end < 1/2")
        if not 0 < self.plateau_value <= 0.01:
            raise MetricError("plateau value must lie in (0, 1/100]")
        if self.gauss_nodes < 8:
            raise MetricError("too few Gauss nodes")
        s, w = _unit_gauss(400)
        total = float(np.sum(w * _bump(s)))
        if abs(total - 1.0) > 1e-10 or np.any(_bump(np.linspace(0, 1, 1001)) < 0):
            raise MetricError("bump must be nonnegative with unit integral")

    @property
    def strip_half_width(self) -> float:
        """Mollification leaves ``|t| >= strip_half_width`` untouched."""
        return self.support_end * self.delta

    @property
    def bump_max(self) -> float:
        return float(_bump(0.5))

    def phi(self, s, order: int = 0):
        return _bump(s, order)

    def eta(self, t, order: int = 0):
        """Plateau profile and its derivatives."""
        t = np.asarray(t, float)
        span = self.support_end - self.plateau_end
        arg = (self.support_end - np.abs(t)) / span
        if order == 0:
            return self.plateau_value * smooth_step(arg)
        if order == 1:
            return -self.plateau_value * np.sign(t) * smooth_step(arg, 1) / span
        return self.plateau_value * smooth_step(arg, 2) / span**2

    def width(self, t, order: int = 0):
        """Shift width ``w(t)`` and its t-derivatives."""
        d = self.delta
        return d ** (self.shift_power - order) * self.eta(np.asarray(t, float) / d, order)

    def with_delta(self, delta: float) -> "MollifierSpec":
        return MollifierSpec(delta, self.plateau_value, self.plateau_end, self.support_end,
                             self.shift_power, self.gauss_nodes)


@dataclass(frozen=True)
class Cutoff:
    """Blending weight ``chi = 1 - a(|t|) b(|y|)``.

    ``a`` is 1 for ``|t| <= t_inner`` and 0 for ``|t| >= t_outer``; ``b`` does
    the same in ``|y|`` with ``y_inner``/``y_outer`` (infinite radii disable
    the tangential cutoff).  Hence ``chi = 0`` on the inner region and
    ``chi = 1`` outside the outer region.
    """

    t_inner: float
    t_outer: float
    y_inner: float = math.inf
    y_outer: float = math.inf

    def __post_init__(self):
        if not 0 < self.t_inner < self.t_outer:
            raise MetricError("cutoff needs 0 < t_inner < t_outer")
        if math.isfinite(self.y_outer) and not 0 < self.y_inner < self.y_outer:
            raise MetricError("cutoff needs 0 < y_inner < y_outer")

    @classmethod
    def default(cls, delta0: float, y_inner: float = math.inf, y_outer: float = math.inf) -> "Cutoff":
        return cls(0.5 * delta0, 0.75 * delta0, y_inner, y_outer)

    def _a(self, t):
        span = self.t_outer - self.t_inner
        arg = (self.t_outer - np.abs(t)) / span
        return smooth_step(arg), -np.sign(t) * smooth_step(arg, 1) / span, smooth_step(arg, 2) / span**2

    def _b(self, y):
        shape = y.shape[:-1]
        k = y.shape[-1]
        if not math.isfinite(self.y_outer):
            return np.ones(shape), np.zeros(shape + (k,)), np.zeros(shape + (k, k))
        span = self.y_outer - self.y_inner
        r = np.linalg.norm(y, axis=-1)
        rs = np.where(r > 0, r, 1.0)
        arg = (self.y_outer - r) / span
        b = smooth_step(arg)
        b1 = -smooth_step(arg, 1) / span
        b2 = smooth_step(arg, 2) / span**2
        e = y / rs[..., None]
        grad = b1[..., None] * e
        ee = e[..., :, None] * e[..., None, :]
        hess = b2[..., None, None] * ee + (b1 / rs)[..., None, None] * (np.eye(k) - ee)
        # b is constant near y = 0, so the origin gets zero derivatives
        grad = np.where((r > 0)[..., None], grad, 0.0)
        hess = np.where((r > 0)[..., None, None], hess, 0.0)
        return b, grad, hess

    def jets(self, x):
        """``chi`` with full gradient and Hessian at points ``(y, t)``."""
        x = np.asarray(x, float)
        n = x.shape[-1]
        a, a1, a2 = self._a(x[..., -1])
        b, bg, bh = self._b(x[..., :-1])
        chi = 1.0 - a * b
        grad = np.zeros(x.shape)
        grad[..., :-1] = -a[..., None] * bg
        grad[..., -1] = -a1 * b
        hess = np.zeros(x.shape + (n,))
        hess[..., :-1, :-1] = -a[..., None, None] * bh
        hess[..., :-1, -1] = -a1[..., None] * bg
        hess[..., -1, :-1] = -a1[..., None] * bg
        hess[..., -1, -1] = -a2 * b
        return chi, grad, hess


# ---------------------------------------------------------------------------
# collar families


class FermiFamily:
    """Family ``t -> gamma_t`` of boundary metrics describing ``gamma_t + dt^2``.

    ``fn(y, t, order)`` returns the ``order``-th t-derivative of ``gamma`` at
    boundary points ``y`` (shape ``(..., n-1)``) and parameters ``t``
    (broadcast against ``y[..., 0]``).  Sampled families built by geodesic
    integration are evaluable only at their boundary grid points.
    """

    def __init__(self, dim, delta0, fn, boundary_grid=None, t_samples=None, doubled=False,
                 y_independent=False, sampled=False, name="", diagnostics=None):
        self.dim = check_dimension(dim)
        if not delta0 > 0:
            raise MetricError("collar half-width must be positive")
        self.delta0 = float(delta0)
        self.fn = fn
        self.doubled = bool(doubled)
        self.y_independent = bool(y_independent)
        self.sampled = bool(sampled)
        self.name = name
        self.diagnostics = dict(diagnostics or {})
        k = self.dim - 1
        self.boundary_grid = np.zeros((1, k)) if boundary_grid is None else np.asarray(boundary_grid, float).reshape(-1, k)
        if t_samples is None:
            lo = -self.delta0 if self.doubled else 0.0
            t_samples = np.linspace(lo, self.delta0, 65)
        self.t_samples = np.asarray(t_samples, float)

    def evaluate(self, y, t, order: int = 0):
        t = np.asarray(t, float)
        if np.any(np.abs(t) > self.delta0 * (1 + 1e-12)):
            raise MetricError("collar parameter outside (-delta0, delta0)")
        if not self.doubled and np.any(t < 0):
            raise MetricError("one-sided family evaluated at t < 0")
        return self.fn(np.asarray(y, float), t, order)

    @property
    def gamma(self) -> np.ndarray:
        """Samples on ``boundary_grid x t_samples``, shape ``(m, T, n-1, n-1)``."""
        y = self.boundary_grid[:, None, :]
        t = np.broadcast_to(self.t_samples, (len(self.boundary_grid), len(self.t_samples)))
        return self.evaluate(np.broadcast_to(y, t.shape + (self.dim - 1,)), t)

    def check_positive(self):
        eig = np.linalg.eigvalsh(self.gamma)
        if np.any(eig <= 0):
            raise MetricError("collar metric loses positive definiteness")
        return float(eig.min())


def _broadcast_yt(y, t, k):
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    shape = np.broadcast_shapes(y.shape[:-1], t.shape)
    return np.broadcast_to(y, shape + (k,)), np.broadcast_to(t, shape)


def model_family(model: BoundaryShapeModel, delta0: float) -> FermiFamily:
    """One-sided family of a quadratic collar model (independent of ``y``)."""
    k = model.h0.shape[0]

    def fn(y, t, order):
        _, tb = _broadcast_yt(y, t, k)
        return model.gamma(tb, order)

    fam = FermiFamily(k + 1, delta0, fn, y_independent=True, name="model")
    fam.check_positive()
    return fam


def corner_family(dim: int, delta0: float, slope: float = 1.0) -> FermiFamily:
    """One-sided family ``(1 + slope t) I``; its double is the corner ``(1 + slope |t|) I``."""
    n = check_dimension(dim)
    k = n - 1
    if slope * -delta0 <= -1 and slope < 0:
        raise MetricError("corner family degenerates inside the collar")

    def fn(y, t, order):
        _, tb = _broadcast_yt(y, t, k)
        eye = np.eye(k)
        if order == 0:
            return (1.0 + slope * tb)[..., None, None] * eye
        if order == 1:
            return np.broadcast_to(slope * eye, tb.shape + (k, k)).copy()
        return np.zeros(tb.shape + (k, k))

    return FermiFamily(n, delta0, fn, y_independent=True, name="corner")


def build_fermi(g: MetricField, delta0: float, boundary_grid, steps: int = 64,
                drift_tol: float = 1e-8, separation_floor: float = 0.25) -> FermiFamily:
    """Integrate normal geodesics from ``x_n = 0`` and pull ``g`` back to the collar.

    Geodesics start at ``(y, 0)`` with the inward unit normal and are advanced
    by the classical fourth-order Runge-Kutta method with step ``delta0/steps``
    together with their variation fields ``J_i = dx/dy_i``.  The tangential
    metric is ``gamma_ij = g(J_i, J_j)``; its t-derivative is computed from the
    same state and both feed a cubic Hermite interpolant in ``t``.
    """
    n = g.dim
    k = n - 1
    grid = np.asarray(boundary_grid, float).reshape(-1, k)
    m = len(grid)
    if not delta0 > 0:
        raise MetricError("collar half-width must be positive")
    gg = g.unchecked()

    def normal(y):
        x = np.concatenate([y, np.zeros(y.shape[:-1] + (1,))], axis=-1)
        ginv = np.linalg.inv(gg(x))
        col = ginv[..., :, -1]
        return col / np.sqrt(ginv[..., -1, -1])[..., None]

    hy = 1e-5 * np.maximum(1.0, np.linalg.norm(grid, axis=-1))
    x0 = np.concatenate([grid, np.zeros((m, 1))], axis=1)
    g.domain.require(x0)
    v0 = normal(grid)
    J0 = np.zeros((m, k, n))
    Jd0 = np.zeros((m, k, n))
    for i in range(k):
        J0[:, i, i] = 1.0
        e = np.zeros(k)
        e[i] = 1.0
        Jd0[:, i, :] = (normal(grid + hy[:, None] * e) - normal(grid - hy[:, None] * e)) / (2 * hy[:, None])

    def rhs(state):
        x, v, J, Jd = state
        _, gam, dgam = christoffel_with_derivative(gg, x)
        a = -np.einsum("mkab,ma,mb->mk", gam, v, v)
        Jdd = (-np.einsum("mckab,mic,ma,mb->mik", dgam, J, v, v)
               - 2.0 * np.einsum("mkab,mia,mb->mik", gam, Jd, v))
        return (v, a, Jd, Jdd)

    def gamma_of(state):
        x, v, J, Jd = state
        gv = gg(x)
        dg = gg.gradient(x)
        gam = np.einsum("mab,mia,mjb->mij", gv, J, J)
        dgam = (np.einsum("mcab,mc,mia,mjb->mij", dg, v, J, J)
                + np.einsum("mab,mia,mjb->mij", gv, Jd, J)
                + np.einsum("mab,mia,mjb->mij", gv, J, Jd))
        speed = np.sqrt(np.einsum("mab,ma,mb->m", gv, v, v))
        cross = np.einsum("mab,ma,mib->mi", gv, v, J)
        frame = np.concatenate([J, v[:, None, :]], axis=1)
        return gam, dgam, speed, cross, np.linalg.det(frame)

    h = delta0 / steps
    state = (x0, v0, J0, Jd0)
    ts = np.linspace(0.0, delta0, steps + 1)
    G = np.zeros((m, steps + 1, k, k))
    dG = np.zeros_like(G)
    traj = np.zeros((m, steps + 1, n))
    drift = 0.0
    gauss = 0.0
    min_det = math.inf
    for j in range(steps + 1):
        gam, dgam, speed, cross, det = gamma_of(state)
        G[:, j], dG[:, j] = gam, dgam
        traj[:, j] = state[0]
        drift = max(drift, float(np.max(np.abs(speed - 1.0))))
        gauss = max(gauss, float(np.max(np.abs(cross))))
        min_det = min(min_det, float(np.min(det)))
        if j == steps:
            break
        k1 = rhs(state)
        k2 = rhs(tuple(s + 0.5 * h * d for s, d in zip(state, k1)))
        k3 = rhs(tuple(s + 0.5 * h * d for s, d in zip(state, k2)))
        k4 = rhs(tuple(s + h * d for s, d in zip(state, k3)))
        state = tuple(s + h / 6.0 * (a + 2 * b + 2 * c + d) for s, a, b, c, d in zip(state, k1, k2, k3, k4))
    if drift > drift_tol:
        raise MetricError(f"geodesic speed drift {drift:.2e} exceeds {drift_tol:.0e}")
    if min_det <= 0:
        raise MetricError("normal geodesics develop a focal point inside the collar")
    sep_ratio = math.inf
    if m > 1:
        d0 = np.linalg.norm(grid[:, None] - grid[None], axis=-1)
        off = ~np.eye(m, dtype=bool)
        for j in range(steps + 1):
            dj = np.linalg.norm(traj[:, None, j] - traj[None, :, j], axis=-1)
            sep_ratio = min(sep_ratio, float(np.min(dj[off] / d0[off])))
        if sep_ratio < separation_floor:
            raise MetricError("normal geodesics from distinct boundary points nearly cross: reduce delta0")

    splines = [CubicHermiteSpline(ts, G[i], dG[i], axis=0) for i in range(m)]
    index = {tuple(row): i for i, row in enumerate(grid)}

    def fn(y, t, order):
        yb, tb = _broadcast_yt(y, t, k)
        out = np.empty(tb.shape + (k, k))
        flat_y = yb.reshape(-1, k)
        flat_t = tb.reshape(-1)
        res = out.reshape(-1, k, k)
        keys = [tuple(r) for r in flat_y]
        for key in set(keys):
            if key not in index:
                raise MetricError("sampled collar family evaluated off its boundary grid")
            sel = np.array([kk == key for kk in keys])
            res[sel] = splines[index[key]](flat_t[sel], order)
        return out

    diag = {"speed_drift": drift, "gauss_lemma_defect": gauss, "min_frame_det": min_det,
            "separation_ratio": sep_ratio, "step": h}
    return FermiFamily(n, delta0, fn, grid, ts, sampled=True, name="geodesic", diagnostics=diag)


def reflect_double(f: FermiFamily) -> FermiFamily:
    """Even extension ``gamma_{-t} = gamma_t`` (odd t-derivatives change sign)."""
    if f.doubled:
        return f
    base = f.fn

    def fn(y, t, order):
        t = np.asarray(t, float)
        val = base(y, np.abs(t), order)
        if order % 2:
            val = np.where((t < 0)[..., None, None], -val, val)
        return val

    ts = np.concatenate([-f.t_samples[:0:-1], f.t_samples])
    return FermiFamily(f.dim, f.delta0, fn, f.boundary_grid, ts, doubled=True,
                       y_independent=f.y_independent, sampled=f.sampled, name=f.name + "-double",
                       diagnostics=f.diagnostics)


# ---------------------------------------------------------------------------
# the mollification kernel


def _kernel_nodes(t, spec: MollifierSpec, max_order: int):
    """Gauss nodes ``tau`` and quadrature weights for the kernel and its t-derivatives.

    Nodes are placed in the scaled variable ``z = (t - tau) / w(t)`` on
    ``(0, 1)``, split at the seam ``z = t / w`` when it falls inside.  The
    returned weights already include ``d tau = w dz``.  Their exact sums are
    1, 0 and 0; callers integrate differences ``G(tau) - G(t)`` so the large
    ``1/w`` factors never meet an undifferenced constant.
    """
    s, wq = _unit_gauss(spec.gauss_nodes)
    w = spec.width(t)[:, None]
    w1 = spec.width(t, 1)[:, None]
    w2 = spec.width(t, 2)[:, None]
    z0 = np.clip(t[:, None] / w, 0.0, 1.0)
    z = np.concatenate([z0 * s, z0 + (1.0 - z0) * s], axis=1)
    qw = np.concatenate([z0 * wq, (1.0 - z0) * wq], axis=1)
    tau = t[:, None] - w * z
    ph = _bump(z)
    out = [qw * ph]
    if max_order >= 1:
        ph1 = _bump(z, 1)
        zt = (1.0 - z * w1) / w
        out.append(qw * (ph1 * zt - ph * w1 / w))
        if max_order >= 2:
            ph2 = _bump(z, 2)
            ztt = (-2.0 * zt * w1 - z * w2) / w
            out.append(qw * (ph2 * zt**2 + ph1 * ztt - 2.0 * ph1 * zt * w1 / w
                             - ph * w2 / w + 2.0 * ph * w1**2 / w**2))
    return tau, out


def _smooth_nodes(t, spec: MollifierSpec):
    """Shifted points ``tau = t - w z`` and chain-rule factors for the s-form."""
    z, wq = _unit_gauss(spec.gauss_nodes)
    w = spec.width(t)[:, None]
    w1 = spec.width(t, 1)[:, None]
    w2 = spec.width(t, 2)[:, None]
    tau = t[:, None] - w * z[None, :]
    base = np.broadcast_to(wq * _bump(z), tau.shape)
    return tau, base, 1.0 - w1 * z[None, :], w2 * z[None, :]


def _split_active(t, spec: MollifierSpec):
    """Indices with nonzero shift, separated into seam-straddling and smooth ones.

    Away from the seam the s-form integrand is smooth and derivatives fall on
    the input; straddling points use the kernel form, where ``w`` sits on its
    plateau and no small-``w`` cancellation occurs.
    """
    w = spec.width(t)
    active = w > 0
    straddle = active & (t > 0) & (t < w)
    return np.nonzero(straddle)[0], np.nonzero(active & ~straddle)[0]


def _mollify_jets(raw_jets, x, spec: MollifierSpec, need: int, chunk: int = 2048):
    """Mollified value (and gradient/Hessian if ``need >= 1/2``) at ``x``.

    ``raw_jets(x, need)`` returns a tuple ``(value, grad, hess)`` truncated to
    ``need + 1`` entries, in the batched layout of :class:`Field`.
    """
    x = np.asarray(x, float)
    batch = x.shape[:-1]
    n = x.shape[-1]
    flat = x.reshape(-1, n)
    raw = raw_jets(flat, need)
    outs = [np.array(r, copy=True) for r in raw]
    t = flat[:, -1]
    straddle, smooth = _split_active(t, spec)
    shp = raw[0].shape[1:]
    ax = "".join("abcdefgh"[: len(shp)])

    def nodes_at(idx, tau):
        q = tau.shape[1]
        pts = np.repeat(flat[idx][:, None, :], q, axis=1)
        pts[..., -1] = tau
        jets = raw_jets(pts.reshape(-1, n), need)
        return [j.reshape((len(idx), q) + j.shape[1:]) for j in jets]

    for start in range(0, len(smooth), chunk):
        idx = smooth[start:start + chunk]
        tau, base, a, b = _smooth_nodes(t[idx], spec)
        J = nodes_at(idx, tau)
        outs[0][idx] = np.einsum(f"iq,iq{ax}->i{ax}", base, J[0])
        if need >= 1:
            g = np.einsum(f"iq,iqc{ax}->ic{ax}", base, J[1][:, :, :-1])
            gt = np.einsum(f"iq,iq{ax}->i{ax}", base * a, J[1][:, :, -1])
            outs[1][idx] = np.concatenate([g, gt[:, None]], axis=1)
        if need >= 2:
            hh = np.empty((len(idx), n, n) + shp)
            hh[:, :-1, :-1] = np.einsum(f"iq,iqcd{ax}->icd{ax}", base, J[2][:, :, :-1, :-1])
            mixed = np.einsum(f"iq,iqc{ax}->ic{ax}", base * a, J[2][:, :, :-1, -1])
            hh[:, :-1, -1] = mixed
            hh[:, -1, :-1] = mixed
            hh[:, -1, -1] = (np.einsum(f"iq,iq{ax}->i{ax}", base * a**2, J[2][:, :, -1, -1])
                             - np.einsum(f"iq,iq{ax}->i{ax}", base * b, J[1][:, :, -1]))
            outs[2][idx] = hh

    for start in range(0, len(straddle), chunk):
        idx = straddle[start:start + chunk]
        tau, kw = _kernel_nodes(t[idx], spec, need)
        J = nodes_at(idx, tau)
        avg = lambda weights, arr: np.einsum(f"iq,iq{ax}->i{ax}", weights, arr)
        dv = J[0] - raw[0][idx][:, None]
        outs[0][idx] = raw[0][idx] + avg(kw[0], dv)
        if need >= 1:
            dg = J[1][:, :, :-1] - raw[1][idx][:, None, :-1]
            g_out = raw[1][idx][:, :-1] + np.einsum(f"iq,iqc{ax}->ic{ax}", kw[0], dg)
            outs[1][idx] = np.concatenate([g_out, avg(kw[1], dv)[:, None]], axis=1)
        if need >= 2:
            hh = np.empty((len(idx), n, n) + shp)
            dh = J[2][:, :, :-1, :-1] - raw[2][idx][:, None, :-1, :-1]
            hh[:, :-1, :-1] = raw[2][idx][:, :-1, :-1] + np.einsum(f"iq,iqcd{ax}->icd{ax}", kw[0], dh)
            mixed = np.einsum(f"iq,iqc{ax}->ic{ax}", kw[1], dg)
            hh[:, :-1, -1] = mixed
            hh[:, -1, :-1] = mixed
            hh[:, -1, -1] = avg(kw[2], dv)
            outs[2][idx] = hh
    return tuple(o.reshape(batch + o.shape[1:]) for o in outs)


def mollify_family(f: FermiFamily, spec: MollifierSpec, check_nodes: bool = True) -> FermiFamily:
    """Mollify a (doubled) collar family in ``t``.

    The result agrees bit-exactly with the input where ``w(t) = 0``, in
    particular for ``|t| >= spec.strip_half_width``.  Quadrature convergence
    is checked on the family's t-samples by halving the Gauss rule.
    """
    f = reflect_double(f)
    if spec.strip_half_width >= f.delta0:
        raise MetricError("smoothing strip must lie inside the collar (delta < delta0)")
    k = f.dim - 1

    def make(sp):
        def fn(y, t, order):
            yb, tb = _broadcast_yt(y, t, k)
            shape = tb.shape
            yf = yb.reshape(-1, k)
            tf = tb.reshape(-1)
            out = f.evaluate(yf, tf, order).copy()
            straddle, smooth = _split_active(tf, sp)
            if len(smooth):
                tau, base, a, b = _smooth_nodes(tf[smooth], sp)
                yy = np.broadcast_to(yf[smooth][:, None, :], tau.shape + (k,))
                v = f.evaluate(yy, tau, order)
                if order == 0:
                    out[smooth] = np.einsum("iq,iqab->iab", base, v)
                elif order == 1:
                    out[smooth] = np.einsum("iq,iqab->iab", base * a, v)
                else:
                    v1 = f.evaluate(yy, tau, 1)
                    out[smooth] = (np.einsum("iq,iqab->iab", base * a**2, v)
                                   - np.einsum("iq,iqab->iab", base * b, v1))
            if len(straddle):
                tau, kw = _kernel_nodes(tf[straddle], sp, order)
                yy = np.broadcast_to(yf[straddle][:, None, :], tau.shape + (k,))
                ref = f.evaluate(yf[straddle], tf[straddle], 0)
                vals = f.evaluate(yy, tau, 0) - ref[:, None]
                out[straddle] = (ref if order == 0 else 0.0) + np.einsum("iq,iqab->iab", kw[order], vals)
            return out.reshape(shape + (k, k))
        return fn

    fn = make(spec)
    if check_nodes:
        coarse = make(MollifierSpec(spec.delta, spec.plateau_value, spec.plateau_end, spec.support_end,
                                    spec.shift_power, max(8, spec.gauss_nodes // 2)))
        ts = np.concatenate([f.t_samples, np.linspace(-spec.strip_half_width, spec.strip_half_width, 41)])
        for y in f.boundary_grid:
            yb = np.broadcast_to(y, ts.shape + (k,))
            a, b = fn(yb, ts, 0), coarse(yb, ts, 0)
            if np.max(np.abs(a - b)) > 1e-8 * max(1.0, float(np.max(np.abs(a)))):
                raise MetricError("mollification quadrature did not converge")
    return FermiFamily(f.dim, f.delta0, fn, f.boundary_grid, f.t_samples, doubled=True,
                       y_independent=f.y_independent, sampled=f.sampled, name=f.name + "-mollified",
                       diagnostics={**f.diagnostics, "delta": spec.delta})


# ---------------------------------------------------------------------------
# raw doubles as jet sources


def _family_jets(f: FermiFamily, fd_step: float = 1e-4):
    """Jets of ``blockdiag(gamma_|t|, 1)`` in collar coordinates."""
    n = f.dim
    k = n - 1
    f = reflect_double(f)

    def block(y, t, order):
        out = np.zeros(t.shape + (n, n))
        out[..., :k, :k] = f.evaluate(y, t, order)
        if order == 0:
            out[..., k, k] = 1.0
        return out

    def jets(x, need):
        y, t = x[:, :k], x[:, k]
        val = block(y, t, 0)
        res = [val]
        if need >= 1:
            grad = np.zeros((len(x), n, n, n))
            grad[:, k] = block(y, t, 1)
            if not f.y_independent:
                for c in range(k):
                    e = np.zeros(k)
                    e[c] = fd_step
                    grad[:, c] = (block(y + e, t, 0) - block(y - e, t, 0)) / (2 * fd_step)
            res.append(grad)
        if need >= 2:
            hess = np.zeros((len(x), n, n, n, n))
            hess[:, k, k] = block(y, t, 2)
            if not f.y_independent:
                for c in range(k):
                    ec = np.zeros(k)
                    ec[c] = fd_step
                    mix = (block(y + ec, t, 1) - block(y - ec, t, 1)) / (2 * fd_step)
                    hess[:, c, k] = hess[:, k, c] = mix
                    for d in range(c, k):
                        ed = np.zeros(k)
                        ed[d] = fd_step
                        v = (block(y + ec + ed, t, 0) - block(y + ec - ed, t, 0)
                             - block(y - ec + ed, t, 0) + block(y - ec - ed, t, 0)) / (4 * fd_step**2)
                        hess[:, c, d] = hess[:, d, c] = v
            res.append(hess)
        return tuple(res)

    return jets


def _reflection_jets(field: Field):
    """Jets of the mirror double ``F(x', |x_n|)`` of a tensor field on ``x_n >= 0``.

    Each index of the value (and of the derivatives) picks up a factor ``-1``
    when it equals ``n`` and the point lies in ``x_n < 0``.
    """
    n = field.dim
    rank = len(field.shape)
    raw = field.unchecked() if isinstance(field, MetricField) else field

    def signs(x):
        sg = np.ones(x.shape)
        sg[:, -1] = np.where(x[:, -1] < 0, -1.0, 1.0)
        return sg

    def apply(arr, sg, nidx):
        for j in range(nidx):
            shape = [len(sg)] + [1] * nidx
            shape[1 + j] = n
            arr = arr * sg.reshape(shape)
        return arr

    def jets(x, need):
        xr = x.copy()
        xr[:, -1] = np.abs(x[:, -1])
        sg = signs(x)
        val = raw._value(xr)
        res = [apply(val, sg, rank)]
        if need >= 1:
            res.append(apply(raw.gradient(xr), sg, rank + 1))
        if need >= 2:
            res.append(apply(raw.hessian(xr), sg, rank + 2))
        return tuple(res)

    return jets


# ---------------------------------------------------------------------------
# assembly


@dataclass
class SmoothedDouble:
    """Blended metric ``chi * raw + (1 - chi) * mollified`` on the double.

    ``coordinates`` is ``"fermi"`` (collar box in ``(y, t)``) or ``"chart"``
    (mirror double in the asymptotic chart with ``t = x_n``).  For conformally
    flat chart sources ``factor`` is the blended conformal factor.
    """

    base: object
    spec: MollifierSpec
    cutoff: Cutoff
    metric: MetricField
    raw: MetricField
    mollified: MetricField
    coordinates: str
    delta0: float
    factor: Optional[Field] = None

    @property
    def delta(self) -> float:
        return self.spec.delta


def _blend_jets(raw_jets, moll_jets, cutoff: Cutoff, x, need):
    chi, dchi, hchi = cutoff.jets(x)
    R = raw_jets
    M = moll_jets
    shp = R[0].shape[x.ndim - 1:]
    ex = (slice(None),) * (x.ndim - 1)
    c = chi.reshape(chi.shape + (1,) * len(shp))
    diff = R[0] - M[0]
    val = c * R[0] + (1 - c) * M[0]
    out = [val]
    if need >= 1:
        dc = dchi.reshape(dchi.shape + (1,) * len(shp))
        gd = R[1] - M[1]
        cc = np.expand_dims(c, x.ndim - 1)
        grad = dc * np.expand_dims(diff, x.ndim - 1) + cc * R[1] + (1 - cc) * M[1]
        out.append(grad)
    if need >= 2:
        hc = hchi.reshape(hchi.shape + (1,) * len(shp))
        c2 = np.expand_dims(np.expand_dims(c, x.ndim - 1), x.ndim - 1)
        dca = np.expand_dims(dc, x.ndim)  # (..., c, 1, shp)
        dcb = np.expand_dims(dc, x.ndim - 1)  # (..., 1, d, shp)
        gda = np.expand_dims(gd, x.ndim)
        gdb = np.expand_dims(gd, x.ndim - 1)
        hess = (hc * np.expand_dims(np.expand_dims(diff, x.ndim - 1), x.ndim - 1)
                + dca * gdb + dcb * gda + c2 * R[2] + (1 - c2) * M[2])
        out.append(hess)
    return tuple(out)


def _field_from_jets(dim, jets, shape, name, domain=None, metric=True, decay_rate=None):
    def value(x):
        return _eval(x, 0)[0]

    def grad(x):
        return _eval(x, 1)[1]

    def hess(x):
        return _eval(x, 2)[2]

    def _eval(x, need):
        x = np.asarray(x, float)
        batch = x.shape[:-1]
        res = jets(x.reshape(-1, dim), need)
        return tuple(r.reshape(batch + r.shape[1:]) for r in res)

    if metric:
        return MetricField(dim, domain, value, grad, hess, decay_rate=decay_rate, name=name)
    return Field(dim, value, grad, hess, shape=shape, name=name)


def assemble_smoothed_double(source, spec: MollifierSpec, cutoff: Optional[Cutoff] = None,
                             delta0: Optional[float] = None, half_width: float = 1.0) -> SmoothedDouble:
    """Double, mollify and blend.

    ``source`` is either a :class:`FermiFamily` (collar coordinates) or a
    half-space :class:`MetricField` with analytic derivatives, doubled by the
    mirror map ``x_n -> -x_n`` in its own chart.  ``delta0`` is the collar
    half-width used by the default cutoff; it defaults to the family's value,
    and to 0.5 for chart sources.
    """
    if isinstance(source, FermiFamily):
        fam = reflect_double(source)
        if fam.sampled:
            raise MetricError("assembly needs an analytic collar family")
        n = fam.dim
        d0 = fam.delta0 if delta0 is None else float(delta0)
        raw_j = _family_jets(fam)
        dom = DomainSpec("box", lower=tuple([-half_width] * (n - 1) + [-d0]),
                         upper=tuple([half_width] * (n - 1) + [d0]))
        coords = "fermi"
        decay = None
    elif isinstance(source, MetricField):
        if not source.domain.is_half_space:
            raise MetricError("chart doubling needs a half-space metric")
        if not source.has_analytic_hessian:
            raise MetricError("chart doubling needs analytic metric derivatives")
        n = source.dim
        d0 = 0.5 if delta0 is None else float(delta0)
        raw_j = _reflection_jets(source)
        dom = DomainSpec("full-space-annulus", source.domain.inner_radius, source.domain.outer_radius)
        coords = "chart"
        decay = source.decay_rate
    else:
        raise TypeError("source must be a FermiFamily or a half-space MetricField")
    if spec.strip_half_width >= d0:
        raise MetricError("smoothing strip must lie inside the collar (delta < delta0)")
    cut = cutoff or Cutoff.default(d0)
    if cut.t_outer > d0 * (1 + 1e-12):
        raise MetricError("cutoff outer region must stay inside the collar")
    if spec.strip_half_width > cut.t_inner:
        raise MetricError("smoothing strip must lie inside the region where chi = 0")

    def moll_j(x, need):
        return _mollify_jets(raw_j, x, spec, need)

    def blend_j(x, need):
        return _blend_jets(raw_j(x, need), moll_j(x, need), cut, x, need)

    raw = _field_from_jets(n, raw_j, (n, n), "double", dom, decay_rate=decay)
    moll = _field_from_jets(n, moll_j, (n, n), "mollified-double", dom, decay_rate=decay)
    blended = _field_from_jets(n, blend_j, (n, n), "smoothed-double", dom, decay_rate=decay)

    factor = None
    u = getattr(source, "factor", None)
    if coords == "chart" and u is not None:
        p = 4.0 / (n - 2)
        psi = Field(n, lambda x: u._value(x) ** p,
                    lambda x: (p * u._value(x) ** (p - 1))[..., None] * u.gradient(x),
                    lambda x: ((p * (p - 1) * u._value(x) ** (p - 2))[..., None, None]
                               * u.gradient(x)[..., :, None] * u.gradient(x)[..., None, :]
                               + (p * u._value(x) ** (p - 1))[..., None, None] * u.hessian(x)),
                    name="factor-power")
        psi_raw = _reflection_jets(psi)

        def psi_blend(x, need):
            return _blend_jets(psi_raw(x, need), _mollify_jets(psi_raw, x, spec, need), cut, x, need)

        def u_jets(x, need):
            j = psi_blend(x, need)
            inv = 1.0 / p
            out = [j[0] ** inv]
            if need >= 1:
                a1 = inv * j[0] ** (inv - 1)
                out.append(a1[:, None] * j[1])
            if need >= 2:
                a2 = inv * (inv - 1) * j[0] ** (inv - 2)
                out.append(a2[:, None, None] * j[1][:, :, None] * j[1][:, None, :] + a1[:, None, None] * j[2])
            return tuple(out)

        factor = _field_from_jets(n, u_jets, (), "smoothed-factor", metric=False)

    return SmoothedDouble(source, spec, cut, blended, raw, moll, coords, d0, factor)


# ---------------------------------------------------------------------------
# verification


def _strip_t_grid(spec: MollifierSpec, points: int = 801, dense: int = 401):
    """Uniform samples on ``[-delta, delta]`` refined around the kernel width at the seam."""
    d = spec.delta
    w0 = float(spec.width(0.0))
    t = np.concatenate([np.linspace(-d, d, points), np.linspace(-4 * w0, 4 * w0, dense)])
    return np.unique(t)


@dataclass
class DerivativeBoundReport:
    """Per-delta suprema of ``|g_d - g|/delta``, ``|D g_d|`` and ``delta |D^2 g_d|``."""

    deltas: list
    sup_difference: list
    sup_first: list
    sup_second: list
    composite: list
    min_scalar_curvature: list
    ratio: float
    bounded: bool
    threshold: float = 3.0

    def rows(self):
        return list(zip(self.deltas, self.sup_difference, self.sup_first, self.sup_second,
                        self.composite, self.min_scalar_curvature))


def _sample_points(sd_spec, coords, n, y_points, t_grid):
    if y_points is None:
        y_points = np.zeros((1, n - 1))
        if coords == "chart":
            y_points[0, 0] = 2.0
    y_points = np.asarray(y_points, float).reshape(-1, n - 1)
    if t_grid is None:
        t_grid = _strip_t_grid(sd_spec)
    yy = np.repeat(y_points, len(t_grid), axis=0)
    tt = np.tile(t_grid, len(y_points))
    return np.concatenate([yy, tt[:, None]], axis=1)


def verify_derivative_bounds(source, deltas, spec: Optional[MollifierSpec] = None, y_points=None,
                             t_grid=None, threshold: float = 3.0, with_curvature: bool = True,
                             **assemble_kw) -> DerivativeBoundReport:
    """Sweep ``delta`` and measure the mollification derivative composite.

    For every delta the composite ``|g_d - g|/delta + |D g_d| + delta |D^2 g_d|``
    (Euclidean chart norms) is maximised over the sample grid.  The sweep
    counts as bounded when the largest composite is below ``threshold`` times
    the smallest.
    """
    deltas = [float(d) for d in deltas]
    if len(deltas) < 3:
        raise ValueError("a derivative sweep needs at least three smoothing scales")
    base = spec or MollifierSpec(deltas[0])
    sd_rows = ([], [], [], [], [])
    for d in deltas:
        sp = base.with_delta(d)
        sd = assemble_smoothed_double(source, sp, **assemble_kw)
        pts = _sample_points(sp, sd.coordinates, sd.metric.dim, y_points, t_grid)
        raw = sd.raw(pts)
        mv = sd.mollified(pts)
        dm = sd.mollified.gradient(pts)
        hm = sd.mollified.hessian(pts)
        nrm = lambda a, k: np.sqrt(np.sum(a**2, axis=tuple(range(1, 1 + k))))
        diff = nrm(mv - raw, 2) / d
        first = nrm(dm, 3)
        second = d * nrm(hm, 4)
        comp = diff + first + second
        sd_rows[0].append(float(diff.max()))
        sd_rows[1].append(float(first.max()))
        sd_rows[2].append(float(second.max()))
        sd_rows[3].append(float(comp.max()))
        sd_rows[4].append(seam_scalar_curvature_floor(sd, y_points) if with_curvature else math.nan)
    comp = np.array(sd_rows[3])
    lo = float(comp.min())
    ratio = float(comp.max() / lo) if lo > 0 else (1.0 if comp.max() == 0 else math.inf)
    return DerivativeBoundReport(deltas, *sd_rows, ratio=ratio, bounded=bool(ratio < threshold),
                                 threshold=threshold)


def seam_scalar_curvature_floor(sd: SmoothedDouble, y_points=None, t_grid=None) -> float:
    """Minimum of the scalar curvature of the smoothed double over the seam strip ``|t| <= delta``."""
    pts = _sample_points(sd.spec, sd.coordinates, sd.metric.dim, y_points, t_grid)
    return float(np.min(scalar_curvature(sd.metric, pts)))


@dataclass
class SeamCurvatureReport:
    """Mean curvature of a doubled model sphere before and after smoothing."""

    delta: float
    min_H_raw: float
    min_H_smoothed: float
    mirror_defect: float
    positive: bool


def seam_mean_curvature_check(sd: SmoothedDouble, center=None, radius: float = 0.5,
                              samples: int = 24, seam_gap: float = 1e-9) -> SeamCurvatureReport:
    """Mean curvature of the sphere ``|x - center| = radius`` crossing the seam orthogonally.

    ``center`` must lie on the seam ``t = 0`` so the sphere is mirror
    symmetric.  Sample points are mirror pairs ``(y, +-t)`` on the sphere
    with ``|t| > seam_gap``; orientation is outward (``"increasing"``).
    """
    n = sd.metric.dim
    c = np.zeros(n) if center is None else np.asarray(center, float)
    if abs(c[-1]) > 0:
        raise MetricError("model sphere must be centred on the seam")
    # polar samples measured from the seam normal; azimuth in the first tangential plane
    heights = np.concatenate([np.geomspace(1e-6, 0.5, samples // 2), np.linspace(0.5, 1.0, samples // 2 + 2)[1:-1]])
    th = np.arccos(np.clip(heights, 0.0, 1.0))
    ph = np.linspace(0.0, 2 * math.pi, 8, endpoint=False)
    pts = []
    for a in th:
        for b in ph:
            v = np.zeros(n)
            v[-1] = math.cos(a)
            v[0] = math.sin(a) * math.cos(b)
            if n > 2:
                v[1] = math.sin(a) * math.sin(b)
            pts.append(v)
    up = c + radius * np.array(pts)
    up = up[np.abs(up[:, -1] - c[-1]) > seam_gap]
    down = up.copy()
    down[:, -1] = 2 * c[-1] - up[:, -1]
    level = sphere_level(n, c)
    both = np.concatenate([up, down])
    H_s = hypersurface_geometry(sd.metric, level, both, "increasing").H
    H_r = hypersurface_geometry(sd.raw, level, both, "increasing").H
    m = len(up)
    defect = float(np.max(np.abs(H_s[:m] - H_s[m:])))
    return SeamCurvatureReport(sd.delta, float(H_r.min()), float(H_s.min()), defect, bool(H_s.min() > 0))


def delta_sweep_csv(report: DerivativeBoundReport, mean_curvature: Optional[list] = None) -> str:
    """CSV with columns delta, sup-bound terms, min R on the strip and min H of the model sphere."""
    lines = ["delta,sup_difference_over_delta,sup_first_derivative,sup_delta_second_derivative,"
             "composite,min_R_strip,min_H_sphere"]
    mh = mean_curvature or [math.nan] * len(report.deltas)
    for row, h in zip(report.rows(), mh):
        lines.append(",".join(repr(float(v)) for v in row) + "," + repr(float(h)))
    return "\n".join(lines) + "\n"
