"""Linear elliptic problems, conformal changes and decay diagnostics.

Problems have the form ``-c Lap_g v + q v = psi`` with ``c`` a positive
constant.  Three reductions are provided:

* radial: conformally flat metrics ``u(r)^(4/(n-2))`` with radial data, solved
  as a two-point boundary value problem on ``[r_inner, r_outer]``;
* box grids: second-order finite differences of the full ``Lap_g`` on a
  Cartesian box, Neumann data on the wall ``x_n = lower`` through ghost
  points and Dirichlet data on the other faces;
* axisymmetric: conformally flat metrics invariant under rotations fixing the
  ``x_n`` axis and under ``x_n -> -x_n``, discretised on a polar grid
  ``(log r, theta)`` with ``theta`` in ``(0, pi/2)``.

The far condition ``v -> v_inf`` is imposed at ``r_outer`` through the Robin
closure ``r v' + (n-2)(v - v_inf) = 0`` matching ``v - v_inf ~ A r^(2-n)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_bvp
from scipy.optimize import brentq
from scipy.interpolate import RectBivariateSpline

from .metric_core import (
    ConformalFactor,
    DomainSpec,
    Field,
    MetricError,
    MetricField,
    RadialProfile,
    check_dimension,
    conformal_metric,
    make_conformally_flat,
    radial_factor,
    unit_sphere_area,
)
from .mass_quadrature import flux_integral, extrapolate, sphere_rule
from .tensor_calc import hypersurface_geometry, laplace_beltrami, scalar_curvature

__all__ = [
    "SolverError",
    "conformal_constant",
    "EllipticProblem",
    "RadialSolution",
    "solve_radial",
    "GridSpec",
    "GridField",
    "solve_grid",
    "AxisymmetricSolution",
    "solve_axisymmetric",
    "ConformalReport",
    "conformal_apply",
    "radial_scalar_curvature",
    "RepairResult",
    "make_curvature_bump",
    "conformal_repair",
    "WeightedNormReport",
    "weighted_norm",
    "FluxReport",
    "subharmonic_flux_test",
    "log_barrier",
    "log_barrier_laplacian",
]


class SolverError(RuntimeError):
    """Raised when a linear problem is ill-posed or a solve does not converge."""


def conformal_constant(n: int) -> float:
    """``4(n-1)/(n-2)``, the constant in front of the Laplacian in the conformal operator."""
    return 4.0 * (n - 1) / (n - 2)


def _sparse_solve(M, rhs):
    """Direct solve with one step of iterative refinement and its normwise backward error."""
    lu = spla.splu(M.tocsc())
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("singular sparse system")
    x = x + lu.solve(rhs - M @ x)
    r = rhs - M @ x
    scale = spla.norm(M, np.inf) * np.abs(x).max() + np.abs(rhs).max()
    return x, float(np.abs(r).max() / max(scale, 1e-300))


def _as_callable(v):
    if callable(v):
        return v
    c = float(v)
    return lambda x: np.full(np.shape(x)[:-1] if np.ndim(x) > 1 else np.shape(x), c)


@dataclass
class EllipticProblem:
    """Data of ``-c Lap_g v + q v = psi``.

    For radial problems ``q``, ``psi`` take radii; otherwise they take points.
    ``factor`` selects the conformally flat metric ``factor^(4/(n-2))``
    (Euclidean when omitted) for the radial and axisymmetric reductions;
    ``metric`` is the general metric used by box grids.  The inner boundary
    carries Dirichlet (``inner_kind="dirichlet"``) or Neumann data; box grids
    use ``neumann_data`` on the wall and ``dirichlet_data`` elsewhere.
    """

    dim: int
    inner_radius: float = 1.0
    outer_radius: float = 100.0
    coefficient: float = 1.0
    zeroth_order: object = 0.0
    rhs: object = 0.0
    inner_kind: str = "dirichlet"
    inner_value: float = 0.0
    far_value: float = 0.0
    factor: Optional[Field] = None
    metric: Optional[MetricField] = None
    neumann_data: object = 0.0
    dirichlet_data: object = None
    require_nonnegative_q: bool = True
    reduction: str = "radial"

    def __post_init__(self):
        self.dim = check_dimension(self.dim)
        if self.inner_kind not in ("dirichlet", "neumann"):
            raise SolverError("inner boundary must be 'dirichlet' or 'neumann'")
        if self.reduction not in ("radial", "grid", "axisymmetric"):
            raise SolverError("reduction must be 'radial', 'grid' or 'axisymmetric'")
        if not self.coefficient > 0:
            raise SolverError("the Laplacian coefficient must be positive")
        if self.reduction != "grid" and not 0 < self.inner_radius < self.outer_radius:
            raise SolverError("need 0 < inner_radius < outer_radius")


# ---------------------------------------------------------------------------
# radial reduction


def _radial_profile_of(factor, n):
    if factor is None:
        return RadialProfile(lambda r: np.ones_like(r), lambda r: np.zeros_like(r), lambda r: np.zeros_like(r))
    prof = getattr(factor, "profile", None)
    centre = getattr(factor, "center", None)
    if prof is None or (centre is not None and np.any(centre != 0)):
        raise SolverError("radial reduction needs a factor centred at the origin with a radial profile")
    return prof


@dataclass
class RadialSolution:
    """Solution of a radial problem with its profile and far-field coefficient.

    Beyond ``outer_radius`` the solution continues as ``v_inf + A r^(2-n)``.
    """

    dim: int
    mesh: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    far_value: float
    far_coefficient: float
    max_residual: float
    inner_radius: float
    outer_radius: float
    _sol: object = field(repr=False, default=None)
    _rhs: object = field(repr=False, default=None)

    def _parts(self, r, order):
        r = np.asarray(r, float)
        n = self.dim
        inside = r <= self.outer_radius
        rc = np.clip(r, self.inner_radius, self.outer_radius)
        y = self._sol.sol(rc)
        if order == 0:
            tail = self.far_value + self.far_coefficient * r ** (2 - n)
            return np.where(inside, y[0], tail)
        if order == 1:
            tail = (2 - n) * self.far_coefficient * r ** (1 - n)
            return np.where(inside, y[1], tail)
        d = self._sol.sol(rc, 1)[1]
        tail = (2 - n) * (1 - n) * self.far_coefficient * r ** (-n)
        return np.where(inside, d, tail)

    def __call__(self, r):
        return self._parts(r, 0)

    def derivative(self, r, order: int = 1):
        return self._parts(r, order)

    @property
    def profile(self) -> RadialProfile:
        return RadialProfile(lambda r: self._parts(r, 0), lambda r: self._parts(r, 1), lambda r: self._parts(r, 2))

    def field(self) -> Field:
        """Radial field on R^n built from the solution (analytic chain-rule derivatives).

        Unlike a conformal factor the result may change sign.
        """
        rf = radial_factor(self.dim, self.profile)
        f = Field(self.dim, rf._value, rf._gradient, rf._hessian, name="radial-solution")
        f.profile = rf.profile
        return f


def _radial_drift(prof, n):
    def drift(r):
        u = prof.u(r)
        return (n - 1) / r + 2.0 * prof.du(r) / u
    return drift


def solve_radial(p: EllipticProblem, tol: float = 1e-10, mesh_points: int = 400,
                 max_nodes: int = 200_000, breakpoints=()) -> RadialSolution:
    """Two-point boundary value solve of a spherically symmetric problem.

    Uses a collocation solver on a geometric initial mesh; the inner boundary
    takes the Dirichlet or Neumann datum and the outer one the Robin closure.
    """
    n = p.dim
    prof = _radial_profile_of(p.factor, n)
    q = _as_callable(p.zeroth_order)
    psi = _as_callable(p.rhs)
    pw = 4.0 / (n - 2)
    drift = _radial_drift(prof, n)
    c = p.coefficient
    r0, r1 = p.inner_radius, p.outer_radius
    rs = np.geomspace(r0, r1, 2001)
    if p.require_nonnegative_q and np.any(q(rs) < 0):
        raise SolverError("zeroth-order coefficient must be nonnegative")

    def fun(r, y):
        v, dv = y
        return np.vstack([dv, -drift(r) * dv + prof.u(r) ** pw * (q(r) * v - psi(r)) / c])

    def bc(ya, yb):
        inner = ya[0] - p.inner_value if p.inner_kind == "dirichlet" else ya[1] - p.inner_value
        outer = r1 * yb[1] + (n - 2) * (yb[0] - p.far_value)
        return np.array([inner, outer])

    mesh = np.geomspace(r0, r1, mesh_points)
    for bp in breakpoints:
        if r0 < bp < r1:
            w = 1e-2 * bp
            mesh = np.concatenate([mesh, bp + w * np.linspace(-1, 1, 21) ** 3])
    mesh = np.unique(mesh)
    guess = np.vstack([np.full_like(mesh, p.far_value if p.inner_kind == "neumann" else p.inner_value),
                       np.zeros_like(mesh)])
    if p.inner_kind == "dirichlet":
        guess[0] = p.far_value + (p.inner_value - p.far_value) * (mesh / r0) ** (2 - n)
        guess[1] = (2 - n) * (p.inner_value - p.far_value) * mesh ** (1 - n) * r0 ** (n - 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solve_bvp(fun, bc, mesh, guess, tol=tol, max_nodes=max_nodes, bc_tol=1e-12)
    if not sol.success:
        raise SolverError(f"radial solve did not converge: {sol.message}")
    resid = float(np.max(sol.rms_residuals))
    A = (float(sol.y[0, -1]) - p.far_value) * r1 ** (n - 2)
    return RadialSolution(n, sol.x, sol.y[0], sol.y[1], p.far_value, A, resid, r0, r1, sol, fun)


# ---------------------------------------------------------------------------
# box grids


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid with ``points`` nodes per axis on ``[lower, upper]``."""

    lower: tuple
    upper: tuple
    points: int

    def axes(self):
        return [np.linspace(a, b, self.points) for a, b in zip(self.lower, self.upper)]

    @property
    def steps(self):
        return np.array([(b - a) / (self.points - 1) for a, b in zip(self.lower, self.upper)])

    def nodes(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)


@dataclass
class GridField:
    """Node values of a solution with solver diagnostics."""

    grid: GridSpec
    values: np.ndarray
    relative_residual: float
    minimum: float
    maximum_principle_ok: Optional[bool]

    def to_csv(self) -> str:
        pts = self.grid.nodes().reshape(-1, len(self.grid.lower))
        n = pts.shape[1]
        head = ",".join([f"x{i + 1}" for i in range(n)] + ["value"])
        rows = [",".join(repr(float(v)) for v in (*p, val)) for p, val in zip(pts, self.values.reshape(-1))]
        return head + "\n" + "\n".join(rows) + "\n"


def _operator_coefficients(metric: Optional[MetricField], pts, c, n):
    """Second- and first-order coefficients of ``-c Lap_g`` at nodes."""
    if metric is None:
        A = np.broadcast_to(np.eye(n), pts.shape[:-1] + (n, n))
        B = np.zeros(pts.shape)
        return -c * A, -c * B
    from .tensor_calc import christoffel
    gm = metric.unchecked()
    ginv = np.linalg.inv(gm(pts))
    gam = christoffel(gm, pts)
    B = -np.einsum("...ab,...lab->...l", ginv, gam)
    return -c * ginv, -c * B


def solve_grid(p: EllipticProblem, grid: GridSpec, check_maximum_principle: bool = True) -> GridField:
    """Finite-difference solve of ``-c Lap_g v + q v = psi`` on a box.

    The face ``x_n = lower_n`` is a Neumann wall with ``d v/d x_n = a``
    (coordinate derivative, ghost-point reflection); all other faces carry
    Dirichlet data (``dirichlet_data`` or the far value).  Mixed second
    derivatives use the four-corner stencil.
    """
    n = p.dim
    if len(grid.lower) != n:
        raise SolverError("grid dimension does not match the problem")
    N = grid.points
    h = grid.steps
    pts = grid.nodes()
    shape = pts.shape[:-1]
    q = _as_callable(p.zeroth_order)(pts)
    psi = _as_callable(p.rhs)(pts)
    a_wall = _as_callable(p.neumann_data)(pts)
    dir_data = _as_callable(p.far_value if p.dirichlet_data is None else p.dirichlet_data)(pts)
    if p.require_nonnegative_q and np.any(q < 0):
        raise SolverError("zeroth-order coefficient must be nonnegative")
    with np.errstate(all="ignore"):
        A2, B1 = _operator_coefficients(p.metric, pts, p.coefficient, n)
    if not (np.all(np.isfinite(A2)) and np.all(np.isfinite(B1)) and np.all(np.isfinite(q))):
        raise SolverError("operator coefficients are not finite on the grid")

    idx = np.indices(shape)
    dirichlet = np.zeros(shape, bool)
    for ax in range(n):
        dirichlet |= idx[ax] == N - 1
        if ax != n - 1:
            dirichlet |= idx[ax] == 0
    unknown = ~dirichlet
    number = -np.ones(shape, int)
    number[unknown] = np.arange(int(unknown.sum()))
    rows, cols, vals = [], [], []
    rhs = psi[unknown].astype(float).copy()
    uidx = [i[unknown] for i in idx]
    row_id = number[unknown]

    def add(offset, coef):
        tgt = [u + o for u, o in zip(uidx, offset)]
        coef = np.asarray(coef, float)
        extra = np.zeros_like(coef)
        # ghost nodes below the wall mirror to the first interior layer
        ghost = tgt[-1] < 0
        if np.any(ghost):
            depth = -tgt[-1][ghost]
            extra[ghost] = -coef[ghost] * 2.0 * depth * h[-1] * a_wall[tuple(
                np.clip(t[ghost], 0, N - 1) if k < n - 1 else np.zeros(ghost.sum(), int)
                for k, t in enumerate(tgt))]
            tgt[-1] = np.where(ghost, -tgt[-1], tgt[-1])
        tgt = tuple(tgt)
        tnum = number[tgt]
        is_dir = dirichlet[tgt]
        np.add.at(rhs, row_id[is_dir], -coef[is_dir] * dir_data[tgt][is_dir])
        np.add.at(rhs, row_id, -extra)
        rows.append(row_id[~is_dir])
        cols.append(tnum[~is_dir])
        vals.append(coef[~is_dir])

    A2u = A2[unknown]
    B1u = B1[unknown]
    center = q[unknown].astype(float).copy()
    for a in range(n):
        e = [0] * n
        e[a] = 1
        m = [-x for x in e]
        center += -2.0 * A2u[:, a, a] / h[a] ** 2
        add(e, A2u[:, a, a] / h[a] ** 2 + B1u[:, a] / (2 * h[a]))
        add(m, A2u[:, a, a] / h[a] ** 2 - B1u[:, a] / (2 * h[a]))
        for b in range(a + 1, n):
            cab = 2.0 * A2u[:, a, b] / (4 * h[a] * h[b])
            if not np.any(cab):
                continue
            for sa in (1, -1):
                for sb in (1, -1):
                    off = [0] * n
                    off[a] = sa
                    off[b] = sb
                    add(off, sa * sb * cab)
    rows.append(row_id)
    cols.append(row_id)
    vals.append(center)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(row_id), len(row_id)))
    try:
        sol, res = _sparse_solve(M, rhs)
    except (RuntimeError, SolverError) as exc:
        raise SolverError("singular grid system: constants lie in the kernel when no Dirichlet face "
                          "or positive zeroth-order term is present") from exc
    if res > 1e-10:
        raise SolverError(f"linear solve residual {res:.2e} above 1e-10")
    v = np.array(dir_data, float, copy=True)
    v[unknown] = sol
    mp = None
    if check_maximum_principle and np.all(psi >= 0) and np.all(q >= 0) and np.all(a_wall == 0) and np.all(dir_data >= 0):
        mp = bool(v.min() >= -1e-12 * max(1.0, np.abs(v).max()))
    return GridField(grid, v, res, float(v.min()), mp)


# ---------------------------------------------------------------------------
# axisymmetric polar grids


@dataclass
class AxisymmetricSolution:
    """Node values on the polar grid ``(r_i, theta_j)`` with ``theta`` from the ``x_n`` axis."""

    dim: int
    radii: np.ndarray
    angles: np.ndarray
    values: np.ndarray
    far_value: float
    far_coefficient: float
    relative_residual: float
    operator_values: np.ndarray = field(repr=False, default=None)

    def interpolator(self):
        return RectBivariateSpline(np.log(self.radii), self.angles, self.values, kx=3, ky=3)

    def at_points(self, x):
        """Evaluate at Cartesian points (using axial symmetry and the mirror symmetry)."""
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)
        th = np.arccos(np.clip(np.abs(x[..., -1]) / r, 0.0, 1.0))
        spline = self.interpolator()
        inside = r <= self.radii[-1]
        rr = np.clip(r, self.radii[0], self.radii[-1])
        val = spline.ev(np.log(rr), np.clip(th, self.angles[0], self.angles[-1]))
        tail = self.far_value + self.far_coefficient * r ** (2 - self.dim)
        return np.where(inside, val, tail)


def _polar_points(n, r, th):
    R, T = np.meshgrid(r, th, indexing="ij")
    pts = np.zeros(R.shape + (n,))
    pts[..., 0] = R * np.sin(T)
    pts[..., -1] = R * np.cos(T)
    return pts


def solve_axisymmetric(p: EllipticProblem, radial_points: int = 161, angular_points: int = 48) -> AxisymmetricSolution:
    """Conformally flat axisymmetric problem on ``r in [r_inner, r_outer]``, ``theta in (0, pi/2)``.

    ``Lap_g f = U^-p (Lap f + 2 grad U . grad f / U)`` for ``g = U^p`` times the
    Euclidean metric.  The grid is uniform in ``log r`` (vertex centred) and
    cell centred in ``theta``; the angular part uses the conservative form
    with weight ``sin^(n-2) theta`` so the axis needs no special treatment,
    and ``theta = pi/2`` is a symmetry (zero-flux) face.  ``q`` and ``psi`` are
    callables of Cartesian points.
    """
    n = p.dim
    c = p.coefficient
    r0, r1 = p.inner_radius, p.outer_radius
    Nr, Nt = radial_points, angular_points
    xi = np.linspace(0.0, math.log(r1 / r0), Nr)
    dxi = xi[1] - xi[0]
    r = r0 * np.exp(xi)
    dth = 0.5 * math.pi / Nt
    th = (np.arange(Nt) + 0.5) * dth
    pts = _polar_points(n, r, th)
    q = _as_callable(p.zeroth_order)(pts)
    psi = _as_callable(p.rhs)(pts)
    if p.require_nonnegative_q and np.any(q < 0):
        raise SolverError("zeroth-order coefficient must be nonnegative")
    pw = 4.0 / (n - 2)
    if p.factor is None:
        U = np.ones(pts.shape[:-1])
        gU = np.zeros(pts.shape)
    else:
        U = p.factor(pts)
        gU = p.factor.gradient(pts)
    # polar components of grad U
    er = pts / r[:, None, None]
    et = np.zeros_like(pts)
    et[..., 0] = np.cos(th)[None, :]
    et[..., -1] = -np.sin(th)[None, :]
    Ur = np.einsum("...i,...i->...", gU, er)
    Ut_over_r = np.einsum("...i,...i->...", gU, et)  # (1/r) dU/dtheta
    Rm = r[:, None]
    # operator  -c [ (f_xixi + (n-2) f_xi)/r^2 + angular/r^2 + 2/U (Ur f_xi / r + Ut_over_r f_theta / r) ] + U^p q f
    s_face = np.sin(np.concatenate([th - 0.5 * dth, [th[-1] + 0.5 * dth]])) ** (n - 2)
    s_face[0] = 0.0 if n > 2 else s_face[0]
    s_face[-1] = 0.0  # symmetry face
    s_cell = np.sin(th) ** (n - 2)
    N = Nr * Nt
    num = np.arange(N).reshape(Nr, Nt)
    rows, cols, vals = [], [], []
    rhs = (U**pw * psi).reshape(-1).copy()
    diag = (U**pw * q).reshape(-1).copy()

    def put(i_idx, j_idx, coef, di, dj):
        ii = i_idx + di
        jj = j_idx + dj
        rows.append(num[i_idx, j_idx].reshape(-1))
        cols.append(num[ii, jj].reshape(-1))
        vals.append(coef.reshape(-1))

    I, J = np.meshgrid(np.arange(Nr), np.arange(Nt), indexing="ij")
    inv_r2 = 1.0 / Rm**2
    # radial second-order part with drift
    a_xx = -c * inv_r2 / dxi**2 * np.ones_like(U)
    b_x = -c * (inv_r2 * (n - 2) + 2.0 * Ur / (U * Rm)) / (2 * dxi)
    # angular part
    a_tp = -c * inv_r2 * (s_face[1:][None, :] / s_cell[None, :]) / dth**2
    a_tm = -c * inv_r2 * (s_face[:-1][None, :] / s_cell[None, :]) / dth**2
    b_t = -c * 2.0 * Ut_over_r / (U * Rm) / (2 * dth)
    up_t = a_tp + b_t
    dn_t = a_tm - b_t
    diag += (-2 * a_xx - a_tp - a_tm).reshape(-1)
    # theta neighbours; the outer faces have zero weight, but the drift term
    # needs a reflected neighbour (f symmetric about the axis and the equator)
    jp = np.minimum(J + 1, Nt - 1)
    jm = np.maximum(J - 1, 0)
    rows.append(num.reshape(-1)); cols.append(num[I, jp].reshape(-1)); vals.append(up_t.reshape(-1))
    rows.append(num.reshape(-1)); cols.append(num[I, jm].reshape(-1)); vals.append(dn_t.reshape(-1))
    # radial neighbours with ghost handling
    plus = a_xx + b_x
    minus = a_xx - b_x
    inner = I == 0
    outer = I == Nr - 1
    # interior links
    rows.append(num[~outer]); cols.append(num[np.minimum(I + 1, Nr - 1), J][~outer]); vals.append(plus[~outer])
    rows.append(num[~inner]); cols.append(num[np.maximum(I - 1, 0), J][~inner]); vals.append(minus[~inner])
    # inner face: Neumann datum d v/d r = g_in  -> ghost f_{-1} = f_1 - 2 dxi r0 g_in
    gin = p.inner_value if p.inner_kind == "neumann" else None
    if p.inner_kind == "neumann":
        rows.append(num[inner]); cols.append(num[1, J[0]]); vals.append(minus[inner])
        rhs[num[inner]] += minus[inner] * 2 * dxi * r0 * gin
    else:
        # Dirichlet: replace rows later
        pass
    # outer face Robin: f_xi = -(n-2)(f - f_inf) -> ghost f_{N} = f_{N-2} - 2 dxi (n-2)(f_{N-1} - f_inf)
    rows.append(num[outer]); cols.append(num[Nr - 2, J[-1]]); vals.append(plus[outer])
    diag[num[outer]] += plus[outer] * (-2 * dxi * (n - 2))
    rhs[num[outer]] -= plus[outer] * (2 * dxi * (n - 2) * p.far_value)
    rows.append(num.reshape(-1)); cols.append(num.reshape(-1)); vals.append(diag)
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    if p.inner_kind == "dirichlet":
        M = M.tolil()
        inner_vals = _as_callable(p.inner_value)(pts[0]) if callable(p.inner_value) else np.full(Nt, p.inner_value)
        for k, val in zip(num[0], inner_vals):
            M.rows[k] = [k]
            M.data[k] = [1.0]
            rhs[k] = val
        M = M.tocsr()
    try:
        sol, res = _sparse_solve(M, rhs)
    except RuntimeError as exc:
        raise SolverError("singular axisymmetric system") from exc
    if res > 1e-10:
        raise SolverError(f"linear solve residual {res:.2e} above 1e-10")
    vals2 = sol.reshape(Nr, Nt)
    w = s_cell * np.sin(0.5 * dth) if n == 2 else s_cell
    A = float(np.sum(w * (vals2[-1] - p.far_value)) / np.sum(w)) * r1 ** (n - 2)
    return AxisymmetricSolution(n, r, th, vals2, p.far_value, A, res)


# ---------------------------------------------------------------------------
# conformal changes


@dataclass
class ConformalReport:
    """Scalar and mean curvature of ``u^p g`` by formula and by direct evaluation."""

    metric: MetricField
    R_formula: np.ndarray
    R_direct: np.ndarray
    R_discrepancy: float
    H_formula: Optional[np.ndarray] = None
    H_direct: Optional[np.ndarray] = None
    H_discrepancy: float = 0.0


def conformal_apply(g: MetricField, u: Field, points, level: Optional[Field] = None, surface_points=None,
                    orientation: str = "increasing", order: int = 2) -> ConformalReport:
    """Conformal metric ``u^(4/(n-2)) g`` with curvature checks.

    ``R(g^u) = u^-((n+2)/(n-2)) (-c Lap_g u + R(g) u)`` and, for the level set
    of ``level`` through ``surface_points`` with the given orientation,
    ``H(g^u) = u^-(n/(n-2)) (2(n-1)/(n-2) d_nu u + H(g) u)`` are compared
    with direct evaluation on the new metric.
    """
    n = g.dim
    points = np.asarray(points, float)
    uv = u(points)
    if np.any(uv <= 0):
        raise MetricError("conformal factor must be positive")
    gu = conformal_metric(g, u, name="conformal")
    c = conformal_constant(n)
    R0 = scalar_curvature(g, points, order=order)
    lap = laplace_beltrami(g, u, points, order=order)
    Rf = uv ** (-(n + 2) / (n - 2)) * (-c * lap + R0 * uv)
    Rd = scalar_curvature(gu, points, order=order)
    rep = ConformalReport(gu, Rf, Rd, float(np.max(np.abs(Rf - Rd))))
    if level is not None and surface_points is not None:
        sp_ = np.asarray(surface_points, float)
        fr = hypersurface_geometry(g, level, sp_, orientation, order=order)
        du = u.gradient(sp_)
        dnu = np.einsum("...a,...a->...", du, fr.normal)
        us = u(sp_)
        Hf = us ** (-n / (n - 2)) * (2 * (n - 1) / (n - 2) * dnu + fr.H * us)
        Hd = hypersurface_geometry(gu, level, sp_, orientation, order=order).H
        rep.H_formula, rep.H_direct = Hf, Hd
        rep.H_discrepancy = float(np.max(np.abs(Hf - Hd)))
    return rep


def radial_scalar_curvature(dim: int, profile: RadialProfile):
    """``R(r)`` of ``u(r)^(4/(n-2))`` times the Euclidean metric."""
    n = dim
    c = conformal_constant(n)

    def R(r):
        r = np.asarray(r, float)
        u = profile.u(r)
        return -c * u ** (-(n + 2) / (n - 2)) * (profile.d2u(r) + (n - 1) * profile.du(r) / r)

    return R


def make_curvature_bump(dim: int, mass_tilde: float, amplitude: float, support=(2.0, 3.0),
                        outer_radius: float = math.inf) -> MetricField:
    """Schwarzschild factor plus ``amplitude * ((r-a)(b-r))^4`` on ``a < r < b``.

    The added bump is subharmonic near the ends of its support, so the
    scalar curvature picks up a negative part there of size ``~amplitude``.
    The horizon sphere of the unperturbed factor stays minimal when ``a`` lies
    outside it.
    """
    n = check_dimension(dim)
    a, b = map(float, support)
    r_h = (mass_tilde / 2.0) ** (1.0 / (n - 2))
    if not r_h < a < b:
        raise SolverError("bump support must lie outside the horizon")
    base = np.polynomial.Polynomial([-a * b, a + b, -1.0]) ** 4
    scale = ((b - a) / 2.0) ** 8
    poly = [base / scale, base.deriv() / scale, base.deriv(2) / scale]
    m2 = mass_tilde / 2.0

    def part(k):
        def f(r):
            r = np.asarray(r, float)
            inside = (r > a) & (r < b)
            bump = np.where(inside, poly[k](r), 0.0)
            harm = [m2 * r ** (2 - n), (2 - n) * m2 * r ** (1 - n), (2 - n) * (1 - n) * m2 * r ** (-n)][k]
            return (1.0 if k == 0 else 0.0) + harm + amplitude * bump
        return f

    prof = RadialProfile(part(0), part(1), part(2))
    dom = DomainSpec("full-space-annulus", r_h, outer_radius)
    g = make_conformally_flat(n, dom, radial_factor(n, prof), name="curvature-bump", decay_rate=float(n - 2))
    g.mass = float(mass_tilde)
    g.horizon_radius = r_h
    return g


@dataclass
class RepairResult:
    """Outcome of the conformal repair ``g -> u_rep^(4/(n-2)) g``."""

    repaired: MetricField
    solution: object
    min_R_before: float
    min_R_after: float
    negative_part_norm: float
    mass_change: float
    normal_derivative: float
    min_factor: float
    max_factor: float
    argmax_radius: float


def conformal_repair(g: MetricField, inner_radius: Optional[float] = None, outer_radius: float = 200.0,
                     reduction: str = "radial", samples: int = 4000, half_space: bool = False,
                     **grid_kw) -> RepairResult:
    """Remove negative scalar curvature by ``-c Lap_g u - max(-R, 0) u = 0``.

    ``u`` has zero normal derivative on the inner sphere (the horizon) and
    tends to 1 at infinity.  Since ``max(-R, 0) >= 0`` the solution is
    superharmonic, hence ``u >= 1``, and ``R(u^p g) = u^-p max(R, 0) >= 0``.
    ``reduction="radial"`` needs ``g = u0(r)^p`` times the Euclidean metric;
    ``"axisymmetric"`` needs a conformally flat ``g`` with an attached
    ``factor`` invariant under the axial and mirror symmetries.  The mass
    change is ``2 A`` for the closed mass (``A`` for ``half_space=True``)
    where ``u ~ 1 + A r^(2-n)``.
    """
    n = g.dim
    c = conformal_constant(n)
    u0 = getattr(g, "factor", None)
    r_in = inner_radius if inner_radius is not None else g.domain.inner_radius
    pw = 4.0 / (n - 2)
    if reduction == "radial":
        prof = _radial_profile_of(u0, n)
        Rfun = radial_scalar_curvature(n, prof)
        rs = np.geomspace(r_in, outer_radius, samples)
        Rb = Rfun(rs)
        floor = 1e-12 * max(1.0, float(np.abs(Rb).max()))

        def neg(r):
            v = -Rfun(r)
            return np.where(v > floor, v, 0.0)

        rfine = np.geomspace(r_in, outer_radius, 20 * samples)
        active = neg(rfine) > 0
        flips = np.nonzero(np.diff(active))[0]
        kinks = [brentq(lambda r: -Rfun(r) - floor, rfine[i], rfine[i + 1],
                        xtol=1e-15, rtol=4 * np.finfo(float).eps) for i in flips]
        prob = EllipticProblem(n, r_in, outer_radius, coefficient=c, zeroth_order=lambda r: -neg(r),
                               inner_kind="neumann", inner_value=0.0, far_value=1.0,
                               factor=u0, require_nonnegative_q=False)
        if not np.any(neg(rs) > 0):
            sol = None
            ut = lambda r: np.ones_like(r)
            A = 0.0
            dnu = 0.0
            umin = umax = 1.0
            rmax = r_in
            repaired = g
            Rafter = Rb
        else:
            sol = solve_radial(prob, breakpoints=kinks)
            if np.any(sol(rs) <= 0):
                raise SolverError("repair factor lost positivity: negative scalar curvature too large")
            A = sol.far_coefficient
            dnu = float(sol.derivative(np.array([r_in]))[0])
            vals = sol(rs)
            umin, umax = float(vals.min()), float(vals.max())
            rmax = float(rs[np.argmax(vals)])
            uprof = prof
            sp_ = sol.profile
            combined = RadialProfile(
                lambda r: uprof.u(r) * sp_.u(r),
                lambda r: uprof.du(r) * sp_.u(r) + uprof.u(r) * sp_.du(r),
                lambda r: uprof.d2u(r) * sp_.u(r) + 2 * uprof.du(r) * sp_.du(r) + uprof.u(r) * sp_.d2u(r))
            dom = g.domain
            repaired = make_conformally_flat(n, dom, radial_factor(n, combined), name="repaired",
                                             decay_rate=g.decay_rate)
            Rafter = radial_scalar_curvature(n, combined)(rs)
        # L^{n/2} norm of the negative part with respect to g
        vol = unit_sphere_area(n) * rs ** (n - 1) * prof.u(rs) ** (2 * n / (n - 2))
        integrand = np.maximum(-Rb, 0.0) ** (n / 2) * vol
        norm = float(np.trapezoid(integrand, rs)) ** (2.0 / n)
        mass_change = (1.0 if half_space else 2.0) * A
        return RepairResult(repaired, sol, float(Rb.min()), float(Rafter.min()), norm, mass_change,
                            dnu, umin, umax, rmax)
    if reduction == "axisymmetric":
        if u0 is None:
            raise SolverError("axisymmetric repair needs a conformally flat metric with a factor")
        Rfield = _conformally_flat_R(n, u0)
        prob = EllipticProblem(n, r_in, outer_radius, coefficient=c,
                               zeroth_order=lambda x: -np.maximum(-Rfield(x), 0.0),
                               inner_kind="neumann", inner_value=0.0, far_value=1.0, factor=u0,
                               require_nonnegative_q=False, reduction="axisymmetric")
        sol = solve_axisymmetric(prob, **grid_kw)
        if np.any(sol.values <= 0):
            raise SolverError("repair factor lost positivity: negative scalar curvature too large")
        pts = _polar_points(n, sol.radii, sol.angles)
        Rb = Rfield(pts)
        # discrete residual form of R after the change: u^-p (R_+ u + residual) / u
        Ua = u0(pts)
        lap_res = _axisymmetric_residual(prob, sol)
        Rafter = sol.values ** (-(n + 2) / (n - 2)) * (np.maximum(Rb, 0.0) * sol.values + lap_res / Ua**pw)
        rr = sol.radii
        dnu = float(np.max(np.abs(sol.values[1] - sol.values[0]) / (rr[1] - rr[0])))
        vol_w = np.sin(sol.angles) ** (n - 2)
        neg = np.maximum(-Rb, 0.0) ** (n / 2) * Ua ** (2 * n / (n - 2))
        dth = sol.angles[1] - sol.angles[0]
        shell = 2.0 * unit_sphere_area(n - 1) * np.sum(neg * vol_w[None, :], axis=1) * dth
        norm = float(np.trapezoid(shell * rr ** (n - 1), rr)) ** (2.0 / n)
        repaired = make_conformally_flat(n, g.domain, Field(n, lambda x: u0(x) * sol.at_points(x)),
                                         name="repaired")
        i, j = np.unravel_index(np.argmax(sol.values), sol.values.shape)
        return RepairResult(repaired, sol, float(Rb.min()), float(Rafter.min()), norm,
                            (1.0 if half_space else 2.0) * sol.far_coefficient, dnu,
                            float(sol.values.min()), float(sol.values.max()), float(rr[i]))
    raise SolverError("reduction must be 'radial' or 'axisymmetric'")


def _conformally_flat_R(n, u: Field):
    c = conformal_constant(n)

    def R(x):
        lap = np.trace(u.hessian(x), axis1=-2, axis2=-1)
        return -c * u(x) ** (-(n + 2) / (n - 2)) * lap

    return R


def _axisymmetric_residual(p: EllipticProblem, sol: AxisymmetricSolution):
    """Pointwise residual of the discrete equation (scaled back by ``U^p``)."""
    n = p.dim
    c = p.coefficient
    r, th, f = sol.radii, sol.angles, sol.values
    pts = _polar_points(n, r, th)
    U = p.factor(pts)
    gU = p.factor.gradient(pts)
    xi = np.log(r / r[0])
    dxi = xi[1] - xi[0]
    dth = th[1] - th[0]
    fg = np.empty((len(r) + 2, len(th) + 2))
    fg[1:-1, 1:-1] = f
    fg[0, 1:-1] = f[1]
    fg[-1, 1:-1] = f[-2] - 2 * dxi * (n - 2) * (f[-1] - p.far_value)
    fg[:, 0] = fg[:, 1]
    fg[:, -1] = fg[:, -2]
    f_xi = (fg[2:, 1:-1] - fg[:-2, 1:-1]) / (2 * dxi)
    f_xixi = (fg[2:, 1:-1] - 2 * f + fg[:-2, 1:-1]) / dxi**2
    sf = np.sin(np.concatenate([th - 0.5 * dth, [th[-1] + 0.5 * dth]])) ** (n - 2)
    sf[0] = 0.0
    sf[-1] = 0.0
    sc = np.sin(th) ** (n - 2)
    ang = (sf[1:] * (fg[1:-1, 2:] - f) - sf[:-1] * (f - fg[1:-1, :-2])) / (sc * dth**2)
    f_th = (fg[1:-1, 2:] - fg[1:-1, :-2]) / (2 * dth)
    er = pts / r[:, None, None]
    et = np.zeros_like(pts)
    et[..., 0] = np.cos(th)[None, :]
    et[..., -1] = -np.sin(th)[None, :]
    Ur = np.einsum("...i,...i->...", gU, er)
    Ut = np.einsum("...i,...i->...", gU, et)
    R2 = r[:, None] ** 2
    lap0 = (f_xixi + (n - 2) * f_xi + ang) / R2
    drift = 2.0 / U * (Ur * f_xi / r[:, None] + Ut * f_th / r[:, None])
    q = _as_callable(p.zeroth_order)(pts)
    psi = _as_callable(p.rhs)(pts)
    pw = 4.0 / (n - 2)
    return -c * (lap0 + drift) + U**pw * (q * f - psi)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class WeightedNormReport:
    """Per-term suprema of the weighted norm estimator."""

    decay: float
    order: int
    terms: dict
    locations: dict
    shell_growth: dict
    divergent: bool

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


def weighted_norm(v: Field, tau: float, k: int = 2, inner_radius: float = 2.0, outer_radius: float = 200.0,
                  shells: int = 16, alpha: float = 0.5, half_space: bool = True, nodes: int = 8) -> WeightedNormReport:
    """Sampled estimator of ``sum_j sup |x|^(j+tau) |D^j v|`` plus a Holder term.

    Samples are the nodes of the (hemi)sphere rule on ``shells`` geometric
    radii.  The Holder quotient of ``D^k v`` is evaluated on the fixed pairs
    ``(x, x + |x|/4 e_i)`` over the coordinate directions tangent to the wall.
    A term whose supremum on the outermost shell exceeds four times its value
    on the innermost one is flagged as divergent.
    """
    n = v.dim
    rule = sphere_rule(n, "hemisphere" if half_space else "sphere", nodes)
    radii = np.geomspace(inner_radius, outer_radius, shells)
    terms, locs, growth = {}, {}, {}
    per_shell = {}

    def jet(x, j):
        if j == 0:
            return np.abs(v(x))
        if j == 1:
            return np.linalg.norm(v.gradient(x), axis=-1)
        return np.sqrt(np.sum(v.hessian(x) ** 2, axis=(-2, -1)))

    def dk(x):
        return v(x) if k == 0 else (v.gradient(x) if k == 1 else v.hessian(x))

    for j in range(k + 1):
        vals = []
        for r in radii:
            x = r * rule.points
            vals.append(np.max(r ** (j + tau) * jet(x, j)))
        per_shell[f"D{j}"] = np.array(vals)
    hol = []
    for r in radii:
        x = r * rule.points
        best = 0.0
        for i in range(n - 1):
            e = np.zeros(n)
            e[i] = 0.25 * r
            diff = dk(x + e) - dk(x)
            nrm = np.sqrt(np.sum(diff.reshape(len(x), -1) ** 2, axis=1))
            best = max(best, float(np.max(r ** (k + tau + alpha) * (0.25 * r) ** (-alpha) * nrm)))
        hol.append(best)
    per_shell["holder"] = np.array(hol)
    divergent = False
    for key, arr in per_shell.items():
        terms[key] = float(arr.max())
        locs[key] = float(radii[int(np.argmax(arr))])
        g = float(arr[-1] / arr[0]) if arr[0] > 0 else (math.inf if arr[-1] > 0 else 1.0)
        growth[key] = g
        divergent |= g > 4.0
    return WeightedNormReport(tau, k, terms, locs, growth, bool(divergent))


@dataclass
class FluxReport:
    """Flux sweep ``lam^-1 int x.grad u`` and the reported hypotheses."""

    lambdas: list
    fluxes: list
    limit: float
    positive_trend: bool
    negative_sampled: bool
    subharmonic_sampled: bool
    neumann_sampled: bool


def subharmonic_flux_test(u: Field, g: Optional[MetricField] = None, lambdas=(20.0, 40.0, 80.0),
                          surface: str = "hemisphere", nodes: Optional[int] = None) -> FluxReport:
    """Flux of ``u`` through growing hemispheres and its limit trend.

    Hypotheses (``u < 0``, ``Lap_g u >= 0`` outside ``|x| >= lambdas[0]/2`` and
    ``d u/d x_n = 0`` on the wall) are sampled and reported, not enforced.
    """
    n = u.dim
    lams = [float(l) for l in lambdas]
    flux = [flux_integral(u, lam, surface, nodes) for lam in lams]
    try:
        lim, _, _ = extrapolate(lams, flux, max_rel_residual=1e-2)
    except Exception:
        lim = flux[-1]
    rule = sphere_rule(n, "hemisphere", 8)
    x = np.concatenate([r * rule.points for r in np.geomspace(lams[0] / 2, lams[-1], 6)])
    neg = bool(np.all(u(x) < 0))
    hess = u.hessian(x, order=4)
    if g is None:
        lap = np.trace(hess, axis1=-2, axis2=-1)
    else:
        lap = laplace_beltrami(g, u, x, order=4)
    # finite-difference Hessians leave relative noise of order 1e-6
    scale = np.sqrt(np.sum(hess**2, axis=(-2, -1)))
    sub = bool(np.all(lap >= -1e-5 * scale))
    wall = x.copy()
    wall[:, -1] = 0.0
    wall = wall[np.linalg.norm(wall, axis=-1) > 0]
    dn = u.gradient(wall)[:, -1]
    neu = bool(np.all(np.abs(dn) <= 1e-10 * np.maximum(1.0, np.abs(u.gradient(wall)).max())))
    trend = bool(all(f > 0 for f in flux) and lim > 0)
    return FluxReport(lams, flux, float(lim), trend, neg, sub, neu)


def log_barrier(dim: int) -> Field:
    """Comparison function ``-|x|^(2-n) / log|x|`` on ``|x| > 1``."""
    n = check_dimension(dim)

    def parts(x):
        r = np.linalg.norm(x, axis=-1)
        L = np.log(r)
        return r, L

    def value(x):
        r, L = parts(x)
        return -(r ** (2 - n)) / L

    def d1(r, L):
        return -((2 - n) * r ** (1 - n) / L - r ** (1 - n) / L**2)

    def d2(r, L):
        a = (2 - n) * (1 - n) * r ** (-n) / L - (2 - n) * r ** (-n) / L**2
        b = (1 - n) * r ** (-n) / L**2 - 2 * r ** (-n) / L**3
        return -(a - b)

    def grad(x):
        r, L = parts(x)
        return (d1(r, L) / r)[..., None] * x

    def hess(x):
        r, L = parts(x)
        e = x / r[..., None]
        ee = e[..., :, None] * e[..., None, :]
        return d2(r, L)[..., None, None] * ee + (d1(r, L) / r)[..., None, None] * (np.eye(n) - ee)

    return Field(n, value, grad, hess, name="log-barrier")


def log_barrier_laplacian(dim: int, r):
    """Closed form ``-r^-n (log r)^-3 ((n-2) log r + 2)`` of the barrier's Laplacian."""
    r = np.asarray(r, float)
    L = np.log(r)
    return -(r ** (-dim)) * L ** (-3) * ((dim - 2) * L + 2)
