"""Acceptance run: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import math
import os
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
sys.path.insert(0, os.path.dirname(__file__))

from support import bump_tensor, shell_points  # noqa: E402

from halfspace_penrose import cli_report  # noqa: E402
from halfspace_penrose.doubling_glue import (  # noqa: E402
    MollifierSpec,
    assemble_smoothed_double,
    corner_family,
    model_family,
    seam_scalar_curvature_floor,
    verify_derivative_bounds,
)
from halfspace_penrose.elliptic_solver import (  # noqa: E402
    EllipticProblem,
    GridSpec,
    conformal_repair,
    make_curvature_bump,
    solve_grid,
    subharmonic_flux_test,
)
from halfspace_penrose.mass_quadrature import adm_mass, flux_integral, halfspace_mass, sphere_rule  # noqa: E402
from halfspace_penrose.metric_core import (  # noqa: E402
    BoundaryShapeModel,
    DomainSpec,
    Field,
    make_conformally_flat,
    make_flat,
    make_schwarzschild,
    make_schwarzschild_halfspace,
    perturbed_metric,
    pole_factor,
    unit_sphere_area,
)
from halfspace_penrose.penrose_verify import (  # noqa: E402
    find_horizon_axisymmetric,
    find_horizon_radial,
    horizon_area,
    penrose_ratio,
)
from halfspace_penrose.perturbations import find_witness, make_positive_bump, mass_decreasing_variation  # noqa: E402
from halfspace_penrose.tensor_calc import linearized_scalar_curvature, scalar_curvature  # noqa: E402

DELTAS = (0.1, 0.05, 0.025)


def criterion_1():
    rng = np.random.default_rng(11)
    worst_a = worst_f = 0.0
    for n in range(3, 8):
        for g in (make_schwarzschild(n, 2.0), make_schwarzschild_halfspace(n, 1.0)):
            x = shell_points(rng, n, 100, 1.2 * g.horizon_radius, 6.0 * g.horizon_radius, g.domain.is_half_space)
            worst_a = max(worst_a, float(np.abs(scalar_curvature(g, x)).max()))
            worst_f = max(worst_f, float(np.abs(scalar_curvature(g, x, order=4, analytic=False)).max()))
    ok = worst_a < 1e-10 and worst_f < 1e-6
    return ok, f"max|R| analytic {worst_a:.2e}, finite differences {worst_f:.2e}"


def criterion_2():
    closed = adm_mass(make_schwarzschild(3, 2.0)).extrapolated
    half = halfspace_mass(make_schwarzschild_halfspace(3, 1.0)).extrapolated
    flat_c = adm_mass(make_flat(3, DomainSpec("full-space-annulus", 1.0))).extrapolated
    flat_h = halfspace_mass(make_flat(3, DomainSpec("half-space-annulus", 1.0))).extrapolated
    ok = abs(closed - 2) <= 0.02 and abs(half - 1) <= 0.01 and abs(flat_c) < 1e-8 and abs(flat_h) < 1e-8
    return ok, f"closed {closed:.6f}, half-space {half:.6f}, flat {flat_c:.1e}/{flat_h:.1e}"


def criterion_3():
    g = make_schwarzschild_halfspace(3, 1.0)
    sd = assemble_smoothed_double(g, MollifierSpec(0.1))
    gd = make_conformally_flat(3, DomainSpec("full-space-annulus", g.horizon_radius), sd.factor)
    m = adm_mass(gd).extrapolated
    half_area = horizon_area(g.factor, 3, g.horizon_radius, "hemisphere")
    gc = make_schwarzschild(3, 2.0)
    closed_area = horizon_area(gc.factor, 3, gc.horizon_radius, "sphere")
    rule = sphere_rule(3, "sphere")
    r = g.horizon_radius
    quad_area = float(np.dot(rule.weights, sd.factor(r * rule.points) ** 4)) * r**2
    e_closed = abs(2 * half_area - closed_area) / closed_area
    e_quad = abs(quad_area - 64 * math.pi) / (64 * math.pi)
    ok = abs(m - 2) <= 0.04 and abs(half_area - 32 * math.pi) < 1e-8 * 32 * math.pi and e_closed < 1e-8 and e_quad < 0.01
    return ok, f"double mass {m:.5f}, area doubling error closed form {e_closed:.1e}, quadrature {e_quad:.1e}"


def criterion_4():
    worst = 0.0
    for n in range(3, 8):
        g = make_schwarzschild_halfspace(n, 1.0)
        h = find_horizon_radial(g.factor, n)
        worst = max(worst, abs(penrose_ratio(1.0, horizon_area(g.factor, n, h.radius), n).ratio - 1))
        gc = make_schwarzschild(n, 2.0)
        hc = find_horizon_radial(gc.factor, n)
        worst = max(worst, abs(penrose_ratio(2.0, horizon_area(gc.factor, n, hc.radius, "sphere"), n, "closed").ratio - 1))
    form = 0.0
    for m in (0.5, 1.0, 3.0):
        g = make_schwarzschild_halfspace(3, m)
        area = horizon_area(g.factor, 3, find_horizon_radial(g.factor, 3).radius)
        rhs = penrose_ratio(m, area, 3).rhs
        form = max(form, abs(rhs - math.sqrt(area / (32 * math.pi))))
    u = pole_factor(3, [1.0, 0.1, 0.1], [[0, 0, 0], [0, 0, 0.3], [0, 0, -0.3]])
    hz = find_horizon_axisymmetric(u, 3, 1.2)
    mp = halfspace_mass(make_conformally_flat(3, DomainSpec("half-space-annulus", 1.0), u)).extrapolated
    multi = penrose_ratio(mp, hz.area, 3).ratio
    ok = worst < 1e-6 and form < 1e-12 and multi > 1
    return ok, f"max|ratio-1| {worst:.1e}, n=3 form defect {form:.1e}, multi-pole ratio {multi:.5f}"


def criterion_5():
    corner = verify_derivative_bounds(corner_family(3, 0.5), DELTAS, with_curvature=False)
    exact = True
    floors = []
    for d in DELTAS:
        sd = assemble_smoothed_double(corner_family(3, 0.5), MollifierSpec(d))
        t = np.linspace(-0.5, 0.5, 2001)
        t = t[np.abs(t) >= d / 2]
        pts = np.stack([np.zeros_like(t), np.zeros_like(t), t], axis=-1)
        exact = exact and np.array_equal(sd.mollified(pts), sd.raw(pts))
    for h0 in (np.diag([1.0, -1.0]), np.diag([0.5, 0.5])):
        fam = model_family(BoundaryShapeModel(h0), 0.3)
        floors.append([seam_scalar_curvature_floor(assemble_smoothed_double(fam, MollifierSpec(d))) for d in DELTAS])
    uniform = all(min(f) >= f[0] - 0.1 * max(1.0, abs(f[0])) for f in floors)
    ok = corner.bounded and exact and uniform
    fl = "; ".join(",".join(f"{v:.3f}" for v in f) for f in floors)
    return ok, (f"composite spread {corner.ratio:.2f} (limit 3), bit-exact outside strip {exact}, "
                f"seam R floors {fl}")


def criterion_6():
    rows = []
    for eps in (1e-2, 1e-3, 1e-4):
        rep = conformal_repair(make_curvature_bump(3, 2.0, eps))
        rows.append((rep.negative_part_norm, abs(rep.mass_change), rep.min_R_after, abs(rep.normal_derivative)))
    norms = [r[0] for r in rows]
    drifts = [r[1] for r in rows]
    ok = (all(r[2] >= -1e-8 for r in rows) and all(r[3] < 1e-6 for r in rows)
          and all(a > b for a, b in zip(norms, norms[1:])) and all(a > b for a, b in zip(drifts, drifts[1:])))
    return ok, ("mass drift " + ", ".join(f"{d:.3e}" for d in drifts) + f"; min R after {min(r[2] for r in rows):.1e}"
                + f"; max |d_nu u| {max(r[3] for r in rows):.1e}")


def criterion_7():
    rng = np.random.default_rng(7)
    ratios = []
    for g in (make_flat(3, DomainSpec("full-space-annulus", 1.0)), make_schwarzschild(3, 2.0)):
        for _ in range(10):
            A = rng.normal(size=(3, 3))
            c = rng.normal(size=3)
            c *= rng.uniform(2.5, 3.5) / np.linalg.norm(c)
            sig = bump_tensor(3, c, 0.8, (A + A.T) / 2, int(rng.integers(3)))
            x = c + 0.3 * rng.normal(size=(5, 3))
            DR = linearized_scalar_curvature(g, sig, x)
            R0 = scalar_curvature(g, x)
            errs = [np.abs(DR - (scalar_curvature(perturbed_metric(g, sig, t), x) - R0) / t).max() for t in (1e-3, 5e-4)]
            ratios.append(errs[0] / errs[1])
    ok = all(1.7 <= r <= 2.3 for r in ratios)
    return ok, f"error ratios in [{min(ratios):.3f}, {max(ratios):.3f}] over {len(ratios)} tensors"


def criterion_8():
    tried = find_witness(BoundaryShapeModel(np.diag([1.0, -1.0])))
    delta, rep = tried[-1]
    ok = (rep.selected_K is not None and rep.dr_center > 0
          and max(abs(rep.mean_curvature_closed_form), abs(rep.mean_curvature_fd)) < 1e-8
          and max(abs(rep.area_closed_form), abs(rep.area_fd)) < 1e-10)
    if rep.selected_K is not None:
        i = rep.k_values.index(rep.selected_K)
        ok = ok and rep.min_dr[i] >= -1e-8 * rep.dr_scale
    return ok, (f"witness delta {delta:g}, K {rep.selected_K}, DR center {rep.dr_center:.3e}, "
                f"H linearization {abs(rep.mean_curvature_fd):.1e}, area {abs(rep.area_fd):.1e}")


def _mirror_exact(x):
    a = np.array([0.2, 0.0, 1.5])
    b = np.array([0.2, 0.0, -1.5])
    return 1.0 / np.linalg.norm(x - a, axis=-1) + 1.0 / np.linalg.norm(x - b, axis=-1)


def criterion_9():
    errs = []
    mp = True
    for N in (9, 17, 33):
        grid = GridSpec((-1.0, -1.0, 0.0), (1.0, 1.0, 1.0), N)
        sol = solve_grid(EllipticProblem(3, reduction="grid", dirichlet_data=_mirror_exact), grid)
        errs.append(float(np.abs(sol.values - _mirror_exact(grid.nodes())).max()))
        mp = mp and sol.maximum_principle_ok is True
    # nonnegative source: solution must stay above its boundary minimum
    grid = GridSpec((-1.0, -1.0, 0.0), (1.0, 1.0, 1.0), 17)
    src = solve_grid(EllipticProblem(3, reduction="grid", rhs=lambda x: 1.0 + 0 * x[..., 0],
                                     dirichlet_data=lambda x: 0.5 + 0 * x[..., 0]), grid)
    mp = mp and src.maximum_principle_ok is True
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    ok = 3.3 <= r1 <= 4.7 and 3.3 <= r2 <= 4.7 and mp
    return ok, f"error ratios {r1:.2f}, {r2:.2f}; maximum principle {mp}"


def criterion_10():
    worst = 0.0
    for n in range(3, 8):
        u = Field(n, lambda x: -np.linalg.norm(x, axis=-1) ** (2 - n))
        target = (n - 2) * unit_sphere_area(n) / 2
        worst = max(worst, abs(flux_integral(u, 40.0, "hemisphere") - target) / target)
    rep3 = subharmonic_flux_test(Field(3, lambda x: -np.linalg.norm(x, axis=-1) ** -1.0))
    var = mass_decreasing_variation(make_positive_bump(3, 1.0, 0.05))
    ok = worst < 1e-3 and abs(rep3.limit - 2 * math.pi) < 2e-3 * math.pi and var.mass_derivative < 0 \
        and abs(var.area_derivative) < 1e-8
    return ok, (f"flux error {worst:.1e}, n=3 limit {rep3.limit:.6f}; dm/dt {var.mass_derivative:.4f}, "
                f"area derivative {var.area_derivative:.1e}")


def criterion_11():
    outs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            cfg = cli_report.load_config(None, {"command": "pipeline", "out": os.path.join(tmp, f"run{k}"), "threads": 1})
            files, ok_run = cli_report.cmd_pipeline(cfg)
            outs.append([open(f, "rb").read() for f in files])
        row = open(files[0]).read().splitlines()
    vals = dict(zip(row[0].split(","), row[1].split(",")))
    md, ad = float(vals["mass_drift"]), float(vals["area_drift"])
    same = outs[0] == outs[1]
    ok = ok_run and md < 0.02 and ad < 0.02 and same
    return ok, f"mass drift {md:.2e}, area drift {ad:.2e}, byte-identical {same}"


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 12)}


def _line(k, ok, detail):
    return f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} | {detail}"


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, acceptance_log):
    ok, detail = CRITERIA[k]()
    line = _line(k, ok, detail)
    acceptance_log[k] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]()
        failed += not ok
        print(_line(k, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
