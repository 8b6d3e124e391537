from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from conftest import primitive_defect
from mbmoser.geometry import TorusGrid, rk4_points
from mbmoser.moser_local import (BumpProfile, GluedField, contraction_pullback,
                                 glue_and_flow, homotopy_primitive, local_moser_field,
                                 smoothstep, smoothstep_deriv)
from mbmoser.normal_form import build_chart
from mbmoser.pipeline import G_BUMP
from mbmoser.scenario import parse_component
from mbmoser.verify import map_summary


def chart(spec, dim, n, radius):
    return build_chart(parse_component(spec, dim), TorusGrid(dim, n), radius)


# -- contraction pullback ---------------------------------------------------------

def test_pullback_quadratic_law():
    c = chart("point:0.5,0.5", 2, 64, 0.2)
    pts = c.grid.points()
    f = np.sum(c.offset(pts) ** 2, axis=0).reshape(c.grid.shape)
    s = np.log(2)
    g = contraction_pullback(f, c, s)
    sel = (c.distance(pts) < c.radius).reshape(c.grid.shape)
    assert np.max(np.abs(g[sel] - f[sel] / 4)) <= 1e-9


def test_pullback_folded_law():
    c = chart("point1d:0", 1, 64, 0.2)
    pts = c.grid.points()
    f = c.offset(pts)[0]
    g = contraction_pullback(f, c, np.log(2))
    sel = c.distance(pts) < c.radius
    assert np.max(np.abs(g[sel] - f[sel] / 2)) <= 1e-9


def test_pullback_identity_and_euler_invariance():
    c = chart("point:0.5,0.5", 2, 64, 0.2)
    pts = c.grid.points()
    f = np.cos(2 * np.pi * pts[0]).reshape(c.grid.shape)
    assert np.max(np.abs(contraction_pullback(f, c, 0.0) - f)) <= 1e-13
    E = c.offset(pts).reshape((2,) + c.grid.shape)
    gE = contraction_pullback(E, c, 0.7, kind="vector")
    sel = (c.distance(pts) < c.radius).reshape(c.grid.shape)
    assert np.max(np.abs(gE[:, sel] - E[:, sel])) <= 1e-9


# -- homotopy primitive -----------------------------------------------------------

def _quadratic_1d(n=256, radius=0.2):
    c = chart("point1d:0", 1, n, radius)
    f = lambda p: c.offset(p)[0] ** 2
    phi = lambda p: 1 + c.offset(p)[0] ** 2
    return c, f, phi


def test_primitive_zero_for_unit_ratio():
    c, f, _ = _quadratic_1d()
    prim = homotopy_primitive(c, f, lambda p: np.ones(np.shape(p)[1:]))
    assert np.all(prim.nu == 0)
    c2 = chart("point:0.5,0.5", 2, 32, 0.2)
    prim2 = homotopy_primitive(c2, lambda p: np.ones(np.shape(p)[1:]),
                               lambda p: np.ones(np.shape(p)[1:]))
    assert np.all(prim2.nu == 0)
    # rounding-level ratios count as equal forms; real ones need a normal form
    near = lambda p: 1 + 1e-12 * np.cos(2 * np.pi * p[0])
    assert np.all(homotopy_primitive(c2, near, near).nu == 0)
    with pytest.raises(ValueError):
        homotopy_primitive(c2, near, lambda p: 1 + 1e-3 * np.cos(2 * np.pi * p[0]))


def test_primitive_closed_form_1d():
    c, f, phi = _quadratic_1d()
    prim = homotopy_primitive(c, f, phi)
    y = c.offset(c.grid.points()[:, prim.sel])[0]
    assert np.max(np.abs(prim.beta[0] + y ** 3 / 5)) <= 1e-8
    # vanishes on the zero set, and d(f beta) = -f (phi - 1)
    assert prim.nu[0][y == 0] == 0.0
    order = np.argsort(y)
    ys = y[order]
    fb = (ys ** 2 * prim.nu[0][order])
    assert np.max(np.abs(np.gradient(fb, ys)[2:-2] + ys[2:-2] ** 4)) <= 1e-4


def test_local_field_closed_form():
    c, f, phi = _quadratic_1d()
    prim = homotopy_primitive(c, f, phi)
    y = c.offset(c.grid.points())[0]
    sel = prim.sel
    X0 = local_moser_field(prim, 0.0).components[0].ravel()
    X1 = local_moser_field(prim, 1.0).components[0].ravel()
    assert np.max(np.abs(X0[sel] + y[sel] ** 3 / 5)) <= 1e-8
    assert np.max(np.abs(X1[sel] + y[sel] ** 3 / (5 * (1 + y[sel] ** 2)))) <= 1e-8
    assert np.all(X0[~sel] == 0)


def test_local_field_zero_primitive():
    c, f, _ = _quadratic_1d()
    prim = homotopy_primitive(c, f, lambda p: np.ones(np.shape(p)[1:]))
    assert np.all(local_moser_field(prim, 0.5).components[0] == 0)


def _ratio(sc):
    f0, f1 = sc.f0, sc.f1
    return lambda p: np.where(f0(p) != 0, f1(p) / np.where(f0(p) != 0, f0(p), 1.0), 1.0)


def test_primitive_identity_for_scenario_ratios(mb1d, fold1d, point2d):
    # the density ratio of each acceptance scenario, on the solver's charts
    for res in (mb1d, fold1d, point2d):
        sc = res.scenario
        for i, old in enumerate(res.extras["primitives"]):
            nf = res.F.evaluator.forms[i][0] if sc.dim == 2 else None
            prim = homotopy_primitive(old.chart, sc.f0, _ratio(sc), nf, 32)
            assert primitive_defect(prim, sc.f0, _ratio(sc)) <= 1e-6
            r = prim.chart.distance(sc.grid.points()[:, prim.sel])
            assert np.all(prim.nu[:, r == 0] == 0.0)


def _integrated_defect(prim, f, phi, every=4):
    """``max |f nu + int_0^y f (phi - 1) ds|`` over chart nodes along the fibre,
    by adaptive quadrature; no differencing of ``nu``."""
    c = prim.chart
    pts = c.grid.points()[:, prim.sel]
    base, y = c.inverse(pts)
    worst = 0.0
    for k in np.flatnonzero(c.distance(pts) < c.radius)[::every]:
        bk = None if base is None else base[..., k:k + 1]

        def g(s):
            p = c.forward(np.array([[s]]), bk)
            return float(f(p)[0] * (phi(p)[0] - 1.0))

        val, _ = quad(g, 0.0, y[0, k], limit=400, epsabs=1e-11, epsrel=1e-9)
        axis = c.normal_axes[0]
        worst = max(worst, abs(prim.f[k] * prim.nu[axis, k] + val))
    return worst


def test_primitive_identity_in_pipeline(mb1d, fold1d, point2d):
    # the intermediate ratio after F is a cubic spline with knots on the nodes,
    # so node differences of f nu lose their order; codimension-one charts are
    # checked in integrated form over the whole chart instead
    for res in (mb1d, fold1d):
        sc, ex = res.scenario, res.extras
        for prim in ex["primitives"]:
            assert _integrated_defect(prim, sc.f0, ex["phi"]) <= 1e-6
    # in 2D the discrete check holds on the inner half of the chart
    sc, ex = point2d.scenario, point2d.extras
    for prim in ex["primitives"]:
        assert primitive_defect(prim, sc.f0, ex["phi"], reach=0.5) <= 1e-6


def test_primitive_decays_linearly(point2d):
    prim = point2d.extras["primitives"][0]
    grid = point2d.scenario.grid
    r = prim.chart.distance(grid.points()[:, prim.sel])
    mag = np.sqrt(np.sum(prim.nu ** 2, axis=0))
    h = grid.spacing[0]
    small = (r > 0) & (r <= 4 * h)
    ratio = mag[small] / r[small]
    ring = (r > 4 * h) & (r < prim.chart.radius)
    # |beta| / r stays bounded as r -> 0
    assert np.max(ratio) <= 2 * np.max(mag[ring] / r[ring]) + 1e-12


# -- bump ---------------------------------------------------------------------------

def test_bump_profile():
    b = BumpProfile(0.1, 0.3)
    r = np.linspace(0, 0.5, 501)
    v = b(r)
    assert np.all((v >= 0) & (v <= 1))
    assert np.all(v[r <= 0.1] == 1) and np.all(v[r >= 0.3] == 0)
    assert np.all(np.diff(v) <= 0)
    with pytest.raises(ValueError):
        BumpProfile(0.3, 0.1)


@pytest.mark.parametrize("r_in, r_out", [(0.1, 0.3), (0.05, 0.1), (0.25, 1.0)])
def test_bump_flat_at_ends(r_in, r_out):
    b = BumpProfile(r_in, r_out)
    h = 1e-3 * (r_out - r_in)
    for r0 in (r_in, r_out):
        v = b(r0 + h * np.arange(-3, 4))
        d1 = (v[4] - v[2]) / (2 * h)
        d2 = (v[4] - 2 * v[3] + v[2]) / h ** 2
        d3 = (v[5] - 2 * v[4] + 2 * v[2] - v[1]) / (2 * h ** 3)
        assert max(abs(d1), abs(d2), abs(d3)) <= 1e-8
        assert b.deriv(np.array([r0]))[0] == 0.0
    assert smoothstep_deriv(np.array([0.0, 1.0])).tolist() == [0.0, 0.0]
    # arguments next to the ends stay finite
    tiny = np.array([1e-300, 1e-200, 1 - 1e-16])
    assert np.all(np.isfinite(smoothstep_deriv(tiny))) and np.all(np.isfinite(smoothstep(tiny)))


@given(st.floats(-1, 2))
def test_smoothstep_symmetry(t):
    assert abs(smoothstep(np.array([t]))[0] + smoothstep(np.array([1 - t]))[0] - 1) <= 1e-15


# -- glue and flow ---------------------------------------------------------------------

def test_flow_of_zero_field_is_identity():
    c, f, _ = _quadratic_1d(64)
    one = lambda p: np.ones(np.shape(p)[1:])
    prim = homotopy_primitive(c, f, one)
    G = glue_and_flow([prim], [BumpProfile(0.1, 0.2)], c.grid, 16, one)
    assert np.array_equal(G.targets, c.grid.nodes())


def test_G_fixes_zero_set_and_equalizes_core(mb1d, fold1d, point2d):
    for res in (mb1d, fold1d, point2d):
        sc = res.scenario
        grid = sc.grid
        pts = grid.points()
        on = sc.gamma.distance(pts, grid) < 1e-12
        assert np.array_equal(res.G.targets.reshape(grid.dim, -1)[:, on], pts[:, on])
        assert np.all(res.G.det > 0)
    entries, _ = map_summary(mb1d.scenario, mb1d.phi, {"F": mb1d.F.targets, "G": mb1d.G.targets})
    assert entries["stage_G.residual_core"] <= 1e-5


def test_stepwise_flow_matches_direct(mb1d):
    ex = mb1d.extras
    Y = GluedField(ex["primitives"], ex["bumps"], ex["phi"])
    p = mb1d.scenario.grid.points()
    direct = rk4_points(Y, p, 64)
    half = rk4_points(Y, p, 32, 0.0, 0.5)
    both = rk4_points(Y, half, 32, 0.5, 1.0)
    assert np.max(np.abs(both - direct)) <= 1e-14
    coarse = rk4_points(Y, p, 16)
    fine = rk4_points(Y, p, 32)
    # fourth order: halving the step cuts the error by about 16
    assert np.max(np.abs(coarse - direct)) > 8 * np.max(np.abs(fine - direct)) or \
        np.max(np.abs(coarse - direct)) <= 1e-13
    assert G_BUMP[0] < G_BUMP[1]
