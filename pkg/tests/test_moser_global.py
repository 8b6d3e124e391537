from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbmoser.errors import InterpolationDegenerate, NotSolvable
from mbmoser.geometry import (GridField, TorusGrid, TransportMap, det_of, evaluator_jacobian,
                              integrate, spectral_partial)
from mbmoser.moser_global import (GlobalPrimitive, RelativePrimitive, _Theta, check_interpolation,
                                  compose_pipeline, global_moser_field, global_primitive,
                                  global_step, kill_periods, normalize_per_component,
                                  pinned_antiderivative,
                                  relative_correction)
from mbmoser.normal_form import build_chart
from mbmoser.pipeline import CORE
from mbmoser.scenario import CriticalSet, label_components, parse_component

TWO_PI = 2 * np.pi


def chart(spec, grid, radius=0.2):
    return build_chart(parse_component(spec, grid.dim), grid, radius)


# -- primitive -----------------------------------------------------------------------

def test_zero_density_zero_primitive():
    for dim in (1, 2):
        g = TorusGrid(dim, 32)
        om = global_primitive(GridField(g, np.zeros(g.shape)), [0.0] if dim == 1 else ())
        assert all(np.all(c == 0) for c in om.coeffs)


def test_primitive_1d_closed_form():
    g = TorusGrid(1, 128)
    x = g.points()[0]
    # sixth-order cell rule: about 7e-12 at this resolution
    om = global_primitive(GridField(g, np.cos(TWO_PI * x)), [0.0])
    assert np.max(np.abs(om.coeffs[0] - np.sin(TWO_PI * x) / TWO_PI)) <= 1e-10
    # pinned at a zero-set point other than 0
    om = global_primitive(GridField(g, np.cos(TWO_PI * x)), [0.25])
    assert np.max(np.abs(om.coeffs[0] - (np.sin(TWO_PI * x) - 1) / TWO_PI)) <= 1e-10
    # without a zero set the primitive is spectral with zero mean
    om = global_primitive(GridField(g, np.cos(TWO_PI * x)))
    assert np.max(np.abs(om.coeffs[0] - np.sin(TWO_PI * x) / TWO_PI)) <= 1e-13


def _pinned_error(n, pins):
    g = TorusGrid(1, n)
    x = g.nodes()[0]
    w = pinned_antiderivative(np.cos(TWO_PI * x), g, pins)
    a = np.sort(pins)
    j = np.searchsorted(a, x + 1e-15, side="right") - 1
    return np.max(np.abs(w - (np.sin(TWO_PI * x) - np.sin(TWO_PI * a[j])) / TWO_PI))


@pytest.mark.parametrize("pins", [[0.0], [0.25], [0.0, 0.5], [0.13]])
def test_pinned_antiderivative_sixth_order(pins):
    coarse, fine = _pinned_error(64, pins), _pinned_error(128, pins)
    assert fine <= 1e-10
    assert coarse / fine >= 48


def test_pinned_antiderivative_flat_and_pinned():
    g = TorusGrid(1, 128)
    x = g.nodes()[0]
    # zero within 0.1 of both pins, with zero mass on each arc
    v = np.where(np.abs(np.sin(TWO_PI * x)) < np.sin(TWO_PI * 0.1), 0.0, np.sin(4 * np.pi * x))
    w = pinned_antiderivative(v, g, [0.0, 0.5])
    assert w[0] == 0.0 and w[64] == 0.0
    # the cell rule reads two nodes past a cell
    flat = np.abs(g.shortest(x[None] - np.array([[0.0], [0.5]]))).min(axis=0) < 0.1 - 3 * g.spacing[0]
    assert np.max(np.abs(w[flat])) <= 1e-15


def test_primitive_1d_rejects_mass():
    g = TorusGrid(1, 64)
    with pytest.raises(NotSolvable):
        global_primitive(GridField(g, 1 + np.cos(TWO_PI * g.points()[0])), [0.0])


def test_primitive_2d_poisson_oracle():
    g = TorusGrid(2, 64)
    x, y = g.nodes()
    om = global_primitive(GridField(g, np.cos(TWO_PI * x)))
    # u = -cos(2 pi x)/(4 pi^2), omega = iota_{grad u} mu = u_x dy - u_y dx
    assert np.max(np.abs(om.coeffs[1] - np.sin(TWO_PI * x) / TWO_PI)) <= 1e-12
    assert np.max(np.abs(om.coeffs[0])) <= 1e-12
    assert np.max(np.abs(om.exterior_derivative() - np.cos(TWO_PI * x))) <= 1e-8


def test_weighted_primitive_is_still_a_primitive():
    g = TorusGrid(2, 64)
    x, y = g.nodes()
    delta = np.cos(TWO_PI * x) * np.sin(TWO_PI * y) + np.sin(4 * np.pi * y)
    w = 1.01 + np.cos(TWO_PI * (x - y))
    om = global_primitive(GridField(g, delta), weight=w)
    assert np.max(np.abs(om.exterior_derivative() - delta)) <= 1e-8


# -- relative correction -------------------------------------------------------------

def _exact_form(grid):
    x, y = grid.nodes()
    rho = np.cos(TWO_PI * x) * np.sin(TWO_PI * y) + 0.5 * np.sin(TWO_PI * (x + 2 * y))
    drho = (-TWO_PI * np.sin(TWO_PI * x) * np.sin(TWO_PI * y)
            + 0.5 * TWO_PI * np.cos(TWO_PI * (x + 2 * y)),
            TWO_PI * np.cos(TWO_PI * x) * np.cos(TWO_PI * y)
            + np.pi * 2 * np.cos(TWO_PI * (x + 2 * y)))
    return rho, drho


def test_theta_recovers_potential():
    g = TorusGrid(2, 256)
    rho, drho = _exact_form(g)
    c = chart("point:0.5,0.5", g)
    pts = g.points()
    sel = c.distance(pts) < c.radius
    th = _Theta(GlobalPrimitive(g, drho), c, 16)(pts[:, sel])
    centre = rho.ravel()[np.argmin(c.distance(pts))]
    assert np.max(np.abs(th - (rho.ravel()[sel] - centre))) <= 1e-8


def test_zero_primitive_zero_correction():
    g = TorusGrid(2, 32)
    zero = GlobalPrimitive(g, (np.zeros(g.shape), np.zeros(g.shape)))
    rel = relative_correction(zero, [chart("point:0.5,0.5", g)], 8)
    assert all(np.all(v == 0) for v in rel.on_nodes())


def test_circle_period_killed():
    g = TorusGrid(2, 64)
    x, y = g.nodes()
    om = GlobalPrimitive(g, (0.2 + 0.3 * np.sin(TWO_PI * x) * np.cos(TWO_PI * y),
                             np.zeros(g.shape)))
    c = chart("circle-y:0.5", g)
    assert abs(_Theta(om, c, 2).period_value - 0.2) <= 1e-12
    fixed = kill_periods(om, [c])
    assert abs(fixed.harmonic[0] + 0.2 / g.period[0]) <= 1e-12
    assert abs(_Theta(fixed, c, 2).period_value) <= 1e-10


def _relative_error(n):
    # omega = d rho plus the constants that zero it at the centre, so
    # theta = rho - rho_c + k.y and the correction is (1 - b) omega - theta db
    g = TorusGrid(2, n)
    rho, drho = _exact_form(g)
    c = chart("point:0.5,0.5", g)
    rel = relative_correction(GlobalPrimitive(g, drho), [c], 16)
    pts = g.points()
    r = c.distance(pts)
    b = rel.bumps[0]
    centre = rho.ravel()[np.argmin(r)]
    _, yv = c.inverse(pts)
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(r > 0, b.deriv(r) / np.where(r > 0, r, 1.0), 0.0)
    om = rel.omega.coeffs
    k = rel.omega.harmonic
    theta = rho.ravel() - centre + k[0] * yv[0] + k[1] * yv[1]
    expect = [(1 - b(r)) * om[i].ravel() - theta * coef * yv[i] for i in range(2)]
    got = rel.on_nodes()
    for i in range(2):
        assert np.all(got[i].ravel()[r <= b.r_in] == 0.0)
    return max(np.max(np.abs(got[i].ravel() - expect[i])) for i in range(2))


def test_relative_form_on_exact_input():
    coarse, fine = _relative_error(64), _relative_error(128)
    assert fine <= 5e-6
    # theta interpolates omega along the rays: fourth order
    assert coarse / fine >= 8


def test_relative_form_on_pipeline(point2d):
    ex, R = point2d.extras, point2d.chart_radius
    grid = point2d.scenario.grid
    om = point2d.omega_tilde
    r = ex["plans"][0].chart.distance(grid.points())
    for v in om:
        assert np.all(v.ravel()[r <= CORE[0] * R] == 0.0)
    # d omega~ = d omega, up to the spectral derivative of the steep core bump
    d_rel = spectral_partial(om[1], grid, (1, 0)) - spectral_partial(om[0], grid, (0, 1))
    d_om = ex["rel"].omega.exterior_derivative()
    assert np.max(np.abs(d_rel - d_om)) <= 1e-4 * np.max(np.abs(point2d.scenario.f0(grid.points())))


# -- field and flow ------------------------------------------------------------------

def test_check_interpolation_sign_change():
    f0 = np.array([1.0, 1.0, -1.0])
    check_interpolation(f0, np.array([2.0, 0.5, -3.0]), np.ones(3, dtype=bool))
    with pytest.raises(InterpolationDegenerate):
        check_interpolation(f0, np.array([1.0, -1.0, -1.0]), np.ones(3, dtype=bool))


def test_field_closed_form_1d(mb1d):
    sc, rel = mb1d.scenario, mb1d.extras["rel"]
    grid = sc.grid
    pts = grid.points()
    f0 = sc.f0(pts)
    zeta1 = mb1d.extras["psi"](pts) * f0
    om = rel.on_nodes()[0].ravel()
    for t in (0.0, 0.5, 1.0):
        Z = global_moser_field(rel, GridField(grid, f0.reshape(grid.shape)),
                               GridField(grid, zeta1.reshape(grid.shape)), t).components[0].ravel()
        r = rel.charts[0].distance(pts)
        probe = r > rel.bumps[0].r_in
        expect = om[probe] / ((1 - t) * f0[probe] + t * zeta1[probe])
        assert np.max(np.abs(Z[probe] - expect)) <= 1e-10
        assert np.all(Z[~probe] == 0.0)


def test_zero_relative_form_gives_identity():
    g = TorusGrid(2, 32)
    zero = GlobalPrimitive(g, (np.zeros(g.shape), np.zeros(g.shape)))
    c = chart("point:0.5,0.5", g)
    rel = relative_correction(zero, [c], 8)
    one = lambda p: np.ones(np.shape(p)[1:])
    H = global_step(rel, one, one, g, 8)
    assert np.array_equal(H.targets, g.nodes())


def test_H_identity_on_cores(point2d, mb1d, fold1d):
    for res in (point2d, mb1d, fold1d):
        grid = res.scenario.grid
        pts = grid.points()
        core = np.zeros(grid.size, dtype=bool)
        for ch, b in zip(res.extras["rel"].charts, res.extras["rel"].bumps):
            core |= ch.distance(pts) <= b.r_in
        assert core.any()
        assert np.array_equal(res.H.targets.reshape(grid.dim, -1)[:, core], pts[:, core])
        assert np.all(res.H.det > 0)


def test_H_residual_1d(mb1d):
    sc = mb1d.scenario
    grid = sc.grid
    x = grid.points()
    Ht = mb1d.H.targets.reshape(1, -1)
    zeta1 = sc.f1(mb1d.FG.evaluator(Ht)) * det_of(evaluator_jacobian(mb1d.FG.evaluator, Ht))
    res = zeta1 * mb1d.H.det.reshape(-1) - sc.f0(x)
    assert np.max(np.abs(res)) <= 1e-5


def test_compose_identity_and_order():
    g = TorusGrid(1, 16)
    ident = TransportMap(g, g.nodes().copy(), evaluator=lambda p: np.array(p, dtype=float))
    assert np.array_equal(compose_pipeline(ident, ident, ident).targets, g.nodes())
    shift = lambda a: TransportMap(g, g.nodes() + a, evaluator=lambda p, a=a: np.asarray(p) + a)
    wave = lambda p: np.asarray(p) + 0.1 * np.sin(TWO_PI * np.asarray(p)) / TWO_PI
    G = TransportMap(g, wave(g.nodes()), evaluator=wave)
    # F o G o H with H applied first
    phi = compose_pipeline(shift(0.25), G, shift(0.125))
    assert np.max(np.abs(phi.targets - (wave(g.nodes() + 0.125) + 0.25))) <= 1e-15


def test_phi_fixes_zero_set(point2d, mb1d, fold1d):
    from mbmoser.verify import gamma_fix_error
    for res in (point2d, mb1d, fold1d):
        assert gamma_fix_error(res.phi, res.scenario) <= 1e-9


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
@settings(max_examples=30, deadline=None)
def test_normalize_kills_component_masses(c):
    g = TorusGrid(1, 128)
    x = g.points()[0]
    f0 = np.sin(TWO_PI * x)
    delta = c[0] + c[1] * np.cos(TWO_PI * x) + c[2] * np.sin(4 * np.pi * x) + c[3] * f0 ** 2
    gamma = CriticalSet(tuple(parse_component(s, 1) for s in ("point1d:0", "point1d:0.5")))
    labels = label_components(gamma, g)
    out = normalize_per_component(delta, f0, labels, g)
    for i in range(labels.count):
        m = labels.volume_mask(i)
        assert abs(integrate(GridField(g, np.where(m, out, 0.0)))) <= 1e-12
