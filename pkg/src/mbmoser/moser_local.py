"""Local Moser step near the zero set: homotopy primitive, the field ``X_t``
solving the interior-product equation, bump gluing and the flow map ``G``.

Conventions.  On a chart the pulled-back density after ``F`` is ``phi * f * mu``
with ``mu = dx``.  The primitive ``beta`` satisfies ``d(f beta) = -f (phi - 1) mu``
and ``X_t`` solves ``iota_X(((1-t) + t phi) mu) = beta``.  Internally ``beta``
is stored through its contraction ``nu`` with ``mu`` (``iota_nu mu = beta``), so
that ``X_t = nu / ((1-t) + t phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bump import BumpProfile, smoothstep, smoothstep_deriv  # noqa: F401  (re-export)
from .errors import QuadratureFailure, TubeEscape
from .geometry import (PeriodicSpline, SplineBank, TorusGrid, TransportMap, VectorFieldSampled,
                       contract_arrays, det_of, fd_gradient, rk4_points)
from .normal_form import RadialNormalForm, TubularChart, gauss_legendre_01

# ratio of the tabulation taper to the chart radius
TAPER = (1.0, 1.5)


def contraction_pullback(values, chart: TubularChart, s: float, kind: str = "function"):
    """Pull a chart field back by the contraction ``g_s(y) = e^-s y``.

    ``values`` is a grid array (scalar, or ``(k, *shape)`` for a vector field
    along the normal directions).  Returns node values of ``g_s^*`` of it:
    ``v(e^-s y)`` for functions and ``e^s v(e^-s y)`` for vector fields.
    Nodes outside the chart are returned unchanged.
    """
    grid = chart.grid
    pts = grid.points()
    sel = chart.distance(pts) < chart.radius
    base, y = chart.inverse(pts[:, sel])
    where = chart.forward(np.exp(-s) * y, base)
    if kind == "function":
        out = np.array(values, dtype=float).reshape(-1)
        out[sel] = PeriodicSpline(np.asarray(values, dtype=float), grid)(where)
        return out.reshape(grid.shape)
    vals = np.array(values, dtype=float)
    out = vals.reshape(vals.shape[0], -1).copy()
    for i in range(vals.shape[0]):
        out[i, sel] = np.exp(s) * PeriodicSpline(vals[i], grid)(where)
    return out.reshape(vals.shape)


@dataclass
class LocalPrimitive:
    """Primitive on one chart, tabulated on the chart nodes ``r < 1.5 R``.

    ``nu`` has shape ``(dim, n)`` (the vector field with ``iota_nu mu = beta``);
    ``beta`` holds the form coefficients: the 0-form in 1D, ``(beta_x, beta_y)``
    in 2D.  ``phi_minus_1`` and ``f`` are the factored density data at the same
    nodes.
    """

    chart: TubularChart
    sel: np.ndarray
    nu: np.ndarray
    f: np.ndarray
    phi_minus_1: np.ndarray
    quad_delta: float = 0.0
    _splines: list = field(default=None, repr=False)

    @property
    def beta(self) -> tuple:
        if self.chart.grid.dim == 1:
            return (self.nu[0],)
        return (-self.nu[1], self.nu[0])

    def nu_grid(self) -> np.ndarray:
        """``nu`` on the whole grid, tapered to zero between R and 1.5 R."""
        grid = self.chart.grid
        r = self.chart.distance(grid.points()[:, self.sel])
        taper = BumpProfile(TAPER[0] * self.chart.radius, TAPER[1] * self.chart.radius)(r)
        out = np.zeros((grid.dim, grid.size))
        out[:, self.sel] = self.nu * taper
        return out.reshape((grid.dim,) + grid.shape)

    def nu_at(self, pts) -> np.ndarray:
        if self._splines is None:
            self._splines = SplineBank(self.nu_grid(), self.chart.grid)
        return self._splines(pts)


def _check_doubling(coarse, fine, label, where=None):
    if where is not None:
        coarse, fine = coarse[..., where], fine[..., where]
    delta = float(np.max(np.abs(fine - coarse))) if coarse.size else 0.0
    scale = max(1e-3, float(np.max(np.abs(fine)))) if fine.size else 1.0
    if delta > 1e-4 * scale:
        raise QuadratureFailure(f"{label}: quadrature changes by {delta:.3e} under node doubling")
    return delta


def _fibre_primitive(chart, f, phi, y, base, nodes):
    """``nu = -y int_0^1 f(sy)/f(y) (phi(sy) - 1) ds`` along the normal line."""
    s, w = gauss_legendre_01(nodes)
    fy = f(chart.forward(y, base))
    acc = np.zeros(y.shape[1:])
    for sk, wk in zip(s, w):
        p = chart.forward(sk * y, base)
        acc += wk * f(p) * (phi(p) - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(fy != 0, -y[0] * acc / np.where(fy != 0, fy, 1.0), 0.0)
    return out


class NormalFormJacobian:
    """``det D N`` for a radial normal form, by fourth-order differences of
    ``N`` on grid nodes near the chart, blended to ``det L`` far out and
    interpolated by a periodic spline."""

    def __init__(self, N: RadialNormalForm, chart: TubularChart, r_max: float):
        grid = chart.grid
        h = float(np.max(grid.spacing))
        pts = grid.points()
        r = chart.distance(pts)
        sel = r < r_max + 3 * h
        z = np.zeros((grid.dim, grid.size))
        y = chart.offset(pts[:, sel])
        z[:, sel] = N.to_normal(y) - y          # displacement of N, periodic-safe
        disp = z.reshape((grid.dim,) + grid.shape)
        D = np.array([[fd_gradient(disp[i], grid, j) + (i == j) for j in range(grid.dim)]
                      for i in range(grid.dim)])
        J = det_of(D).reshape(-1)
        J0 = abs(np.linalg.det(N.L))
        c = BumpProfile(r_max - 3 * h, r_max)(r)
        vals = c * J + (1 - c) * J0
        self.spline = PeriodicSpline(vals.reshape(grid.shape), grid)
        self.chart = chart

    def __call__(self, y) -> np.ndarray:
        return self.spline(self.chart.forward(y))


def _point_primitive(chart, N, J, phi, y, nodes):
    """Homotopy in normal-form coordinates pushed back to the chart:
    ``nu = -K(x) X0(x) / J(x)^-1`` with ``K = int_0^1 u^3 (phi - 1) / J du``
    along the trajectory ``x_u = N^-1(u N(x))``."""
    u1, w1 = gauss_legendre_01(nodes)
    u2, w2 = gauss_legendre_01(2 * nodes)
    _, traj = N.embedding.trajectory(y, np.concatenate([u1, u2]))
    K = []
    for u, w, part in ((u1, w1, traj[: nodes]), (u2, w2, traj[nodes:])):
        acc = np.zeros(y.shape[1:])
        for uk, wk, p in zip(u, w, part):
            acc += wk * uk ** 3 * (phi(chart.forward(p)) - 1.0) / J(p)
        K.append(acc)
    X0 = N.X(y)
    return -K[0] * X0 * J(y), -K[1] * X0 * J(y)


def homotopy_primitive(chart: TubularChart, f: Callable, phi: Callable,
                       normal_form: Optional[RadialNormalForm] = None,
                       quad_nodes: int = 32, jacobian: Optional[NormalFormJacobian] = None
                       ) -> LocalPrimitive:
    """Primitive ``beta`` of ``-(phi - 1) mu`` (after factoring ``f``) on a chart.

    ``f`` and ``phi`` are callables on torus points.  Codimension-one charts
    use the straight fibre contraction; point charts in 2D need the radial
    normal form of ``f``.  Quadrature is repeated with twice the nodes and the
    difference is checked.
    """
    grid = chart.grid
    pts = grid.points()
    r = chart.distance(pts)
    sel = r < TAPER[1] * chart.radius
    base, y = chart.inverse(pts[:, sel])
    if chart.codim == 1:
        coarse = _fibre_primitive(chart, f, phi, y, base, quad_nodes)
        fine = _fibre_primitive(chart, f, phi, y, base, 2 * quad_nodes)
        nu = np.zeros((grid.dim, fine.size))
        nu[chart.normal_axes[0]] = fine
        delta = _check_doubling(coarse, fine, "fibre homotopy", r[sel] < chart.radius)
    else:
        if normal_form is None:
            # equal forms: phi is one up to the rounding left by F
            if np.max(np.abs(phi(pts[:, sel]) - 1.0)) > 1e-9:
                raise ValueError("point charts in 2D need a radial normal form")
            return LocalPrimitive(chart, sel, np.zeros((grid.dim, int(sel.sum()))),
                                  f(pts[:, sel]), np.zeros(int(sel.sum())))
        if jacobian is None:
            jacobian = NormalFormJacobian(normal_form, chart, TAPER[1] * chart.radius)
        coarse, nu = _point_primitive(chart, normal_form, jacobian, phi, y, quad_nodes)
        delta = _check_doubling(coarse, nu, "radial homotopy", r[sel] < chart.radius)
    gamma = r[sel] == 0
    nu[:, gamma] = 0.0
    on = pts[:, sel]
    return LocalPrimitive(chart, sel, nu, f(on), phi(on) - 1.0, delta)


def local_moser_field(primitive: LocalPrimitive, t: float,
                      phi: Optional[Callable] = None) -> VectorFieldSampled:
    """Node samples of ``X_t = nu / ((1-t) + t phi)`` (zero off the chart and
    on the zero set)."""
    grid = primitive.chart.grid
    pts = grid.points()
    m = (1 - t) + t * (primitive.phi_minus_1 + 1.0)
    comps = contract_arrays(primitive.beta, m)
    out = np.zeros((grid.dim, grid.size))
    out[:, primitive.sel] = np.array(comps)
    return VectorFieldSampled(grid, tuple(c.reshape(grid.shape) for c in out))


class GluedField:
    """``Y_t = sum_charts b(r) X_t`` evaluated at arbitrary points."""

    def __init__(self, primitives, bumps, phi: Callable):
        self.primitives = list(primitives)
        self.bumps = list(bumps)
        self.phi = phi

    def __call__(self, t: float, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        for prim, bump in zip(self.primitives, self.bumps):
            r = prim.chart.distance(p)
            # beta vanishes on the zero set; keep that exact instead of
            # trusting the spline there
            sel = (r > 0) & (r < bump.r_out)
            if not np.any(sel):
                continue
            q = p[:, sel]
            m = (1 - t) + t * self.phi(q)
            out[:, sel] += bump(r[sel]) * prim.nu_at(q) / m
        return out


def glue_and_flow(primitives, bumps, grid: TorusGrid, steps: int, phi: Callable,
                  check_escape: bool = True) -> TransportMap:
    """Time-one flow ``G`` of the glued field.  Seeds inside a bump support
    must stay within the tabulated chart region, otherwise TubeEscape."""
    Y = GluedField(primitives, bumps, phi)
    seeds = grid.points()
    end = rk4_points(Y, seeds, steps)
    if check_escape:
        for prim, bump in zip(primitives, bumps):
            start = prim.chart.distance(seeds) < bump.r_out
            if np.any(prim.chart.distance(end[:, start]) >= TAPER[1] * prim.chart.radius):
                raise TubeEscape(f"flow leaves the chart around {prim.chart.component.name}")
    ev = lambda pts: rk4_points(Y, np.asarray(pts, dtype=float), steps)
    return TransportMap(grid, end.reshape((grid.dim,) + grid.shape), evaluator=ev)
