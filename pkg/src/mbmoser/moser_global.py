"""Global Moser step: primitive ``omega`` of the remaining density difference,
its correction ``omega~`` vanishing near the zero set, the field ``Z_t`` and
its flow ``H``; and the composition of all stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as P

from .bump import BumpProfile
from .errors import InterpolationDegenerate, NotSolvable, RelativeClassMismatch
from .geometry import (GridField, PeriodicSpline, SplineBank, TorusGrid, TransportMap, VectorFieldSampled,
                       antiderivative_1d, compose, contract_arrays, integrate, poisson_solve,
                       rk4_points, spectral_partial)
from .normal_form import TubularChart, gauss_legendre_01
from .scenario import ComponentLabels

# b~ is 1 for r <= CORE[0] R and 0 for r >= CORE[1] R
CORE = (0.25, 0.5)


def normalize_per_component(delta: np.ndarray, f0: np.ndarray, labels: ComponentLabels,
                            grid: TorusGrid) -> np.ndarray:
    """Remove from ``delta`` the multiple of ``f0`` that carries its mass on each
    component, so that every component integral vanishes."""
    out = np.array(delta, dtype=float)
    for i in range(labels.count):
        m = labels.volume_mask(i)
        w = integrate(GridField(grid, np.where(m, f0, 0.0)))
        d = integrate(GridField(grid, np.where(m, out, 0.0)))
        if w != 0:
            out[m] -= d / w * f0[m]
    return out


def fourier_eval_1d(values: np.ndarray, period: float, x) -> np.ndarray:
    """Trigonometric interpolant of periodic samples at points ``x``."""
    n = len(values)
    c = np.fft.fft(values) / n
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        c = c.copy()
        c[n // 2] *= 0.5
        c = np.append(c, c[n // 2])
        k = np.append(k, n // 2)
        k[n // 2] = -n // 2
    x = np.asarray(x, dtype=float)
    ph = np.exp(2j * np.pi * np.multiply.outer(x, k) / period)
    return np.real(ph @ c)


@dataclass
class GlobalPrimitive:
    """``omega`` as node arrays of form coefficients: ``(omega,)`` in 1D (a
    0-form), ``(omega_x, omega_y)`` in 2D.  ``harmonic`` holds the constant
    coefficients added to kill circle periods."""

    grid: TorusGrid
    coeffs: tuple
    harmonic: tuple = ()
    _splines: list = field(default=None, repr=False)

    def at(self, pts) -> np.ndarray:
        if self._splines is None:
            self._splines = SplineBank(np.array(self.coeffs), self.grid)
        return self._splines(pts)

    def exterior_derivative(self) -> np.ndarray:
        """Density of ``d omega`` (spectral)."""
        g = self.grid
        if g.dim == 1:
            return spectral_partial(self.coeffs[0], g, (1,))
        return spectral_partial(self.coeffs[1], g, (1, 0)) - spectral_partial(self.coeffs[0], g, (0, 1))


def _weighted_potential(delta: np.ndarray, w: np.ndarray, grid: TorusGrid,
                        rtol: float = 1e-9, maxiter: int = 5000) -> np.ndarray:
    """``v`` with ``div(w grad v) = delta`` (spectral operator, conjugate
    gradients preconditioned by the inverse Laplacian)."""
    from scipy.sparse.linalg import LinearOperator, cg

    k2 = np.zeros(grid.shape) + sum(k ** 2 for k in grid.wavenumbers())
    k2[(0,) * grid.dim] = 1.0
    wbar = float(np.mean(w))

    def grad(v):
        return [spectral_partial(v, grid, a) for a in np.eye(grid.dim, dtype=int)]

    def apply(vflat):
        v = vflat.reshape(grid.shape)
        g = grad(v)
        return -sum(spectral_partial(w * gi, grid, a)
                    for gi, a in zip(g, np.eye(grid.dim, dtype=int))).ravel()

    # constants and Nyquist modes are annihilated by the spectral gradient
    keep = np.ones(grid.shape, dtype=bool)
    keep[(0,) * grid.dim] = False
    for ax, n in enumerate(grid.shape):
        if n % 2 == 0:
            idx = [slice(None)] * grid.dim
            idx[ax] = n // 2
            keep[tuple(idx)] = False

    def project(x):
        xh = np.fft.fftn(x.reshape(grid.shape))
        return xh * keep

    def precond(rflat):
        rh = project(rflat) / (wbar * k2)
        return np.real(np.fft.ifftn(rh)).ravel()

    n = grid.size
    A = LinearOperator((n, n), matvec=apply, dtype=float)
    M = LinearOperator((n, n), matvec=precond, dtype=float)
    rhs = -np.real(np.fft.ifftn(project(delta))).ravel()
    # the caller removes what is left exactly, but a loose solve leaves an
    # unweighted correction in the tubes that does not shrink under refinement
    v, _ = cg(A, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    return v.reshape(grid.shape)


def _drop_nyquist(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Remove the Nyquist modes, whose derivatives no potential can match."""
    axes = tuple(range(1, grid.dim + 1))
    ch = np.fft.fftn(coeffs, axes=axes)
    for ax, n in enumerate(grid.shape):
        if n % 2 == 0:
            idx = [slice(None)] * (grid.dim + 1)
            idx[ax + 1] = n // 2
            ch[tuple(idx)] = 0.0
    return np.real(np.fft.ifftn(ch, axes=axes))


def global_primitive(delta: GridField, gamma_points=(), tol: float = 1e-10,
                     weight: Optional[np.ndarray] = None) -> GlobalPrimitive:
    """``d omega = delta mu``.  In 2D ``omega = iota_{grad u} mu`` with
    ``Laplace u = delta``; in 1D ``omega`` is the antiderivative pinned to 0 at
    every zero-set point (or the spectral one with zero mean when there is none).

    With a ``weight`` (2D) the primitive is ``omega = w iota_{grad v} mu`` with
    ``div(w grad v) = delta``, plus a Poisson correction removing the solver
    residual, so that ``d omega = delta`` holds spectrally.  A weight vanishing
    on the zero set makes omega small there.
    """
    grid = delta.grid
    if grid.dim == 2:
        coeffs = np.zeros((2,) + grid.shape)
        rest = delta.values
        if weight is not None:
            v = _weighted_potential(delta.values, np.asarray(weight, dtype=float), grid)
            vx = spectral_partial(v, grid, (1, 0))
            vy = spectral_partial(v, grid, (0, 1))
            coeffs = _drop_nyquist(np.array([-weight * vy, weight * vx]), grid)
            rest = delta.values - (spectral_partial(coeffs[1], grid, (1, 0))
                                   - spectral_partial(coeffs[0], grid, (0, 1)))
        u = poisson_solve(GridField(grid, rest), tol).values
        ux = spectral_partial(u, grid, (1, 0))
        uy = spectral_partial(u, grid, (0, 1))
        return GlobalPrimitive(grid, (coeffs[0] - uy, coeffs[1] + ux))
    v = delta.values
    mean = float(np.mean(v))
    if abs(mean) > tol * max(1.0, float(np.max(np.abs(v)))):
        raise NotSolvable(f"density difference has nonzero mean {mean:.3e}")
    if not len(gamma_points):
        return GlobalPrimitive(grid, (antiderivative_1d(v - mean, grid.period[0]),))
    return GlobalPrimitive(grid, (pinned_antiderivative(v - mean, grid, gamma_points),))


# Lagrange basis through the nodes -2..3 of a cell [0, 1], integrated from 0
_STENCIL = np.arange(-2, 4)
_CELL_BASIS = [P.polyint(P.polyfromroots(np.delete(_STENCIL, i))
                         / np.prod(_STENCIL[i] - np.delete(_STENCIL, i)))
               for i in range(len(_STENCIL))]
# the whole-cell weights (11, -93, 802, 802, -93, 11) / 1440
_CELL_WEIGHTS = np.array([P.polyval(1.0, c) for c in _CELL_BASIS])
# nodes read past either end of a cell
STENCIL_REACH = 2


def _partial_cell(v: np.ndarray, k: np.ndarray, s: np.ndarray) -> np.ndarray:
    n = len(v)
    return sum(P.polyval(s, c) * v[(k + o) % n] for o, c in zip(_STENCIL, _CELL_BASIS))


def pinned_antiderivative(v: np.ndarray, grid: TorusGrid, gamma_points) -> np.ndarray:
    """Antiderivative of node samples, restarted from zero at every zero-set
    point and carried across each component.

    Cells are integrated with the local quintic through six nodes, so the
    result is sixth order and is exactly flat wherever ``v`` vanishes on the
    stencil.  Each component must carry zero mass for the result to be
    continuous at the next point.
    """
    n, h = len(v), grid.spacing[0]
    L = grid.period[0]
    inc = h * sum(w * np.roll(v, -o) for o, w in zip(_STENCIL, _CELL_WEIGHTS))
    cum = np.concatenate([[0.0], np.cumsum(inc)])          # at nodes 0..n
    g = np.sort(np.mod(np.asarray(gamma_points, dtype=float), L))
    k = np.minimum(np.floor(g / h).astype(int), n - 1)
    at_g = cum[k] + h * _partial_cell(v, k, g / h - k)
    x = grid.nodes()[0]
    # the last zero-set point at or before each node, wrapping around
    j = np.searchsorted(g, x + 1e-12 * h, side="right") - 1
    out = cum[:n] - at_g[j]
    out[j < 0] += cum[n]
    out[np.min(np.abs(grid.shortest(x[None] - g[:, None])), axis=0) < 1e-12 * h] = 0.0
    return out


class _Theta:
    """``theta`` with ``d theta = omega`` on one chart, evaluated at points."""

    def __init__(self, omega: GlobalPrimitive, chart: TubularChart, nodes: int):
        self.omega, self.chart = omega, chart
        self.s, self.w = gauss_legendre_01(nodes)
        b = chart.component.base_axis()
        self.base_axis = b
        if b is not None:
            grid = omega.grid
            n, P = grid.resolution[b], grid.period[b]
            normal = 1 - b
            # omega along the circle, by Fourier interpolation across it
            coef = np.moveaxis(omega.coeffs[b], normal, -1)
            line = np.array([fourier_eval_1d(row, grid.period[normal], chart.component.loc[0])
                             for row in coef])
            self.period_value = float(np.mean(line) * P)
            prim = antiderivative_1d(line - np.mean(line), P) + np.mean(line) * grid.axes()[b]
            self._base_grid = TorusGrid(1, n, P)
            # keep the periodic part in a spline, the linear part analytic
            self._base = PeriodicSpline(prim - np.mean(line) * grid.axes()[b], self._base_grid)
            self._slope = float(np.mean(line))

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        ch = self.chart
        base, y = ch.inverse(pts)
        acc = np.zeros(pts.shape[1:])
        if self.base_axis is None:
            for sk, wk in zip(self.s, self.w):
                om = self.omega.at(ch.forward(sk * y))
                acc += wk * np.sum(om * y, axis=0)
            return acc
        normal = 1 - self.base_axis
        for sk, wk in zip(self.s, self.w):
            om = self.omega.at(ch.forward(sk * y, base))
            acc += wk * om[normal] * y[0]
        b = np.asarray(base, dtype=float)
        return acc + self._base(b[None]) + self._slope * b


def kill_periods(omega: GlobalPrimitive, charts, tol: float = 1e-10) -> GlobalPrimitive:
    """Add constant multiples of ``dx`` / ``dy`` so that the period of omega
    around every circle of the zero set vanishes (least squares when several
    circles share a direction).  Directions not fixed by a circle are used to
    make omega vanish on average at the point components, which keeps
    ``omega~`` small where the density is small."""
    grid = omega.grid
    coeffs = [np.array(c) for c in omega.coeffs]
    harmonic = [0.0] * grid.dim
    points = [ch for ch in charts if ch.component.base_axis() is None]
    free = [ax for ax in range(grid.dim)
            if not any(ch.component.base_axis() == ax for ch in charts)]
    if points and free:
        centres = np.array([ch.component.loc for ch in points]).T
        vals = omega.at(centres)
        for ax in free:
            k = -float(np.mean(vals[ax]))
            coeffs[ax] = coeffs[ax] + k
            harmonic[ax] = k
    for axis in range(grid.dim):
        circles = [ch for ch in charts if ch.component.base_axis() == axis]
        if not circles:
            continue
        P = grid.period[axis]
        periods = np.array([_Theta(GlobalPrimitive(grid, tuple(coeffs)), ch, 2).period_value
                            for ch in circles])
        A = np.full((len(periods), 1), P)
        k, *_ = np.linalg.lstsq(A, -periods, rcond=None)
        left = periods + A[:, 0] * k[0]
        scale = max(1.0, float(np.max(np.abs(coeffs[axis]))))
        if np.max(np.abs(left)) > tol * scale:
            raise RelativeClassMismatch(
                f"circle periods {periods.tolist()} cannot all be removed "
                f"(residual {np.max(np.abs(left)):.3e})")
        coeffs[axis] = coeffs[axis] + k[0]
        harmonic[axis] = float(k[0])
    return GlobalPrimitive(grid, tuple(coeffs), tuple(harmonic))


@dataclass
class RelativePrimitive:
    """``omega~ = (1 - b~) omega - theta db~``, equal to ``omega - d(b~ theta)``
    wherever ``d theta = omega``; it vanishes on every core."""

    omega: GlobalPrimitive
    charts: list
    bumps: list
    thetas: list

    def at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = self.omega.at(pts)
        for ch, bump, th in zip(self.charts, self.bumps, self.thetas):
            r = ch.distance(pts)
            sel = r < bump.r_out
            if not np.any(sel):
                continue
            q = pts[:, sel]
            bt = bump(r[sel])
            out[:, sel] *= (1 - bt)
            if th is None:
                continue
            # d b~ = b~'(r) dr, dr = y / r along the normal directions
            _, y = ch.inverse(q)
            rr = r[sel]
            with np.errstate(invalid="ignore", divide="ignore"):
                coef = np.where(rr > 0, bump.deriv(rr) / np.where(rr > 0, rr, 1.0), 0.0)
            tv = th(q)
            for j, ax in enumerate(ch.normal_axes):
                out[ax, sel] -= tv * coef * y[j]
        return out

    def on_nodes(self) -> tuple:
        g = self.omega.grid
        vals = self.at(g.points())
        return tuple(v.reshape(g.shape) for v in vals)


def relative_correction(omega: GlobalPrimitive, charts, quad_nodes: int = 16,
                        core=CORE, tol: float = 1e-10) -> RelativePrimitive:
    """Correct ``omega`` by an exact form so that it vanishes near the zero set."""
    grid = omega.grid
    if grid.dim == 2:
        omega = kill_periods(omega, charts, tol)
    bumps = [BumpProfile(core[0] * ch.radius, core[1] * ch.radius) for ch in charts]
    thetas = [None if grid.dim == 1 else _Theta(omega, ch, quad_nodes) for ch in charts]
    return RelativePrimitive(omega, list(charts), bumps, thetas)


class GlobalField:
    """``Z_t`` with ``iota_Z(((1-t) f0 + t zeta1) mu) = omega~``; zero on cores."""

    def __init__(self, rel: RelativePrimitive, f0: Callable, psi: Callable):
        self.rel, self.f0, self.psi = rel, f0, psi

    def active(self, p) -> np.ndarray:
        sel = np.ones(np.shape(p)[1:], dtype=bool)
        for ch, bump in zip(self.rel.charts, self.rel.bumps):
            sel &= ch.distance(p) > bump.r_in
        return sel

    def __call__(self, t: float, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        sel = self.active(p)
        if not np.any(sel):
            return out
        q = p[:, sel]
        m = self.f0(q) * ((1 - t) + t * self.psi(q))
        om = self.rel.at(q)
        out[:, sel] = np.array(contract_arrays(tuple(om) if len(om) == 2 else om[0], m))
        return out


def check_interpolation(f0: np.ndarray, zeta1: np.ndarray, off_core: np.ndarray):
    """``(1-t) f0 + t zeta1`` keeps the sign of ``f0`` off the cores."""
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        zt = (1 - t) * f0 + t * zeta1
        bad = off_core & ~(zt * np.sign(f0) > 0)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise InterpolationDegenerate(
                f"interpolated density changes sign at node {idx} (t = {t})")


def global_moser_field(rel: RelativePrimitive, f0: GridField, zeta1: GridField,
                       t: float) -> VectorFieldSampled:
    """Node samples of ``Z_t``; zero on the cores and at the zero set."""
    grid = f0.grid
    gf = GlobalField(rel, None, None)
    pts = grid.points()
    sel = gf.active(pts).reshape(grid.shape)
    m = (1 - t) * f0.values + t * zeta1.values
    om = rel.on_nodes()
    safe = np.where(sel, m, 1.0)
    comps = contract_arrays(om if len(om) == 2 else om[0], safe)
    return VectorFieldSampled(grid, tuple(np.where(sel, c, 0.0) for c in comps))


def global_step(rel: RelativePrimitive, f0: Callable, psi: Callable, grid: TorusGrid,
                steps: int) -> TransportMap:
    """Time-one flow ``H`` of ``Z_t``; the identity on the cores."""
    Z = GlobalField(rel, f0, psi)
    seeds = grid.points()
    end = rk4_points(Z, seeds, steps)
    ev = lambda pts: rk4_points(Z, np.asarray(pts, dtype=float), steps)
    return TransportMap(grid, end.reshape((grid.dim,) + grid.shape), evaluator=ev)


def compose_pipeline(F: TransportMap, G: TransportMap, H: TransportMap) -> TransportMap:
    """``Phi = F o G o H``: the point map whose pullback applies F*, then G*, then H*."""
    return compose(F, compose(G, H))
