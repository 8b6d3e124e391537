"""Tubular charts, Hadamard representations, Euler-like fields, flow-matched
tubular embeddings and the function-equalizing map ``F``.

Normal offsets ``y`` have shape ``(k, n)`` with ``k`` the codimension.  For a
circle component the chart also carries the base coordinate along it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bump import BumpProfile
from .errors import (ChartOverlap, DegenerateB, EmbeddingDivergence,
                     HadamardFailure, NotDiffeomorphism, NotIndexZero,
                     NotTransverse, QuadratureFailure)
from .geometry import SplineBank, TorusGrid, TransportMap
from .scenario import Component, Derivatives


# F is exact for r <= F_BLEND[0] R and the identity beyond F_BLEND[1] R.  A wide
# blend keeps F monotone when f1 distorts f0 strongly near the zero set.
F_BLEND = (0.125, 1.0)


def gauss_legendre_01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


# ---------------------------------------------------------------------------
# charts

@dataclass(frozen=True)
class TubularChart:
    component: Component
    grid: TorusGrid
    radius: float

    @property
    def codim(self) -> int:
        return self.component.codim(self.grid.dim)

    @property
    def normal_axes(self) -> tuple:
        return self.component.normal_axes(self.grid.dim)

    def offset(self, pts) -> np.ndarray:
        return self.component.normal_offset(pts, self.grid)

    def base(self, pts) -> Optional[np.ndarray]:
        b = self.component.base_axis()
        return None if b is None else np.asarray(pts, dtype=float)[b]

    def distance(self, pts) -> np.ndarray:
        return np.sqrt(np.sum(self.offset(pts) ** 2, axis=0))

    def inverse(self, pts):
        """Torus points to ``(base, y)``."""
        return self.base(pts), self.offset(pts)

    def forward(self, y, base=None) -> np.ndarray:
        """``(base, y)`` to torus points (unwrapped)."""
        y = np.asarray(y, dtype=float)
        comp = self.component
        if comp.kind in ("point", "point1d"):
            return np.array(comp.loc).reshape((-1,) + (1,) * (y.ndim - 1)) + y
        b = comp.base_axis()
        out = np.empty((2,) + y.shape[1:])
        out[b] = base
        out[1 - b] = comp.loc[0] + y[0]
        return out


def build_chart(component: Component, grid: TorusGrid, radius: float,
                separation: Optional[float] = None) -> TubularChart:
    """Flat chart around a zero-set component; the radius may not exceed a
    quarter of the separation from the nearest other component."""
    if separation is None:
        separation = min(grid.period[ax] for ax in component.normal_axes(grid.dim))
    if radius <= 0 or radius > separation / 4 * (1 + 1e-12):
        raise ChartOverlap(f"chart radius {radius:.4g} exceeds separation/4 = {separation / 4:.4g}")
    return TubularChart(component, grid, float(radius))


# ---------------------------------------------------------------------------
# Hadamard representation

def _alpha(dim, axes):
    a = [0] * dim
    for ax in axes:
        a[ax] += 1
    return a


class HadamardRep:
    """``f(y) = 1/2 y^T A(y) y`` on a chart, with
    ``A_ij(y) = 2 int_0^1 (1-t) d_i d_j f(ty) dt`` by Gauss-Legendre quadrature.

    ``derivs`` is any object with ``partial(alpha, pts)`` returning partial
    derivatives of ``f`` at torus points.
    """

    def __init__(self, derivs, chart: TubularChart, quad_nodes: int = 16):
        self.derivs = derivs
        self.chart = chart
        self.quad_nodes = quad_nodes
        self.t, self.w = gauss_legendre_01(quad_nodes)
        self.k = chart.codim
        self.axes = chart.normal_axes
        self.dim = chart.grid.dim

    def _integrate(self, y, base, order, weight):
        y = np.asarray(y, dtype=float)
        k = self.k
        shape = (k,) * order + y.shape[1:]
        out = np.zeros(shape)
        idx = np.ndindex(*(k,) * order)
        combos = [c for c in idx if list(c) == sorted(c)]
        for t, w in zip(self.t, self.w):
            pts = self.chart.forward(t * y, base)
            wt = w * weight(t)
            for c in combos:
                val = wt * self.derivs.partial(_alpha(self.dim, [self.axes[i] for i in c]), pts)
                for perm in set(_perms(c)):
                    out[perm] += val
        return out

    def A(self, y, base=None) -> np.ndarray:
        return self._integrate(y, base, 2, lambda t: 2 * (1 - t))

    def dA(self, y, base=None) -> np.ndarray:
        """``dA[i, j, l] = d A_ij / d y^l``."""
        return self._integrate(y, base, 3, lambda t: 2 * (1 - t) * t)

    def B(self, y, base=None) -> np.ndarray:
        return b_from(self.A(y, base), self.dA(y, base), y)

    def reconstruct(self, y, base=None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return 0.5 * np.einsum("i...,ij...,j...->...", y, self.A(y, base), y)

    def check(self, f, y, base=None, rtol: float = 1e-8, b_min: float = 1e-8):
        """Verify the reconstruction against ``f`` (callable on torus points),
        quadrature convergence under node doubling and invertibility of B."""
        y = np.asarray(y, dtype=float)
        ref = f(self.chart.forward(y, base))
        scale = max(1.0, float(np.max(np.abs(ref))))
        err = float(np.max(np.abs(self.reconstruct(y, base) - ref)))
        if err > rtol * scale:
            raise HadamardFailure(f"reconstruction error {err:.3e}")
        fine = HadamardRep(self.derivs, self.chart, 2 * self.quad_nodes)
        A = self.A(y, base)
        delta = float(np.max(np.abs(fine.A(y, base) - A)))
        if delta > 1e-10 * max(1.0, float(np.max(np.abs(A)))):
            raise QuadratureFailure(f"Hadamard quadrature changes by {delta:.3e} under doubling")
        sv = np.linalg.svd(np.moveaxis(self.B(y, base), (0, 1), (-2, -1)), compute_uv=False)
        if np.min(sv) < b_min * max(1.0, float(np.max(np.abs(A)))):
            raise DegenerateB(f"B nearly singular (min singular value {np.min(sv):.3e})")
        return err


def _perms(c):
    import itertools
    return itertools.permutations(c)


def b_from(A, dA, y):
    """``B_ki = A_ik + 1/2 sum_j dA_ij/dy^k y^j``."""
    y = np.asarray(y, dtype=float)
    corr = 0.5 * np.einsum("ijk...,j...->ki...", dA, y)
    return np.swapaxes(A, 0, 1) + corr


def hadamard_rep(derivs, chart: TubularChart, quad_nodes: int = 16) -> HadamardRep:
    return HadamardRep(derivs, chart, quad_nodes)


class TabulatedHadamard:
    """Spline tabulation of ``A`` and ``dA`` on grid nodes of a point chart.

    Values are exact (up to interpolation) for ``r <= r_valid`` and tapered
    smoothly to zero at ``r_zero`` so that the periodic splines stay smooth.
    """

    def __init__(self, rep: HadamardRep, r_valid: float, r_zero: float, order: int = 3):
        chart = rep.chart
        if chart.component.base_axis() is not None:
            raise ValueError("tabulation is for point charts")
        grid = chart.grid
        self.rep, self.chart, self.k = rep, chart, rep.k
        nodes = grid.points()
        r = chart.distance(nodes)
        sel = r < r_zero
        y = chart.offset(nodes[:, sel])
        taper = BumpProfile(r_valid, r_zero)(r[sel])
        A = rep.A(y) * taper
        dA = rep.dA(y) * taper
        self.A0 = rep.A(np.zeros((self.k, 1)))[..., 0]
        self._iA = [i for i in np.ndindex(*(self.k,) * 2) if i[0] <= i[1]]
        self._idA = [i for i in np.ndindex(*(self.k,) * 3) if i[0] <= i[1]]
        chans = []
        for idx in self._iA:
            full = np.zeros(grid.size)
            full[sel] = A[idx]
            chans.append(full.reshape(grid.shape))
        for idx in self._idA:
            full = np.zeros(grid.size)
            full[sel] = dA[idx]
            chans.append(full.reshape(grid.shape))
        self._bank = SplineBank(np.array(chans), grid)

    def A_dA(self, y, base=None):
        y = np.asarray(y, dtype=float)
        vals = self._bank(self.chart.forward(y))
        k = self.k
        A = np.empty((k, k) + y.shape[1:])
        dA = np.empty((k,) * 3 + y.shape[1:])
        for c, (i, j) in enumerate(self._iA):
            A[i, j] = A[j, i] = vals[c]
        off = len(self._iA)
        for c, (i, j, l) in enumerate(self._idA):
            dA[i, j, l] = dA[j, i, l] = vals[off + c]
        return A, dA

    def A(self, y, base=None):
        return self.A_dA(y, base)[0]

    def dA(self, y, base=None):
        return self.A_dA(y, base)[1]

    def B(self, y, base=None):
        return b_from(self.A(y, base), self.dA(y, base), y)


# ---------------------------------------------------------------------------
# Euler-like field and flow matching

def _solve_transposed(B, v):
    """Solve ``B^T x = v`` pointwise for k in {1, 2}."""
    k = B.shape[0]
    if k == 1:
        return v / B[0, 0]
    a, b, c, d = B[0, 0], B[1, 0], B[0, 1], B[1, 1]   # B^T = [[a, b], [c, d]]
    det = a * d - b * c
    return np.array([(d * v[0] - b * v[1]) / det, (-c * v[0] + a * v[1]) / det])


class EulerLikeField:
    """``X = sum_ij (A B^-1)_ij y^i d/dy^j``, i.e. ``X = B^-T A y``."""

    def __init__(self, rep):
        self.rep = rep
        self.k = rep.k

    def __call__(self, y, base=None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if hasattr(self.rep, "A_dA"):
            A, dA = self.rep.A_dA(y, base)
        else:
            A, dA = self.rep.A(y, base), self.rep.dA(y, base)
        B = b_from(A, dA, y)
        Ay = np.einsum("ij...,j...->i...", A, y)
        return _solve_transposed(B, Ay)

    def linearization(self, base=None, h: float = 1e-4) -> np.ndarray:
        """Centred finite-difference Jacobian of X at the zero section."""
        k = self.k
        J = np.empty((k, k))
        for j in range(k):
            e = np.zeros((k, 4))
            e[j] = [-2 * h, -h, h, 2 * h]
            b = None if base is None else np.full(4, base)
            X = self(e, b)
            J[:, j] = (X[:, 0] - 8 * X[:, 1] + 8 * X[:, 2] - X[:, 3]) / (12 * h)
        return J

    def quadratic_part(self, q, u, base=None):
        """``(X(uq) - uq) / u^2`` written without the division."""
        p = u * q
        if hasattr(self.rep, "A_dA"):
            A, dA = self.rep.A_dA(p, base)
        else:
            A, dA = self.rep.A(p, base), self.rep.dA(p, base)
        B = b_from(A, dA, p)
        v = 0.5 * np.einsum("ijl...,j...,l...->i...", dA, q, q)
        return -_solve_transposed(B, v)


def euler_like_field(rep) -> EulerLikeField:
    B = rep.B(np.zeros((rep.k, 1)))
    if abs(np.linalg.det(B[..., 0])) < 1e-14:
        raise DegenerateB("B is singular on the zero section")
    return EulerLikeField(rep)


class TubularEmbedding:
    """``phi(w) = Flow^X_s(e^-s w)`` at ``s = s_max``.

    With ``p(u) = u q(u)`` and ``u = e^{sigma - s}`` the flow becomes
    ``q' = (X(uq) - uq)/u^2``, which is regular at ``u = 0``; ``phi`` maps
    ``q(u0)`` to ``q(1)`` with ``u0 = e^-s_max``.
    """

    def __init__(self, X: EulerLikeField, s_max: float = 12.0, steps: int = 64):
        self.X = X
        self.s_max = s_max
        self.u0 = 0.0 if np.isinf(s_max) else float(np.exp(-s_max))
        self.steps = steps

    def _rk4(self, q, ugrid, base=None, keep=None):
        f = lambda u, qq: self.X.quadratic_part(qq, u, base)
        kept = {}
        for n, (a, b) in enumerate(zip(ugrid[:-1], ugrid[1:])):
            h = b - a
            k1 = f(a, q)
            k2 = f(a + h / 2, q + h / 2 * k1)
            k3 = f(a + h / 2, q + h / 2 * k2)
            k4 = f(b, q + h * k3)
            q = q + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if keep is not None and n + 1 in keep:
                kept[n + 1] = b * q
        if not np.all(np.isfinite(q)):
            raise EmbeddingDivergence("flow-matching ODE produced non-finite values")
        return q, kept

    def _grid(self, start, stop):
        return np.linspace(start, stop, self.steps + 1)

    def forward(self, w, base=None) -> np.ndarray:
        q, _ = self._rk4(np.array(w, dtype=float), self._grid(self.u0, 1.0), base)
        return q

    def inverse(self, y, base=None) -> np.ndarray:
        q, _ = self._rk4(np.array(y, dtype=float), self._grid(1.0, self.u0), base)
        return q

    def trajectory(self, y, u_nodes, base=None):
        """Backward integration from ``q(1) = y``.  Returns ``phi^-1(y)`` and
        ``p(u) = phi(u phi^-1(y))`` at each of ``u_nodes`` (shape ``(m, k, ...)``)."""
        u_nodes = np.asarray(u_nodes, dtype=float)
        knots = np.unique(np.concatenate([[self.u0, 1.0], u_nodes]))[::-1]
        hmax = (1.0 - self.u0) / self.steps
        ugrid, where = [knots[0]], {}
        for a, b in zip(knots[:-1], knots[1:]):
            m = max(1, int(np.ceil((a - b) / hmax - 1e-9)))
            ugrid.extend(np.linspace(a, b, m + 1)[1:])
            where[b] = len(ugrid) - 1
        where[knots[0]] = 0
        idx = [where[u] for u in u_nodes]
        q, kept = self._rk4(np.array(y, dtype=float), np.array(ugrid), base, keep=set(idx))
        y = np.asarray(y, dtype=float)
        return q, np.array([y if i == 0 else kept[i] for i in idx])

    def convergence_check(self, w, base=None, tol: float = 1e-14) -> float:
        deltas = []
        for s in (self.s_max / 2, self.s_max, 2 * self.s_max):
            emb = TubularEmbedding(self.X, s, self.steps)
            deltas.append(emb.forward(w, base))
        d1 = float(np.max(np.abs(deltas[1] - deltas[0])))
        d2 = float(np.max(np.abs(deltas[2] - deltas[1])))
        if d2 > max(d1, tol):
            raise EmbeddingDivergence(f"flow matching not converging ({d1:.3e} -> {d2:.3e})")
        return d2


def tubular_from_euler_like(X: EulerLikeField, chart: TubularChart = None,
                            s_max: float = 12.0, steps: int = 64) -> TubularEmbedding:
    J = X.linearization()
    if np.max(np.abs(J - np.eye(X.k))) > 1e-5:
        raise EmbeddingDivergence("field is not Euler-like (linearization differs from identity)")
    return TubularEmbedding(X, s_max, steps)


def quadratic_to_isotropic(A0) -> np.ndarray:
    """``L = (A0/2)^{1/2}`` so that ``1/2 z^T A0 z = |L z|^2``."""
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    if not np.allclose(A0, A0.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(A0)))):
        raise NotIndexZero("A0 is not symmetric")
    lam, V = np.linalg.eigh((A0 + A0.T) / 2)
    if np.min(lam) <= 0:
        raise NotIndexZero("A0 is not positive definite")
    return (V * np.sqrt(lam / 2)) @ V.T


def homogeneity_defect(g, chart: TubularChart, k: int, scales=(0.125, 0.25, 0.5, 0.75, 1.0),
                       radius: Optional[float] = None) -> float:
    """Largest ``|g(u y) - u^k g(y)|`` over chart nodes with ``|y| < radius``
    and the given ``u``, relative to ``max |g|`` there.  ``g`` is a callable on
    torus points; fibre-wise homogeneous polynomials of degree ``k`` give
    round-off."""
    grid = chart.grid
    pts = grid.points()
    sel = chart.distance(pts) < (chart.radius if radius is None else radius)
    base, y = chart.inverse(pts[:, sel])
    ref = g(chart.forward(y, base))
    scale = max(float(np.max(np.abs(ref))), 1e-300)
    worst = 0.0
    for u in scales:
        d = g(chart.forward(u * y, base)) - u ** k * ref
        worst = max(worst, float(np.max(np.abs(d))))
    return worst / scale


def is_homogeneous(g, chart: TubularChart, k: int, tol: float = 1e-8, **kw) -> bool:
    return homogeneity_defect(g, chart, k, **kw) <= tol


# ---------------------------------------------------------------------------
# normal forms

class RadialNormalForm:
    """Normal form ``N = L o phi^-1`` of an index-0 Morse-Bott function near a
    point zero: ``f(N^-1(z)) = |z|^2``."""

    def __init__(self, f_derivs, chart: TubularChart, quad_nodes: int = 16,
                 s_max: float = 12.0, steps: int = 64, r_valid: float = None,
                 r_zero: float = None):
        rep = hadamard_rep(f_derivs, chart, quad_nodes)
        if r_valid is not None:
            rep = TabulatedHadamard(rep, r_valid, r_zero)
        self.rep = rep
        self.chart = chart
        A0 = rep.A(np.zeros((chart.codim, 1)))[..., 0]
        self.L = quadratic_to_isotropic(A0)
        self.Linv = np.linalg.inv(self.L)
        self.X = euler_like_field(rep)
        self.embedding = tubular_from_euler_like(self.X, chart, s_max, steps)

    def to_normal(self, y) -> np.ndarray:
        return self.L @ self.embedding.inverse(y)

    def from_normal(self, z) -> np.ndarray:
        return self.embedding.forward(self.Linv @ np.asarray(z, dtype=float))


def _fibre_solve(g, target, lo, hi, iters=80):
    """Vectorised bisection for the increasing functions ``g(a) = target``."""
    glo, ghi = g(lo) - target, g(hi) - target
    if np.any(glo > 0) or np.any(ghi < 0):
        raise NotDiffeomorphism("normal-form root not bracketed inside the chart")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        up = g(mid) - target >= 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    return 0.5 * (lo + hi)


def fibre_match(f1, chart: TubularChart, base, y, target, kind: str, slope_sign: float,
                reach: float) -> np.ndarray:
    """Solve ``f1(base, y') = target`` on the fibre through ``base``.

    Morse-Bott: ``y'`` on the same side as ``y``.  Folded: ``f1`` is monotone
    across the zero set with sign ``slope_sign``.
    """
    y = np.asarray(y, dtype=float).ravel()
    if kind == "MorseBott0":
        s = np.where(y >= 0, 1.0, -1.0)
        g = lambda a: f1(chart.forward((s * a)[None], base))
        a = _fibre_solve(g, target, np.zeros_like(y), np.full_like(y, reach))
        out = s * a
    else:
        g = lambda a: slope_sign * f1(chart.forward(a[None], base))
        out = _fibre_solve(g, slope_sign * target, np.full_like(y, -reach), np.full_like(y, reach))
    return np.where(y == 0, 0.0, out)


@dataclass
class FoldedNormalForm:
    """Fibre coordinate ``y~ = f(base, y) / d_n f(base, 0)``."""

    f: object
    chart: TubularChart
    slope: object          # callable base -> d_n f(base, 0)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        base = self.chart.base(pts)
        return self.f(pts) / self.slope(base)


def normal_slope(f, chart: TubularChart, base=None, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central difference of ``f`` along the normal at the zero set."""
    vals = []
    for s in (-2, -1, 1, 2):
        vals.append(f(chart.forward(np.full((1,) + np.shape(base if base is not None else 0), s * h), base)))
    return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)


def folded_normal_form(f, component: Component, chart: TubularChart,
                       threshold: float = 1e-8) -> FoldedNormalForm:
    """Make ``f`` exactly fibre-linear: the new fibre coordinate is ``f`` divided
    by its normal slope on the zero set."""
    if chart.codim != 1:
        raise NotTransverse("folded normal form needs a hypersurface")
    if chart.component.base_axis() is None:
        slope_fn = lambda base: normal_slope(f, chart)
    else:
        slope_fn = lambda base: normal_slope(f, chart, np.asarray(base, dtype=float))
    bases = chart.component.samples(chart.grid)[chart.component.base_axis() or 0]
    sl = slope_fn(None if chart.component.base_axis() is None else bases)
    if np.min(np.abs(sl)) < threshold:
        raise NotTransverse(f"normal derivative {np.min(np.abs(sl)):.3e} below threshold")
    return FoldedNormalForm(f, chart, slope_fn)


# ---------------------------------------------------------------------------
# F

@dataclass
class ChartPlan:
    chart: TubularChart
    kind: str                      # MorseBott0 | NonCritical
    slope_sign: float = 1.0


class EqualizingMap:
    """``F = N1^-1 o N0`` on each chart, blended to the identity across
    ``F_BLEND`` times the chart radius; identity elsewhere."""

    def __init__(self, f0, f1, plans, grid: TorusGrid, derivs0=None, derivs1=None,
                 quad_nodes: int = 16, s_max: float = 12.0, steps: int = 64,
                 identical: bool = False):
        self.f0, self.f1, self.plans, self.grid = f0, f1, plans, grid
        self.identical = identical
        self.forms = []
        for plan in plans:
            ch = plan.chart
            R = ch.radius
            if plan.kind == "MorseBott0" and ch.codim >= 2 and not identical:
                kw = dict(quad_nodes=quad_nodes, s_max=s_max, steps=steps,
                          r_valid=1.75 * R, r_zero=2.0 * R)
                self.forms.append((RadialNormalForm(derivs0, ch, **kw),
                                   RadialNormalForm(derivs1, ch, **kw)))
            else:
                self.forms.append(None)

    def exact(self, i, pts) -> np.ndarray:
        """Unblended ``N1^-1 o N0`` of chart ``i`` at torus points."""
        plan = self.plans[i]
        ch = plan.chart
        pts = np.asarray(pts, dtype=float)
        if self.identical:
            return pts.copy()
        base, y = ch.inverse(pts)
        if self.forms[i] is not None:
            N0, N1 = self.forms[i]
            ynew = N1.from_normal(N0.to_normal(y))
        else:
            target = self.f0(pts)
            ynew = fibre_match(self.f1, ch, base, y[0], target, plan.kind,
                               plan.slope_sign, 2 * ch.radius)[None]
        return ch.forward(ynew, base) - ch.forward(y, base) + pts

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = pts.copy()
        for i, plan in enumerate(self.plans):
            ch = plan.chart
            r = ch.distance(pts)
            sel = r < ch.radius
            if not np.any(sel):
                continue
            sub = pts[:, sel]
            b = BumpProfile(F_BLEND[0] * ch.radius, F_BLEND[1] * ch.radius)(r[sel])
            out[:, sel] = sub + b * (self.exact(i, sub) - sub)
        return out


def equalize_functions(f0, f1, plans, grid: TorusGrid, derivs0=None, derivs1=None,
                       quad_nodes: int = 16, s_max: float = 12.0, steps: int = 64) -> TransportMap:
    """Diffeomorphism ``F`` with ``f1 o F = f0`` near the zero set."""
    identical = getattr(f0, "canonical", lambda: None)() is not None and \
        f0.canonical() == f1.canonical()
    Fm = EqualizingMap(f0, f1, plans, grid, derivs0, derivs1, quad_nodes, s_max, steps, identical)
    targets = Fm(grid.points()).reshape((grid.dim,) + grid.shape)
    if identical:
        return TransportMap(grid, targets, np.ones(grid.shape), evaluator=Fm)
    return TransportMap(grid, targets, evaluator=Fm)
