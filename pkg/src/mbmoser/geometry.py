"""Flat-torus grids, sampled fields and the discrete calculus built on them.

Conventions
-----------
A grid of dimension ``d`` stores node values in arrays of shape
``grid.shape`` with axis 0 the x direction.  Point sets are arrays of shape
``(d, npts)``.  Maps between tori keep *unwrapped* target coordinates; the
displacement ``target - node`` is periodic and is always reduced to the
shortest representative before differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import (DegenerateVolume, FlowBlowup, InvalidField,
                     NotDiffeomorphism, NotSolvable)

ROLES = ("density", "form-coefficient", "map-component")


def _as_tuple(value, dim, cast):
    if np.isscalar(value):
        return tuple(cast(value) for _ in range(dim))
    out = tuple(cast(v) for v in value)
    if len(out) != dim:
        raise ValueError(f"expected {dim} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on ``T^dim`` with node ``i`` at ``i*period/N``."""

    dim: int
    resolution: tuple
    period: tuple = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        res = _as_tuple(self.resolution, self.dim, int)
        per = _as_tuple(self.period, self.dim, float)
        if any(n < 16 for n in res):
            raise ValueError("resolution must be at least 16 per axis")
        if any(not np.isfinite(p) or p <= 0 for p in per):
            raise ValueError("periods must be positive")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "period", per)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.period) / np.array(self.resolution)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.period))

    @property
    def period_array(self) -> np.ndarray:
        return np.array(self.period, dtype=float)

    def axes(self) -> list:
        return [np.arange(n) * p / n for n, p in zip(self.resolution, self.period)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(dim, *shape)``."""
        return np.array(np.meshgrid(*self.axes(), indexing="ij"))

    def points(self) -> np.ndarray:
        """Node coordinates flattened to ``(dim, size)``."""
        return self.nodes().reshape(self.dim, -1)

    def wrap(self, pts: np.ndarray) -> np.ndarray:
        P = self.period_array.reshape((-1,) + (1,) * (np.ndim(pts) - 1))
        return np.mod(pts, P)

    def shortest(self, disp: np.ndarray) -> np.ndarray:
        """Reduce displacements to the representative in ``[-P/2, P/2)``."""
        P = self.period_array.reshape((-1,) + (1,) * (np.ndim(disp) - 1))
        return disp - P * np.floor(disp / P + 0.5)

    def refine(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.dim, tuple(n * factor for n in self.resolution), self.period)

    def wavenumbers(self) -> list:
        """Angular wavenumbers per axis, broadcastable against ``shape``."""
        ks = []
        for ax, (n, p) in enumerate(zip(self.resolution, self.period)):
            k = 2 * np.pi * np.fft.fftfreq(n, d=p / n)
            shape = [1] * self.dim
            shape[ax] = n
            ks.append(k.reshape(shape))
        return ks


@dataclass(frozen=True)
class GridField:
    grid: TorusGrid
    values: np.ndarray
    role: str = "density"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise InvalidField(f"expected shape {self.grid.shape}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidField("field contains non-finite values")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class VectorFieldSampled:
    """Vector field sampled on grid nodes.

    ``components[i]`` has shape ``grid.shape`` for a static field or
    ``(len(times),) + grid.shape`` when ``times`` (uniform on [0, 1]) is given.
    """

    grid: TorusGrid
    components: tuple
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(comps) != self.grid.dim:
            raise InvalidField("component count must equal grid dimension")
        lead = () if self.times is None else (len(self.times),)
        for c in comps:
            if c.shape != lead + self.grid.shape:
                raise InvalidField("component shape mismatch")
            if not np.all(np.isfinite(c)):
                raise InvalidField("vector field contains non-finite values")
        if self.times is not None:
            t = np.asarray(self.times, dtype=float)
            if len(t) < 2 or abs(t[0]) > 1e-15 or abs(t[-1] - 1) > 1e-15 \
                    or np.ptp(np.diff(t)) > 1e-12:
                raise InvalidField("time samples must be uniform on [0, 1]")
            object.__setattr__(self, "times", t)
        object.__setattr__(self, "components", comps)

    @property
    def time_dependent(self) -> bool:
        return self.times is not None

    def at_time(self, t: float) -> "VectorFieldSampled":
        if self.times is None:
            return self
        comps = tuple(CubicSpline(self.times, c, axis=0)(t) for c in self.components)
        return VectorFieldSampled(self.grid, comps)


# ---------------------------------------------------------------------------
# spectral calculus

def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise InvalidField("non-finite values")


def spectral_partial(values: np.ndarray, grid: TorusGrid, alpha: Sequence[int]) -> np.ndarray:
    """Mixed spectral partial derivative ``d^alpha`` of periodic samples.

    Odd-order derivatives discard the Nyquist mode of even resolutions.
    """
    values = np.asarray(values, dtype=float)
    _check_finite(values)
    if sum(alpha) == 0:
        return values.copy()
    vh = np.fft.fftn(values)
    for ax, (a, k) in enumerate(zip(alpha, grid.wavenumbers())):
        if a == 0:
            continue
        mult = (1j * k) ** a
        n = grid.resolution[ax]
        if a % 2 == 1 and n % 2 == 0:
            mult = mult.copy()
            idx = [0] * grid.dim
            idx[ax] = n // 2
            mult[tuple(idx)] = 0.0
        vh = vh * mult
    return np.real(np.fft.ifftn(vh))


def derivative(field: GridField, axis: int, order: int = 1) -> GridField:
    """Spectral derivative of ``field`` along ``axis`` (order 1 or 2)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    alpha = [0] * field.grid.dim
    alpha[axis] = order
    return GridField(field.grid, spectral_partial(field.values, field.grid, alpha), field.role)


def integrate(field: GridField, mask: Optional[np.ndarray] = None) -> float:
    """Rectangle-rule integral over the torus or over a node mask.

    The reduction is a numpy sum over a contiguous 1-D array, which uses a
    fixed pairwise blocking, so the result is reproducible bit for bit.
    """
    vals = field.values if mask is None else np.where(mask, field.values, 0.0)
    return float(np.ascontiguousarray(vals).ravel().sum()) * field.grid.cell_volume


def laplacian(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    k2 = sum(k ** 2 for k in grid.wavenumbers())
    return np.real(np.fft.ifftn(-k2 * np.fft.fftn(values)))


def poisson_solve(rhs: GridField, tol: float = 1e-10) -> GridField:
    """Mean-zero ``u`` with ``Laplacian(u) = rhs``."""
    grid = rhs.grid
    total = integrate(rhs)
    scale = max(1.0, float(np.max(np.abs(rhs.values))))
    if abs(total) > tol * grid.volume * scale:
        raise NotSolvable(f"right-hand side has nonzero mean ({total:.3e})")
    k2 = sum(k ** 2 for k in grid.wavenumbers())
    rh = np.fft.fftn(rhs.values)
    k2[(0,) * grid.dim] = 1.0
    uh = -rh / k2
    uh[(0,) * grid.dim] = 0.0
    return GridField(grid, np.real(np.fft.ifftn(uh)), "form-coefficient")


def antiderivative_1d(values: np.ndarray, period: float) -> np.ndarray:
    """Periodic spectral antiderivative of mean-zero 1-D samples (zero mean)."""
    n = len(values)
    k = 2 * np.pi * np.fft.fftfreq(n, d=period / n)
    vh = np.fft.fft(values)
    k[0] = 1.0
    out = vh / (1j * k)
    out[0] = 0.0
    if n % 2 == 0:
        out[n // 2] = 0.0
    return np.real(np.fft.ifft(out))


# ---------------------------------------------------------------------------
# interior product

def contract_arrays(beta, m: np.ndarray):
    """Solve ``iota_X (m vol) = beta`` pointwise; ``beta`` is a scalar (1-D) or
    the pair ``(beta_x, beta_y)`` (2-D).  Returns the components of ``X``."""
    if isinstance(beta, (tuple, list)) and len(beta) == 2:
        bx, by = beta
        return (by / m, -bx / m)
    if isinstance(beta, (tuple, list)):
        beta = beta[0]
    return (beta / m,)


def contract_into_volume(beta, m: GridField, mask: Optional[np.ndarray] = None,
                         threshold: float = 1e-300) -> VectorFieldSampled:
    """Vector field ``X`` with ``iota_X(m dx...) = beta`` at requested nodes.

    ``beta`` is a GridField (1-D, a 0-form) or a pair of GridFields holding the
    ``dx`` and ``dy`` coefficients (2-D).  Nodes outside ``mask`` get ``X = 0``.
    """
    grid = m.grid
    if mask is None:
        mask = np.ones(grid.shape, dtype=bool)
    if np.any(np.abs(m.values[mask]) <= threshold):
        bad = np.argwhere(mask & (np.abs(m.values) <= threshold))[0]
        raise DegenerateVolume(f"volume density vanishes at node {tuple(bad)}")
    safe = np.where(mask, m.values, 1.0)
    if isinstance(beta, GridField):
        comps = contract_arrays(beta.values, safe)
    else:
        comps = contract_arrays(tuple(b.values for b in beta), safe)
    comps = tuple(np.where(mask, c, 0.0) for c in comps)
    return VectorFieldSampled(grid, comps)


# ---------------------------------------------------------------------------
# interpolation

def _cubic_weights(t):
    """Uniform cubic B-spline weights for offsets -1, 0, 1, 2."""
    t2, t3 = t * t, t * t * t
    return ((1 - t) ** 3 / 6, (3 * t3 - 6 * t2 + 4) / 6,
            (-3 * t3 + 3 * t2 + 3 * t + 1) / 6, t3 / 6)


class SplineBank:
    """Several periodic cubic B-spline interpolants on one grid, evaluated
    together so that the stencil and weights are computed once."""

    def __init__(self, values, grid: TorusGrid):
        vals = np.asarray(values, dtype=float)
        if vals.shape[1:] != grid.shape:
            raise InvalidField("sample shape does not match grid")
        self.grid = grid
        self.channels = vals.shape[0]
        coeffs = np.array([ndimage.spline_filter(v, order=3, mode="grid-wrap") for v in vals])
        self._rows = np.ascontiguousarray(coeffs.reshape(self.channels, -1).T)
        self._h = grid.spacing.reshape(-1, 1)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(self.grid.dim, -1)
        idx = self.grid.wrap(flat) / self._h
        base = np.floor(idx)
        t = idx - base
        base = base.astype(np.int64)
        shape = self.grid.shape
        off = np.arange(-1, 3)
        if self.grid.dim == 1:
            index = (base[0][None] + off[:, None]) % shape[0]
            weight = np.array(_cubic_weights(t[0]))
        else:
            ix = (base[0][None] + off[:, None]) % shape[0]
            iy = (base[1][None] + off[:, None]) % shape[1]
            index = (ix[:, None] * shape[1] + iy[None]).reshape(16, -1)
            wx, wy = np.array(_cubic_weights(t[0])), np.array(_cubic_weights(t[1]))
            weight = (wx[:, None] * wy[None]).reshape(16, -1)
        out = np.einsum("sn,snc->cn", weight, self._rows[index])
        return out.reshape((self.channels,) + pts.shape[1:])


class PeriodicSpline:
    """Periodic B-spline interpolant of grid samples (cubic by default)."""

    def __init__(self, values: np.ndarray, grid: TorusGrid, order: int = 3):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise InvalidField("sample shape does not match grid")
        self.grid = grid
        self.order = order
        if order == 3:
            self._bank = SplineBank(values[None], grid)
        else:
            self._bank = None
            self.coeffs = ndimage.spline_filter(values, order=order, mode="grid-wrap")
            self._h = grid.spacing.reshape(-1, 1)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        if self._bank is not None:
            return self._bank(pts)[0]
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(self.grid.dim, -1)
        idx = self.grid.wrap(flat) / self._h
        out = ndimage.map_coordinates(self.coeffs, idx, order=self.order,
                                      mode="grid-wrap", prefilter=False)
        return out.reshape(pts.shape[1:])


def interpolate(field: Union[GridField, VectorFieldSampled], point) -> np.ndarray:
    """Periodic cubic interpolation at one point ``(dim,)`` or many ``(dim, n)``."""
    pt = np.asarray(point, dtype=float)
    single = pt.ndim == 1
    pts = pt.reshape(field.grid.dim, -1)
    if isinstance(field, GridField):
        out = PeriodicSpline(field.values, field.grid)(pts)
        return out[0] if single else out
    comps = field.at_time(0.0).components if field.time_dependent else field.components
    out = np.array([PeriodicSpline(c, field.grid)(pts) for c in comps])
    return out[:, 0] if single else out


# ---------------------------------------------------------------------------
# maps

def fd_gradient(values: np.ndarray, grid: TorusGrid, axis: int) -> np.ndarray:
    """Sixth-order centred difference of periodic samples along ``axis``."""
    h = grid.spacing[axis]
    r = lambda s: np.roll(values, -s, axis=axis)
    return (r(3) - 9 * r(2) + 45 * r(1) - 45 * r(-1) + 9 * r(-2) - r(-3)) / (60 * h)


def jacobian_matrix(grid: TorusGrid, targets: np.ndarray) -> np.ndarray:
    """Jacobian ``J[i, j] = d target_i / d x_j`` by centred differences of the
    shortest periodic displacement; shape ``(dim, dim, *shape)``."""
    disp = grid.shortest(targets - grid.nodes())
    J = np.empty((grid.dim, grid.dim) + grid.shape)
    for i in range(grid.dim):
        for j in range(grid.dim):
            J[i, j] = fd_gradient(disp[i], grid, j) + (1.0 if i == j else 0.0)
    return J


def det_of(J: np.ndarray) -> np.ndarray:
    if J.shape[0] == 1:
        return J[0, 0].copy()
    return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]


def evaluator_jacobian(evaluator: Callable, pts: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Jacobian of a point map by central differences of step ``eps``; shape
    ``(dim, dim, n)``.  Meant for maps evaluated exactly at arbitrary points."""
    pts = np.asarray(pts, dtype=float)
    dim = pts.shape[0]
    J = np.empty((dim, dim) + pts.shape[1:])
    for j in range(dim):
        e = np.zeros((dim,) + (1,) * (pts.ndim - 1))
        e[j] = eps
        J[:, j] = (evaluator(pts + e) - evaluator(pts - e)) / (2 * eps)
    return J


@dataclass(frozen=True, eq=False)
class TransportMap:
    """Sampled diffeomorphism of the torus.

    ``targets`` has shape ``(dim, *shape)``.  When an ``evaluator`` is
    attached the map can be applied exactly at arbitrary points (for example
    a flow map re-integrated from new seeds); otherwise it is applied by
    periodic cubic interpolation of the displacement.
    """

    grid: TorusGrid
    targets: np.ndarray
    det: np.ndarray = None
    evaluator: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        tg = np.asarray(self.targets, dtype=float)
        if tg.shape != (self.grid.dim,) + self.grid.shape:
            raise InvalidField("target array has wrong shape")
        if not np.all(np.isfinite(tg)):
            raise FlowBlowup("map contains non-finite targets")
        object.__setattr__(self, "targets", tg)
        if self.det is None:
            object.__setattr__(self, "det", det_of(jacobian_matrix(self.grid, tg)))
        if not np.all(self.det > 0):
            bad = np.unravel_index(np.argmin(self.det), self.grid.shape)
            raise NotDiffeomorphism(
                f"Jacobian determinant {self.det[bad]:.3e} <= 0 at node {bad}")

    @classmethod
    def identity(cls, grid: TorusGrid) -> "TransportMap":
        return cls(grid, grid.nodes(), np.ones(grid.shape), evaluator=lambda p: np.array(p, dtype=float))

    def displacement(self) -> np.ndarray:
        return self.grid.shortest(self.targets - self.grid.nodes())

    def jacobian(self) -> np.ndarray:
        return jacobian_matrix(self.grid, self.targets)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.evaluator is not None:
            return self.evaluator(pts)
        disp = self.displacement()
        return pts + np.array([PeriodicSpline(d, self.grid)(pts) for d in disp])


def compose(a: TransportMap, b: TransportMap) -> TransportMap:
    """Node-wise ``a o b``: apply ``b`` first, then ``a``."""
    if a.grid != b.grid:
        raise ValueError("maps live on different grids")
    targets = a(b.targets.reshape(a.grid.dim, -1)).reshape(b.targets.shape)
    ev = None
    if a.evaluator is not None and b.evaluator is not None:
        ev = lambda p: a.evaluator(b.evaluator(p))
    return TransportMap(a.grid, targets, evaluator=ev)


def invert(a: TransportMap, tol: float = 1e-13, maxiter: int = 60) -> TransportMap:
    """Numerical inverse by per-node Newton iteration on the interpolated map."""
    grid = a.grid
    x = grid.points()
    disp = a.displacement()
    dspl = [PeriodicSpline(d, grid) for d in disp]
    J = a.jacobian()
    jspl = [[PeriodicSpline(J[i, j], grid) for j in range(grid.dim)] for i in range(grid.dim)]
    p = x - np.array([s(x) for s in dspl])
    for _ in range(maxiter):
        r = p + np.array([s(p) for s in dspl]) - x
        if grid.dim == 1:
            step = r[0] / jspl[0][0](p)
            p = p - step[None]
        else:
            a11, a12 = jspl[0][0](p), jspl[0][1](p)
            a21, a22 = jspl[1][0](p), jspl[1][1](p)
            d = a11 * a22 - a12 * a21
            p = p - np.array([(a22 * r[0] - a12 * r[1]) / d,
                              (-a21 * r[0] + a11 * r[1]) / d])
        if np.max(np.abs(r)) < tol:
            break
    return TransportMap(grid, p.reshape((grid.dim,) + grid.shape))


# ---------------------------------------------------------------------------
# flows

Velocity = Callable[[float, np.ndarray], np.ndarray]


def _velocity_from_sampled(field: VectorFieldSampled) -> Velocity:
    grid = field.grid
    if not field.time_dependent:
        spl = [PeriodicSpline(c, grid) for c in field.components]
        return lambda t, p: np.array([s(p) for s in spl])
    tsp = [CubicSpline(field.times, c, axis=0) for c in field.components]

    def vel(t, p):
        return np.array([PeriodicSpline(s(t), grid)(p) for s in tsp])
    return vel


def rk4_points(velocity: Velocity, pts: np.ndarray, steps: int,
               t0: float = 0.0, t1: float = 1.0) -> np.ndarray:
    """Classical fourth-order Runge-Kutta transport of a point cloud."""
    p = np.array(pts, dtype=float)
    dt = (t1 - t0) / steps
    for n in range(steps):
        t = t0 + n * dt
        k1 = velocity(t, p)
        k2 = velocity(t + dt / 2, p + dt / 2 * k1)
        k3 = velocity(t + dt / 2, p + dt / 2 * k2)
        k4 = velocity(t + dt, p + dt * k3)
        p = p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(p)):
            raise FlowBlowup(f"non-finite position at step {n + 1}")
    return p


def flow_integrate(field: Union[VectorFieldSampled, Velocity], steps: int = 64,
                   grid: Optional[TorusGrid] = None) -> TransportMap:
    """Time-one flow map of a (possibly time-dependent) vector field.

    ``field`` is a VectorFieldSampled or a callable ``velocity(t, pts)``
    returning ``(dim, npts)``; for a callable, ``grid`` is required.
    """
    if steps < 16:
        raise ValueError("at least 16 steps are required")
    if isinstance(field, VectorFieldSampled):
        grid = field.grid
        velocity = _velocity_from_sampled(field)
    else:
        if grid is None:
            raise ValueError("grid required for callable fields")
        velocity = field
    seeds = grid.points()
    end = rk4_points(velocity, seeds, steps)
    ev = lambda p: rk4_points(velocity, np.asarray(p, dtype=float), steps)
    return TransportMap(grid, end.reshape((grid.dim,) + grid.shape), evaluator=ev)
