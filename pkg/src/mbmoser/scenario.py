"""Scenario files, the declared zero set, its classification and the
volume tests that decide whether two degenerate forms can be equivalent."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import (CohomologyMismatch, InvalidZeroSet, NotIndexZero,
                     ScenarioError, ZeroSetMismatch)
from .expression import Expression, parse_expression
from .geometry import GridField, PeriodicSpline, TorusGrid, integrate, spectral_partial

KINDS = ("point", "circle-x", "circle-y", "point1d")
CLASSES = ("auto", "morse-bott", "folded")


def _fmt(v: float) -> str:
    return f"{v:.12g}"


@dataclass(frozen=True)
class Component:
    """One connected piece of the zero set.

    ``loc`` holds the point coordinates, or the single fixed coordinate of an
    axis-aligned circle (``circle-y:c`` is the circle ``{y = c}``).
    """

    kind: str
    loc: tuple
    cls: str = "auto"

    @property
    def name(self) -> str:
        return f"{self.kind}:" + ",".join(_fmt(v) for v in self.loc)

    def codim(self, dim: int) -> int:
        return dim if self.kind in ("point", "point1d") else 1

    def normal_axes(self, dim: int) -> tuple:
        if self.kind == "circle-y":
            return (1,)
        if self.kind == "circle-x":
            return (0,)
        return tuple(range(dim))

    def base_axis(self) -> Optional[int]:
        return {"circle-y": 0, "circle-x": 1}.get(self.kind)

    def normal_offset(self, pts: np.ndarray, grid: TorusGrid) -> np.ndarray:
        """Shortest displacement from the component in its normal directions,
        shape ``(codim, ...)``."""
        pts = np.asarray(pts, dtype=float)
        axes = self.normal_axes(grid.dim)
        if self.kind in ("point", "point1d"):
            c = np.array(self.loc).reshape((-1,) + (1,) * (pts.ndim - 1))
            return grid.shortest(pts - c)
        ax = axes[0]
        d = pts[ax] - self.loc[0]
        P = grid.period[ax]
        return (d - P * np.floor(d / P + 0.5))[None]

    def distance(self, pts: np.ndarray, grid: TorusGrid) -> np.ndarray:
        return np.sqrt(np.sum(self.normal_offset(pts, grid) ** 2, axis=0))

    def samples(self, grid: TorusGrid) -> np.ndarray:
        """Points of the component used for checks, shape ``(dim, m)``."""
        if self.kind in ("point", "point1d"):
            return np.array(self.loc, dtype=float).reshape(-1, 1)
        b = self.base_axis()
        base = grid.axes()[b]
        out = np.empty((2, base.size))
        out[b] = base
        out[1 - b] = self.loc[0]
        return out


def parse_component(text: str, dim: int, cls: str = "auto") -> Component:
    m = re.fullmatch(r"\s*([a-z0-9-]+)\s*:\s*(.+?)\s*", text)
    if m is None:
        raise ScenarioError(f"bad component spec {text!r}")
    kind, rest = m.group(1), m.group(2)
    try:
        loc = tuple(float(v) for v in rest.split(","))
    except ValueError:
        raise ScenarioError(f"bad component coordinates {rest!r}") from None
    if kind == "point" and dim == 1:
        kind = "point1d"
    if kind not in KINDS:
        raise ScenarioError(f"unknown component kind {kind!r}")
    want = {"point": dim, "point1d": 1, "circle-x": 1, "circle-y": 1}[kind]
    if len(loc) != want:
        raise ScenarioError(f"{kind} needs {want} coordinate(s)")
    if kind.startswith("circle") and dim != 2:
        raise ScenarioError("circles require dim = 2")
    if kind == "point1d" and dim != 1:
        raise ScenarioError("point1d requires dim = 1")
    if cls not in CLASSES:
        raise ScenarioError(f"unknown class {cls!r}")
    return Component(kind, loc, cls)


@dataclass(frozen=True)
class CriticalSet:
    components: tuple

    def __iter__(self):
        return iter(self.components)

    def __len__(self):
        return len(self.components)

    def distance(self, pts: np.ndarray, grid: TorusGrid) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if not self.components:
            return np.full(pts.shape[1:], np.inf)
        return np.min([c.distance(pts, grid) for c in self.components], axis=0)

    def separations(self, grid: TorusGrid) -> list:
        """Per component: distance to the nearest other component or to its
        own periodic image."""
        out = []
        for i, a in enumerate(self.components):
            own = min(grid.period[ax] for ax in a.normal_axes(grid.dim))
            best = own
            for j, b in enumerate(self.components):
                if i != j:
                    best = min(best, _pair_distance(a, b, grid))
            out.append(best)
        return out

    def min_separation(self, grid: TorusGrid) -> float:
        seps = self.separations(grid)
        return min(seps) if seps else np.inf


def _pair_distance(a: Component, b: Component, grid: TorusGrid) -> float:
    if a.kind.startswith("circle") and b.kind.startswith("circle"):
        if a.kind != b.kind:
            return 0.0
        return float(a.distance(b.samples(grid)[:, :1], grid)[0])
    if b.kind.startswith("circle"):
        a, b = b, a
    return float(np.min(a.distance(b.samples(grid), grid)))


@dataclass(frozen=True)
class SolverParams:
    tube_radius_frac: float = 0.4
    quad_nodes: int = 16
    flow_steps: int = 64
    residual_tol: float = 5e-3
    volume_tol: float = 1e-8
    hessian_rel_tol: float = 1e-6


@dataclass(frozen=True)
class Scenario:
    dim: int
    resolution: tuple
    period: tuple
    f0: Expression
    f1: Expression
    gamma: CriticalSet
    solver: SolverParams = field(default_factory=SolverParams)
    source: str = ""

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.dim, self.resolution, self.period)

    def with_overrides(self, resolution=None, flow_steps=None, quad_nodes=None,
                       tube_radius_frac=None) -> "Scenario":
        s = self
        if resolution is not None:
            s = replace(s, resolution=tuple(int(resolution) for _ in range(self.dim)))
        kw = {k: v for k, v in dict(flow_steps=flow_steps, quad_nodes=quad_nodes,
                                     tube_radius_frac=tube_radius_frac).items() if v is not None}
        if kw:
            s = replace(s, solver=replace(s.solver, **kw))
        s._validate()
        return s

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.source.encode())
        h.update(repr((self.resolution, self.period, self.solver)).encode())
        return h.hexdigest()[:16]

    def sample(self, which: int) -> GridField:
        f = self.f0 if which == 0 else self.f1
        return GridField(self.grid, f(self.grid.nodes()))

    def _validate(self):
        sp = self.solver
        if not 0 < sp.tube_radius_frac < 0.5:
            raise ScenarioError("tube_radius_frac must lie in (0, 1/2)")
        for name in ("residual_tol", "volume_tol", "hessian_rel_tol"):
            if not getattr(sp, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        if sp.quad_nodes < 2 or sp.flow_steps < 16:
            raise ScenarioError("quad_nodes >= 2 and flow_steps >= 16 required")
        try:
            grid = self.grid
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        if len(self.gamma) and self.gamma.min_separation(grid) < 4 * np.max(grid.spacing) - 1e-12:
            raise ScenarioError("zero-set components closer than 4 grid cells")


# ---------------------------------------------------------------------------
# scenario file

_SECTIONS = {
    "grid": {"dim", "resolution", "period"},
    "forms": {"f0", "f1"},
    "gamma": {"component", "class"},
    "solver": {"tube_radius_frac", "quad_nodes", "flow_steps", "residual_tol", "volume_tol"},
}


def _unquote(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    return v


def parse_scenario(text: str) -> Scenario:
    """Parse the sectioned ``key = value`` scenario format.

    In ``[gamma]`` a ``class`` line applies to the component declared just
    before it; a ``class`` line before any component sets the default.
    """
    section = None
    entries = {k: [] for k in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line:
            continue
        m = re.fullmatch(r"\[\s*([A-Za-z_]+)\s*\]", line)
        if m:
            section = m.group(1)
            if section not in _SECTIONS:
                raise ScenarioError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected key = value")
        if section is None:
            raise ScenarioError(f"line {lineno}: key outside of a section")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SECTIONS[section]:
            raise ScenarioError(f"line {lineno}: unknown key {key!r} in [{section}]")
        entries[section].append((key, _unquote(val), lineno))

    def single(sec, key, default=None, cast=str):
        vals = [v for k, v, _ in entries[sec] if k == key]
        if len(vals) > 1:
            raise ScenarioError(f"duplicate key {key!r} in [{sec}]")
        if not vals:
            if default is None:
                raise ScenarioError(f"missing key {key!r} in [{sec}]")
            return default
        try:
            return cast(vals[0])
        except ValueError:
            raise ScenarioError(f"bad value for {key!r}: {vals[0]!r}") from None

    dim = single("grid", "dim", cast=int)
    if dim not in (1, 2):
        raise ScenarioError("dim must be 1 or 2")
    tuple_of = lambda cast: (lambda s: tuple(cast(v) for v in s.split(",")))
    res = single("grid", "resolution", cast=tuple_of(int))
    per = single("grid", "period", default=(1.0,), cast=tuple_of(float))
    res = res * dim if len(res) == 1 else res
    per = per * dim if len(per) == 1 else per
    if len(res) != dim or len(per) != dim:
        raise ScenarioError("resolution/period must give one value per axis")
    variables = ("x", "y")[:dim]
    f0 = parse_expression(single("forms", "f0"), variables)
    f1 = parse_expression(single("forms", "f1"), variables)

    comps, default_cls = [], "auto"
    for key, val, lineno in entries["gamma"]:
        if key == "component":
            comps.append(parse_component(val, dim, default_cls))
        else:
            if val not in CLASSES:
                raise ScenarioError(f"line {lineno}: unknown class {val!r}")
            if comps:
                comps[-1] = replace(comps[-1], cls=val)
            else:
                default_cls = val

    sp = SolverParams()
    kw = {}
    for key, cast in (("tube_radius_frac", float), ("quad_nodes", int), ("flow_steps", int),
                      ("residual_tol", float), ("volume_tol", float)):
        kw[key] = single("solver", key, default=getattr(sp, key), cast=cast)
    scen = Scenario(dim, res, per, f0, f1, CriticalSet(tuple(comps)),
                    SolverParams(**kw), text)
    scen._validate()
    return scen


def _strip_comment(raw: str) -> str:
    out, quote = [], None
    for ch in raw:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def make_scenario(dim, resolution, f0: str, f1: str, components=(), period=1.0,
                  **solver) -> Scenario:
    """Programmatic counterpart of a scenario file."""
    lines = ["[grid]", f"dim = {dim}", f"resolution = {resolution}",
             f"period = {period}", "[forms]", f'f0 = "{f0}"', f'f1 = "{f1}"', "[gamma]"]
    for c in components:
        if isinstance(c, tuple):
            lines += [f'component = "{c[0]}"', f"class = {c[1]}"]
        else:
            lines.append(f'component = "{c}"')
    lines.append("[solver]")
    lines += [f"{k} = {v}" for k, v in solver.items()]
    return parse_scenario("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# classification

@dataclass(frozen=True)
class ComponentClass:
    kind: str                    # "MorseBott0" | "NonCritical" | "Invalid"
    reason: str = ""
    min_eig: float = float("nan")
    normal_slope: float = float("nan")

    @property
    def valid(self) -> bool:
        return self.kind != "Invalid"


class Derivatives:
    """Spectral derivatives of a sampled function, available at arbitrary
    points through periodic spline interpolation."""

    def __init__(self, field: GridField, order: int = 5):
        self.field = field
        self.grid = field.grid
        self.order = order
        self._cache = {}

    def partial(self, alpha, pts) -> np.ndarray:
        alpha = tuple(alpha)
        if alpha not in self._cache:
            vals = spectral_partial(self.field.values, self.grid, alpha)
            self._cache[alpha] = PeriodicSpline(vals, self.grid, self.order)
        return self._cache[alpha](pts)

    def grad(self, pts) -> np.ndarray:
        d = self.grid.dim
        return np.array([self.partial(np.eye(d, dtype=int)[i], pts) for i in range(d)])

    def hessian(self, pts, axes) -> np.ndarray:
        k = len(axes)
        H = np.empty((k, k) + np.shape(pts)[1:])
        for a in range(k):
            for b in range(a, k):
                alpha = [0] * self.grid.dim
                alpha[axes[a]] += 1
                alpha[axes[b]] += 1
                H[a, b] = H[b, a] = self.partial(alpha, pts)
        return H


def classify_zero_set(f: Expression, gamma: CriticalSet, grid: TorusGrid,
                      hessian_rel_tol: float = 1e-6, near_cells: int = 4) -> list:
    """Classify every component as MorseBott0, NonCritical or Invalid.

    Raises ZeroSetMismatch when f does not vanish on a declared component and
    NotIndexZero when f takes both signs next to a would-be Morse-Bott zero.
    """
    field_ = GridField(grid, f(grid.nodes()))
    sup = float(np.max(np.abs(field_.values)))
    if sup == 0:
        raise ZeroSetMismatch("f vanishes identically")
    P = max(grid.period)
    zero_tol = 1e-10 * sup
    grad_tol = 1e-6 * sup / P
    hess_tol = hessian_rel_tol * sup / P ** 2
    D = Derivatives(field_)
    nodes = grid.points()
    out = []
    for comp in gamma:
        pts = comp.samples(grid)
        fv = f(pts)
        if np.max(np.abs(fv)) > zero_tol:
            raise ZeroSetMismatch(f"f does not vanish on {comp.name} "
                                  f"(max |f| = {np.max(np.abs(fv)):.3e})")
        axes = comp.normal_axes(grid.dim)
        g = D.grad(pts)
        gnorm = np.sqrt(np.sum(g ** 2, axis=0))
        result = None
        if comp.cls in ("auto", "morse-bott") and np.max(gnorm) <= grad_tol:
            H = D.hessian(pts, axes)
            eigs = np.array([np.linalg.eigvalsh(H[..., i]) for i in range(pts.shape[1])])
            lo = float(np.min(eigs))
            if lo < -hess_tol:
                raise NotIndexZero(f"normal Hessian of {comp.name} has a negative eigenvalue")
            if lo < hess_tol:
                result = ComponentClass("Invalid", "vanishing Hessian (degenerate zero)", min_eig=lo)
            else:
                near = comp.distance(nodes, grid) <= near_cells * np.max(grid.spacing)
                if np.any(field_.values.ravel()[near] < -zero_tol):
                    raise NotIndexZero(f"f changes sign next to {comp.name}")
                result = ComponentClass("MorseBott0", min_eig=lo)
        elif comp.cls == "morse-bott":
            result = ComponentClass("Invalid", "gradient does not vanish on a Morse-Bott component")
        if result is None:
            if np.max(gnorm) <= grad_tol and comp.cls == "auto":
                result = ComponentClass("Invalid", "vanishing gradient and Hessian")
            elif len(axes) != 1:
                result = ComponentClass("Invalid", "a non-critical zero set must be a hypersurface")
            else:
                slope = g[axes[0]]
                tang_ok = len(g) == 1 or np.max(np.abs(g[1 - axes[0]])) <= grad_tol
                if np.min(np.abs(slope)) < grad_tol:
                    result = ComponentClass("Invalid", "normal derivative vanishes (not transverse)")
                elif np.min(slope) * np.max(slope) <= 0 or not tang_ok:
                    result = ComponentClass("Invalid", "normal derivative changes sign along the component")
                else:
                    result = ComponentClass("NonCritical", normal_slope=float(np.mean(slope)))
        out.append(result)
    return out


def validate_pair(scenario: Scenario) -> tuple:
    """Classify f0 and f1 and check that they agree component by component."""
    grid = scenario.grid
    tol = scenario.solver.hessian_rel_tol
    c0 = classify_zero_set(scenario.f0, scenario.gamma, grid, tol)
    c1 = classify_zero_set(scenario.f1, scenario.gamma, grid, tol)
    for comp, a, b in zip(scenario.gamma, c0, c1):
        for which, c in (("f0", a), ("f1", b)):
            if not c.valid:
                raise InvalidZeroSet(f"{which} on {comp.name}: {c.reason}")
        if a.kind != b.kind:
            raise InvalidZeroSet(f"{comp.name}: f0 is {a.kind} but f1 is {b.kind}")
        if a.kind == "NonCritical" and np.sign(a.normal_slope) != np.sign(b.normal_slope):
            raise InvalidZeroSet(f"{comp.name}: folded forms have opposite orientation")
    _check_no_stray_zeros(scenario)
    return c0, c1


def _check_no_stray_zeros(scenario: Scenario):
    grid = scenario.grid
    nodes = grid.nodes()
    off = scenario.gamma.distance(nodes, grid) >= np.max(grid.spacing) * (1 - 1e-9)
    f0, f1 = scenario.f0(nodes), scenario.f1(nodes)
    tol0, tol1 = 1e-10 * np.max(np.abs(f0)), 1e-10 * np.max(np.abs(f1))
    bad = off & ~((f0 * f1 > 0) & (np.abs(f0) > tol0) & (np.abs(f1) > tol1))
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ZeroSetMismatch(f"f0 or f1 vanishes or changes sign off the declared zero set (node {idx})")


# ---------------------------------------------------------------------------
# components of M minus Gamma

@dataclass(frozen=True)
class ComponentLabels:
    labels: np.ndarray          # 0 on masked nodes, 1..n on components
    names: tuple
    full: np.ndarray = None     # labels extended to every node off Gamma

    @property
    def count(self) -> int:
        return len(self.names)

    def mask(self, i: int) -> np.ndarray:
        return self.labels == i + 1

    def volume_mask(self, i: int) -> np.ndarray:
        """Nodes integrated over for component ``i``: the flood-fill mask plus
        the nodes next to Gamma on its side."""
        return (self.full if self.full is not None else self.labels) == i + 1


def label_components(gamma: CriticalSet, grid: TorusGrid) -> ComponentLabels:
    """Flood fill of the nodes farther than one cell from Gamma (periodic,
    nearest-neighbour connectivity)."""
    nodes = grid.nodes()
    free = gamma.distance(nodes, grid) >= np.max(grid.spacing) * (1 - 1e-9)
    lab, n = ndimage.label(free)
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ax in range(grid.dim):
        first = np.take(lab, 0, axis=ax)
        last = np.take(lab, -1, axis=ax)
        for a, b in zip(np.ravel(first), np.ravel(last)):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n + 1)])
    merged = roots[lab]
    order = []
    for v in merged.ravel():
        if v and v not in order:
            order.append(v)
    relabel = np.zeros(n + 1, dtype=int)
    for i, v in enumerate(order):
        relabel[v] = i + 1
    labels = relabel[merged]
    names = tuple(_component_name(labels == i + 1, gamma, grid) for i in range(len(order)))
    full = labels.copy()
    near = (labels == 0) & (gamma.distance(nodes, grid) > 1e-12) if len(gamma) else labels == 0
    if np.any(near):
        if len(names) == 1:
            full[near] = 1
        else:
            idx = np.argwhere(near)
            for k in idx:
                one = np.zeros(grid.shape, dtype=bool)
                one[tuple(k)] = True
                name = _component_name(one, gamma, grid)
                if name in names:
                    full[tuple(k)] = names.index(name) + 1
    return ComponentLabels(labels, names, full)


def _component_name(mask, gamma: CriticalSet, grid: TorusGrid) -> str:
    cuts = [c for c in gamma if c.codim(grid.dim) == 1]
    if not cuts:
        return "M"
    if grid.dim == 1:
        axis, key = 0, ""
    else:
        axis = cuts[0].normal_axes(2)[0]
        key = "xy"[axis] + ":"
    P = grid.period[axis]
    levels = sorted({c.loc[0] % P for c in cuts})
    coord = grid.nodes()[axis][mask]
    rep = coord.ravel()[0]
    for i, lo in enumerate(levels):
        hi = levels[i + 1] if i + 1 < len(levels) else levels[0] + P
        if lo < rep < hi or lo < rep + P < hi:
            return f"{key}({_fmt(lo)},{_fmt(hi)})"
    return f"{key}({_fmt(levels[0])},{_fmt(levels[0] + P)})"


# ---------------------------------------------------------------------------
# volume tests

@dataclass(frozen=True)
class CohomologyVerdict:
    names: tuple
    volumes0: tuple
    volumes1: tuple
    mode: str                     # "total" (codim >= 2) or "per-component"
    tolerance: float

    @property
    def discrepancies(self) -> tuple:
        return tuple(b - a for a, b in zip(self.volumes0, self.volumes1))

    @property
    def failing(self) -> list:
        return [n for n, d in zip(self.names, self.discrepancies) if abs(d) > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing


def cohomology_check(scenario: Scenario, strict: bool = True) -> CohomologyVerdict:
    """Compare volumes of f0 and f1: the total volume when every zero-set
    component has codimension >= 2, signed per-component volumes otherwise."""
    grid = scenario.grid
    F0, F1 = scenario.sample(0), scenario.sample(1)
    codim1 = any(c.codim(grid.dim) == 1 for c in scenario.gamma)
    if codim1:
        labels = label_components(scenario.gamma, grid)
        names = labels.names
        v0 = tuple(integrate(F0, labels.volume_mask(i)) for i in range(labels.count))
        v1 = tuple(integrate(F1, labels.volume_mask(i)) for i in range(labels.count))
        mode = "per-component"
    else:
        names, v0, v1, mode = ("M",), (integrate(F0),), (integrate(F1),), "total"
    verdict = CohomologyVerdict(names, v0, v1, mode, scenario.solver.volume_tol)
    if strict and not verdict.passed:
        bad = verdict.failing
        disc = [d for n, d in zip(names, verdict.discrepancies) if n in bad]
        msg = "; ".join(f"{n}: volumes {a:.12g} vs {b:.12g}"
                        for n, a, b in zip(names, v0, v1) if n in bad)
        err = CohomologyMismatch(f"volume mismatch on {msg}", bad, disc)
        err.verdict = verdict
        raise err
    return verdict
