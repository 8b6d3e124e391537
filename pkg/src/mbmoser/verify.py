"""Verification: pullback residuals, the 1D transport oracle, reports and the
run modes behind the command line."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CohomologyMismatch, MBError, ValidationError
from .geometry import GridField, TorusGrid, TransportMap, compose, det_of, jacobian_matrix
from .gridio import read_field, write_field
from .scenario import (Scenario, classify_zero_set, cohomology_check, label_components,
                       validate_pair)

AXES = "xy"


# ---------------------------------------------------------------------------
# residuals

@dataclass(frozen=True)
class Residual:
    sup: float
    l1: float
    values: np.ndarray


def pullback_residual(phi: TransportMap, f0, f1) -> Residual:
    """``r = (f1 o Phi) det DPhi - f0`` at the nodes, with the Jacobian taken
    by centred differences of the sampled targets."""
    grid = phi.grid
    tg = phi.targets.reshape(grid.dim, -1)
    det = det_of(jacobian_matrix(grid, phi.targets)).reshape(-1)
    r = f1(tg) * det - f0(grid.points())
    return Residual(float(np.max(np.abs(r))), float(np.abs(r).sum() * grid.cell_volume),
                    r.reshape(grid.shape))


def sampled_map(grid: TorusGrid, targets: np.ndarray) -> TransportMap:
    """A map known only through its node targets (no exact evaluator)."""
    return TransportMap(grid, np.asarray(targets, dtype=float))


def gamma_fix_error(phi: TransportMap, scenario: Scenario) -> float:
    if not len(scenario.gamma):
        return 0.0
    grid = phi.grid
    pts = np.concatenate([c.samples(grid) for c in scenario.gamma], axis=1)
    moved = grid.shortest(phi(pts) - pts)
    return float(np.max(np.abs(moved)))


# ---------------------------------------------------------------------------
# 1D oracle

class _Cumulative:
    """``H(x) = int_0^x f`` for a smooth periodic ``f`` from its Fourier
    series, trimmed to the modes above round-off."""

    def __init__(self, f, period: float, samples: int):
        x = np.arange(samples) * period / samples
        c = np.fft.rfft(f(x[None])) / samples
        keep = np.nonzero(np.abs(c) > 1e-15 * np.max(np.abs(c)))[0]
        kmax = int(keep.max()) + 1 if keep.size else 1
        self.mean = float(c[0].real)
        self.k = 2 * np.pi * np.arange(1, kmax) / period
        self.c = 2 * c[1:kmax]
        self.f = f

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ph = np.exp(1j * np.multiply.outer(x, self.k)) - 1.0
        return self.mean * x + np.real(ph @ (self.c / (1j * self.k)))

    def density(self, x) -> np.ndarray:
        return self.f(np.asarray(x, dtype=float)[None])


def _invert_monotone(H: _Cumulative, target, lo, hi, tol=1e-12, iters=200):
    """Solve ``H(p) = target`` with ``p`` in ``[lo, hi]`` where ``H`` is
    monotone: bisection down to a small bracket, then guarded Newton."""
    target = np.asarray(target, dtype=float)
    a = np.full_like(target, lo)
    b = np.full_like(target, hi)
    sgn = np.sign(H(np.array([hi]))[0] - H(np.array([lo]))[0]) or 1.0
    for _ in range(iters):
        m = 0.5 * (a + b)
        up = sgn * (H(m) - target) < 0
        a, b = np.where(up, m, a), np.where(up, b, m)
        if np.max(b - a) < 1e-7 * (hi - lo):
            break
    p = 0.5 * (a + b)
    for _ in range(8):
        d = H.density(p)
        step = np.where(d != 0, (H(p) - target) / np.where(d != 0, d, 1.0), 0.0)
        q = p - step
        q = np.where((q >= a) & (q <= b), q, p)
        done = np.max(np.abs(q - p)) < tol
        p = q
        if done:
            break
    return p


def oracle_1d(scenario: Scenario, samples: Optional[int] = None) -> TransportMap:
    """Unique component-preserving solution of ``(f1 o Phi) Phi' = f0`` in 1D.

    On each arc between consecutive zero-set points the map is
    ``H1^-1 o H0`` with cumulative integrals from the left endpoint; the
    endpoints stay fixed.  Without a zero set the origin is the anchor.
    """
    grid = scenario.grid
    if grid.dim != 1:
        raise ValueError("the oracle is one-dimensional")
    P = grid.period[0]
    M = samples or max(4096, 8 * grid.resolution[0])
    H0 = _Cumulative(scenario.f0, P, M)
    H1 = _Cumulative(scenario.f1, P, M)
    cuts = sorted({float(c.loc[0]) % P for c in scenario.gamma}) or [0.0]
    x = grid.points()[0]
    out = x.copy()
    for i, lo in enumerate(cuts):
        hi = cuts[i + 1] if i + 1 < len(cuts) else cuts[0] + P
        m0, m1 = H0(np.array([hi]))[0] - H0(np.array([lo]))[0], \
            H1(np.array([hi]))[0] - H1(np.array([lo]))[0]
        if abs(m0 - m1) > scenario.solver.volume_tol:
            raise CohomologyMismatch(f"arc ({lo:g},{hi:g}) masses {m0:.12g} vs {m1:.12g}",
                                     [f"({lo:g},{hi:g})"], [m1 - m0])
        xs = np.where(x < lo, x + P, x)
        sel = (xs > lo) & (xs < hi)
        target = H1(np.array([lo]))[0] + H0(xs[sel]) - H0(np.array([lo]))[0]
        out[sel] = _invert_monotone(H1, target, lo, hi)
    return TransportMap(grid, out.reshape((1,) + grid.shape))


def map_distance(a: TransportMap, b: TransportMap) -> float:
    return float(np.max(np.abs(a.grid.shortest(a.targets - b.targets))))


# ---------------------------------------------------------------------------
# report

@dataclass
class VerificationReport:
    """Ordered ``key = value`` summary of one run."""

    digest: str
    mode: str
    entries: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "pass"
    error: Optional[str] = None
    stage: Optional[str] = None
    category: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def lines(self) -> list:
        out = [("digest", self.digest), ("mode", self.mode), ("status", self.status)]
        if self.error:
            out += [("failed_stage", self.stage or "-"), ("error", self.error)]
        out += list(self.entries.items())
        out += [(f"invariant.{k}", "pass" if v else "fail") for k, v in self.invariants.items()]
        out += [(f"time.{k}", f"{v:.6f}") for k, v in self.timings.items()]
        return [f"{k} = {_fmt(v)}" for k, v in out]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.text())
        return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k.strip()] = v.strip()
    return out


def _core_mask(scenario: Scenario, R: float, frac: float) -> np.ndarray:
    grid = scenario.grid
    pts = grid.points()
    if not len(scenario.gamma):
        return np.zeros(grid.size, dtype=bool)
    return scenario.gamma.distance(pts, grid) <= frac * R


def map_summary(scenario: Scenario, phi: TransportMap, stages: Optional[dict] = None) -> tuple:
    """Measured quantities of a solved map, computed only from node targets
    so that a reloaded dump reproduces them exactly.  Returns the entries
    and invariant flags."""
    from .pipeline import G_BUMP, chart_radius
    from .normal_form import F_BLEND

    grid = scenario.grid
    phi = sampled_map(grid, phi.targets)
    res = pullback_residual(phi, scenario.f0, scenario.f1)
    entries = {}
    R = chart_radius(scenario)
    if stages:
        f0n = scenario.f0(grid.points())
        F = sampled_map(grid, stages["F"])
        core = _core_mask(scenario, R, F_BLEND[0])
        rF = np.abs(scenario.f1(F.targets.reshape(grid.dim, -1)) - f0n)
        entries["stage_F.residual_core"] = float(rF[core].max()) if core.any() else 0.0
        FG = compose(F, sampled_map(grid, stages["G"]))
        core = _core_mask(scenario, R, G_BUMP[0])
        rG = np.abs(pullback_residual(FG, scenario.f0, scenario.f1).values.reshape(-1))
        entries["stage_G.residual_core"] = float(rG[core].max()) if core.any() else 0.0
        entries["stage_H.residual"] = res.sup
    entries["residual.sup"] = res.sup
    entries["residual.l1"] = res.l1
    gfix = gamma_fix_error(phi, scenario)
    entries["gamma_fix_error"] = gfix
    entries["det.min"] = float(phi.det.min())
    entries["det.max"] = float(phi.det.max())
    labels = label_components(scenario.gamma, grid)
    dens = res.values + scenario.sample(0).values
    f0v = scenario.sample(0).values
    worst = 0.0
    if any(c.codim(grid.dim) == 1 for c in scenario.gamma):
        for i, name in enumerate(labels.names):
            m = labels.volume_mask(i)
            d = (dens[m].sum() - f0v[m].sum()) * grid.cell_volume
            entries[f"volume.{name}"] = float(d)
            worst = max(worst, abs(d))
    d = (dens.sum() - f0v.sum()) * grid.cell_volume
    entries["volume.total"] = float(d)
    worst = max(worst, abs(d))
    sp = scenario.solver
    inv = {
        "residual_within_tol": res.sup <= sp.residual_tol,
        "gamma_fixed": gfix <= 1e-9,
        "det_positive": bool(phi.det.min() > 0),
        "volume_conserved": worst <= 2 * sp.volume_tol,
    }
    return entries, inv


# ---------------------------------------------------------------------------
# dumps

def _dump_map(out: Path, name: str, m: np.ndarray, grid: TorusGrid, fmt: str):
    for i in range(grid.dim):
        write_field(out / f"{name}_{AXES[i]}", GridField(grid, m[i]), fmt)


def _dump_form(out: Path, name: str, coeffs, grid: TorusGrid, fmt: str):
    if grid.dim == 1:
        write_field(out / name, GridField(grid, coeffs[0], "form-coefficient"), fmt)
        return
    for i, c in enumerate(coeffs):
        write_field(out / f"{name}_{AXES[i]}", GridField(grid, c, "form-coefficient"), fmt)


def load_map(directory, scenario: Scenario, name: str = "phi") -> TransportMap:
    directory = Path(directory)
    grid = scenario.grid
    comps = []
    for i in range(grid.dim):
        stem = directory / f"{name}_{AXES[i]}"
        path = stem.with_suffix(".mbvf")
        if not path.exists():
            path = stem.with_suffix(".csv")
        fld = read_field(path, grid)
        if fld.grid != grid:
            raise ValidationError(f"{path.name} was written on a different grid")
        comps.append(fld.values)
    return TransportMap(grid, np.array(comps))


# ---------------------------------------------------------------------------
# run modes

def _fail(report: VerificationReport, exc: MBError, stage: str) -> VerificationReport:
    report.status = "fail"
    report.stage = getattr(exc, "stage", None) or stage
    report.error = f"{exc.tag}: {exc}"
    report.category = exc.category
    return report


def _check(scenario: Scenario, report: VerificationReport) -> None:
    grid = scenario.grid
    for which, f in (("f0", scenario.f0), ("f1", scenario.f1)):
        for comp, cls in zip(scenario.gamma, classify_zero_set(f, scenario.gamma, grid,
                                                               scenario.solver.hessian_rel_tol)):
            report.entries[f"class.{which}.{comp.name}"] = cls.kind
            if cls.reason:
                report.entries[f"class.{which}.{comp.name}.reason"] = cls.reason
    verdict = cohomology_check(scenario, strict=False)
    report.entries["cohomology.mode"] = verdict.mode
    for n, d in zip(verdict.names, verdict.discrepancies):
        report.entries[f"cohomology.discrepancy.{n}"] = float(d)
    validate_pair(scenario)
    cohomology_check(scenario)


def run(scenario: Scenario, mode: str, out_dir=None, map_dir=None, fmt: str = "bin"
        ) -> VerificationReport:
    """Execute one mode and return its report; failures are recorded in the
    report (``status = fail``) rather than raised."""
    from .pipeline import solve, validate_scenario

    report = VerificationReport(scenario.digest(), mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stage = "check"
    try:
        if mode == "check":
            _check(scenario, report)
        elif mode == "solve":
            stage = "validate"
            validate_scenario(scenario)
            stage = "pipeline"
            result = solve(scenario, validated=True)
            report.timings.update(result.timings)
            grid = scenario.grid
            stages = {"F": result.F.targets, "G": result.G.targets}
            entries, inv = map_summary(scenario, result.phi, stages)
            report.entries.update(entries)
            report.invariants.update(inv)
            if out is not None:
                for name, m in (("stage_F", result.F), ("stage_G", result.G),
                                ("stage_H", result.H), ("phi", result.phi)):
                    _dump_map(out, name, m.targets, grid, fmt)
                _dump_form(out, "omega", result.omega, grid, fmt)
                _dump_form(out, "omega_tilde", result.omega_tilde, grid, fmt)
        elif mode == "verify":
            if map_dir is None:
                raise ValueError("verify needs --map")
            stage = "load"
            try:
                phi = load_map(map_dir, scenario, "phi")
            except OSError as exc:
                raise ValidationError(f"cannot read the dumped map: {exc}") from exc
            stages = None
            try:
                stages = {"F": load_map(map_dir, scenario, "stage_F").targets,
                          "G": load_map(map_dir, scenario, "stage_G").targets}
            except (FileNotFoundError, MBError):
                stages = None
            stage = "verify"
            entries, inv = map_summary(scenario, phi, stages)
            report.entries.update(entries)
            report.invariants.update(inv)
        elif mode == "oracle1d":
            stage = "oracle"
            orc = oracle_1d(scenario)
            report.entries["oracle.gamma_fix_error"] = gamma_fix_error(orc, scenario)
            res = pullback_residual(orc, scenario.f0, scenario.f1)
            report.entries["oracle.residual.sup"] = res.sup
            if out is not None:
                _dump_map(out, "oracle", orc.targets, scenario.grid, fmt)
                solved = None
                try:
                    solved = load_map(out, scenario, "phi")
                except (FileNotFoundError, MBError):
                    pass
                if solved is not None:
                    d = map_distance(solved, orc)
                    report.entries["oracle.map_distance"] = d
                    report.invariants["oracle_agreement"] = d <= 1e-4
        else:
            raise ValueError(f"unknown mode {mode!r}")
    except MBError as exc:
        _fail(report, exc, stage)
    report.timings["total"] = time.perf_counter() - t0
    if report.status == "pass" and not all(report.invariants.values()):
        report.status = "fail"
        report.category = "numerical"
        report.stage = "invariants"
        bad = [k for k, v in report.invariants.items() if not v]
        report.error = "InvariantFailure: " + ", ".join(bad)
    if out is not None:
        report.write(out / ("report.txt" if mode == "solve" else f"report_{mode}.txt"))
    return report


def exit_code(report: VerificationReport) -> int:
    if report.passed:
        return 0
    return 2 if report.category == "validation" else 3
