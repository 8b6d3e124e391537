"""End-to-end construction of ``Phi`` for a validated scenario."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .bump import BumpProfile
from .errors import MBError
from .geometry import GridField, PeriodicSpline, TransportMap, compose, det_of, evaluator_jacobian
from .moser_global import (STENCIL_REACH, check_interpolation, compose_pipeline, global_primitive,
                           global_step, normalize_per_component, relative_correction)
from .moser_local import glue_and_flow, homotopy_primitive
from .normal_form import ChartPlan, build_chart, equalize_functions
from .scenario import (Derivatives, Scenario, cohomology_check, label_components,
                       validate_pair)


@dataclass
class PipelineResult:
    scenario: Scenario
    F: TransportMap
    G: TransportMap
    H: TransportMap
    phi: TransportMap
    FG: TransportMap
    omega: tuple
    omega_tilde: tuple
    chart_radius: float
    timings: dict = field(default_factory=dict)
    # intermediate objects: plans, phi (density ratio after F), primitives,
    # bumps, rel (corrected global primitive), psi, delta
    extras: dict = field(default_factory=dict, repr=False)


def chart_radius(scenario: Scenario) -> float:
    grid = scenario.grid
    sep = scenario.gamma.min_separation(grid) if len(scenario.gamma) else 1.0
    return scenario.solver.tube_radius_frac * sep / 2


# radii (relative to the chart radius) of the core where the global step is
# switched off, and of the bump gluing the local step
CORE = (0.0625, 0.125)
G_BUMP = (0.125, 1.0)

# RK4 steps of the flow-matching ODE behind the radial normal form; the ODE is
# smooth and 64 steps reach round-off level
EMBEDDING_STEPS = 64

# conductivity inside the tubes relative to outside for the weighted primitive
TUBE_CONDUCTIVITY = 1e-3


def primitive_weight(f0_values: np.ndarray, plans, R: float,
                     eps: float = TUBE_CONDUCTIVITY) -> np.ndarray:
    """``|f0|`` lowered by the factor ``eps`` within half the chart radius, so
    that the flux of the primitive bypasses the tubes."""
    grid_pts = None
    s = np.ones(f0_values.size)
    for plan in plans:
        if grid_pts is None:
            grid_pts = plan.chart.grid.points()
        s -= (1 - eps) * BumpProfile(G_BUMP[0] * R, G_BUMP[1] * R)(plan.chart.distance(grid_pts))
    return np.abs(f0_values) * s.reshape(f0_values.shape)


def _samples_equal(scenario: Scenario) -> bool:
    return scenario.f0.canonical() == scenario.f1.canonical()


@contextmanager
def _stage(name: str, timings: dict):
    """Time a stage and tag errors raised inside it with its name."""
    t = time.perf_counter()
    try:
        yield
    except MBError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise
    finally:
        timings[name] = time.perf_counter() - t


def validate_scenario(scenario: Scenario) -> tuple:
    """Classification of both forms plus the volume test; returns the
    per-component classes of ``f0`` and ``f1``."""
    classes = validate_pair(scenario)
    cohomology_check(scenario)
    return classes


def solve(scenario: Scenario, validated: bool = False) -> PipelineResult:
    """Validate, then run F, G and H and compose them."""
    grid = scenario.grid
    sp = scenario.solver
    timings = {}
    with _stage("validate", timings):
        classes, classes1 = validate_pair(scenario)
        if not validated:
            cohomology_check(scenario)

    R = chart_radius(scenario)
    f0, f1 = scenario.f0, scenario.f1
    pts = grid.points()
    on_gamma = scenario.gamma.distance(pts, grid) < 1e-12 if len(scenario.gamma) \
        else np.zeros(grid.size, dtype=bool)
    s0, s1 = scenario.sample(0), scenario.sample(1)
    f0n = s0.values.reshape(-1)

    with _stage("F", timings):
        sep = scenario.gamma.min_separation(grid) if len(scenario.gamma) else None
        plans = []
        for comp, cls in zip(scenario.gamma, classes1):
            ch = build_chart(comp, grid, R, sep)
            plans.append(ChartPlan(ch, cls.kind, float(np.sign(cls.normal_slope))
                                   if cls.kind == "NonCritical" else 1.0))
        identical = _samples_equal(scenario)
        needs_nf = any(p.kind == "MorseBott0" and p.chart.codim >= 2 for p in plans) \
            and not identical
        d0 = Derivatives(s0) if needs_nf else None
        d1 = Derivatives(s1) if needs_nf else None
        F = equalize_functions(f0, f1, plans, grid, d0, d1, sp.quad_nodes, steps=EMBEDDING_STEPS)

    with _stage("G", timings):
        with np.errstate(divide="ignore", invalid="ignore"):
            g = f1(F.targets.reshape(grid.dim, -1)) / f0n
        g[on_gamma] = 1.0
        detF = det_of(evaluator_jacobian(F, pts))
        phi = PeriodicSpline((g * detF).reshape(grid.shape), grid)
        prims = []
        for i, plan in enumerate(plans):
            nf = None
            if plan.chart.codim >= 2 and not identical:
                nf = F.evaluator.forms[i][0]
            prims.append(homotopy_primitive(plan.chart, f0, phi, nf, 2 * sp.quad_nodes))
        bumps = [BumpProfile(G_BUMP[0] * R, G_BUMP[1] * R) for _ in plans]
        G = glue_and_flow(prims, bumps, grid, sp.flow_steps, phi)

    with _stage("H", timings):
        FG = compose(F, G)
        zeta1 = f1(FG.targets.reshape(grid.dim, -1)) * det_of(evaluator_jacobian(FG, pts))
        with np.errstate(divide="ignore", invalid="ignore"):
            psi_vals = zeta1 / f0n
        psi_vals[on_gamma] = 1.0
        off_core = np.ones(grid.size, dtype=bool)
        for plan in plans:
            off_core &= plan.chart.distance(pts) > CORE[0] * R
        check_interpolation(f0n, zeta1, off_core & ~on_gamma)
        delta = f0n - zeta1
        delta[on_gamma] = 0.0
        labels = label_components(scenario.gamma, grid)
        mass_weight = s0.values
        if grid.dim == 1:
            # G has equalized on the cores, and in 1D omega~ can differ from
            # omega only by a constant; the cell rule reads past the core, so
            # the mask reaches that far
            core = np.zeros(grid.size, dtype=bool)
            reach = CORE[1] * R + STENCIL_REACH * grid.spacing[0]
            for plan in plans:
                core |= plan.chart.distance(pts) < reach
            delta[core] = 0.0
            mass_weight = np.where(core.reshape(grid.shape), 0.0, s0.values)
        delta = normalize_per_component(delta.reshape(grid.shape), mass_weight, labels, grid)
        gamma_pts = [c.loc[0] for c in scenario.gamma] if grid.dim == 1 else ()
        weight = primitive_weight(s0.values, plans, R) if grid.dim == 2 else None
        omega = global_primitive(GridField(grid, delta), gamma_pts, weight=weight)
        rel = relative_correction(omega, [p.chart for p in plans], sp.quad_nodes, core=CORE)
        psi = PeriodicSpline(psi_vals.reshape(grid.shape), grid)
        H = global_step(rel, f0, psi, grid, sp.flow_steps)

    with _stage("compose", timings):
        Phi = compose_pipeline(F, G, H)
    extras = dict(plans=plans, phi=phi, primitives=prims, bumps=bumps, rel=rel, psi=psi,
                  delta=delta)
    return PipelineResult(scenario, F, G, H, Phi, FG, rel.omega.coeffs, rel.on_nodes(), R,
                          timings, extras)
