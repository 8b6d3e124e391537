from __future__ import annotations

import functools
import time

import numpy as np
import pytest

from mbmoser.pipeline import solve
from mbmoser.scenario import make_scenario

F0_POINT = "(1-cos(2*pi*(x-0.5))) + (1-cos(2*pi*(y-0.5)))"

SCENARIOS = {
    "mb1d": lambda n, k: make_scenario(1, n, "sin(pi*x)^2", "sin(pi*x)^2*(1 + 0.3*sin(2*pi*x))",
                                       ["point1d:0"], flow_steps=k),
    "fold1d": lambda n, k: make_scenario(1, n, "sin(2*pi*x)", "sin(2*pi*x)*(1 + 0.3*cos(2*pi*x))",
                                         ["point1d:0", "point1d:0.5"], flow_steps=k),
    "point2d": lambda n, k: make_scenario(2, n, F0_POINT,
                                          f"({F0_POINT})*(1 + 0.2*sin(2*pi*x)*sin(2*pi*y))",
                                          ["point:0.5,0.5"], flow_steps=k),
}


def scenario(name: str, n: int, steps: int = 128):
    return SCENARIOS[name](n, steps)


@functools.lru_cache(maxsize=None)
def solved(name: str, n: int, steps: int = 128):
    """Pipeline result and wall time, computed once per session."""
    s = scenario(name, n, steps)
    t = time.perf_counter()
    r = solve(s)
    return r, time.perf_counter() - t


@pytest.fixture(scope="session")
def point2d():
    return solved("point2d", 128, 128)[0]


@pytest.fixture(scope="session")
def mb1d():
    return solved("mb1d", 512, 128)[0]


@pytest.fixture(scope="session")
def fold1d():
    return solved("fold1d", 512, 128)[0]


# eighth-order centred first difference, offsets 1..4
_D8 = ((1, 4 / 5), (2, -1 / 5), (3, 4 / 105), (4, -1 / 280))


def primitive_defect(prim, f, phi, reach: float = 1.0) -> float:
    """Largest ``|d(f beta) + f (phi - 1)|`` over nodes whose difference
    stencil stays within ``reach`` chart radii; ``d`` is taken by eighth-order
    centred differences of the node values of ``f nu``."""
    grid = prim.chart.grid
    pts = grid.points()
    fv = f(pts).reshape(grid.shape)
    nu = prim.nu_grid()
    div = np.zeros(grid.shape)
    for ax in range(grid.dim):
        a = fv * nu[ax]
        div += sum(c * (np.roll(a, -k, ax) - np.roll(a, k, ax)) for k, c in _D8) / grid.spacing[ax]
    d = div.ravel() + fv.ravel() * (phi(pts) - 1)
    inside = prim.chart.distance(pts) + 4 * np.max(grid.spacing) < reach * prim.chart.radius
    return float(np.max(np.abs(d[inside])))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
