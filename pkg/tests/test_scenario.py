from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbmoser.errors import (CohomologyMismatch, InvalidZeroSet, NotIndexZero, ScenarioError,
                            ZeroSetMismatch)
from mbmoser.expression import parse_expression
from mbmoser.geometry import TorusGrid
from mbmoser.scenario import (CriticalSet, classify_zero_set, cohomology_check,
                              label_components, make_scenario, parse_component,
                              parse_scenario, validate_pair)

PI = np.pi


def gamma_of(dim, *specs):
    return CriticalSet(tuple(parse_component(s, dim) for s in specs))


def kinds(text, dim, specs, n=128):
    f = parse_expression(text, ("x", "y")[:dim])
    return [c.kind for c in classify_zero_set(f, gamma_of(dim, *specs), TorusGrid(dim, n))]


# -- classification ---------------------------------------------------------

def test_morse_bott_hessian():
    f = parse_expression("sin(pi*x)^2", ("x",))
    (c,) = classify_zero_set(f, gamma_of(1, "point1d:0"), TorusGrid(1, 128))
    assert c.kind == "MorseBott0"
    assert abs(c.min_eig - 2 * PI ** 2) < 1e-8


def test_folded_both_points():
    assert kinds("sin(2*pi*x)", 1, ["point1d:0", "point1d:0.5"]) == ["NonCritical"] * 2


def test_quartic_invalid():
    f = parse_expression("sin(pi*x)^4", ("x",))
    (c,) = classify_zero_set(f, gamma_of(1, "point1d:0"), TorusGrid(1, 128))
    assert c.kind == "Invalid" and "Hessian" in c.reason


def test_zero_set_mismatch():
    with pytest.raises(ZeroSetMismatch):
        kinds("1 + sin(pi*x)^2", 1, ["point1d:0"])


def test_saddle_not_index_zero():
    with pytest.raises(NotIndexZero):
        kinds("cos(2*pi*x) - cos(2*pi*y)", 2, ["point:0,0"])


def test_2d_point_and_circles():
    f0 = "(1-cos(2*pi*(x-0.5))) + (1-cos(2*pi*(y-0.5)))"
    assert kinds(f0, 2, ["point:0.5,0.5"], 64) == ["MorseBott0"]
    assert kinds("sin(2*pi*y)^2", 2, ["circle-y:0", "circle-y:0.5"], 64) == ["MorseBott0"] * 2
    assert kinds("sin(2*pi*y)", 2, ["circle-y:0", "circle-y:0.5"], 64) == ["NonCritical"] * 2


def test_point_cannot_be_folded():
    assert kinds("sin(2*pi*x)", 2, ["point:0,0"], 64) == ["Invalid"]


def test_mixed_types():
    # quadratic zero at 0 where cos > 0, sign changes at 1/4 and 3/4
    f = "(1 - cos(2*pi*x))*cos(2*pi*x)"
    assert kinds(f, 1, ["point1d:0", "point1d:0.25", "point1d:0.75"]) == \
        ["MorseBott0", "NonCritical", "NonCritical"]


def test_circles_quadratic_and_folded():
    assert kinds("sin(pi*y)^2*(2 + cos(2*pi*x))", 2, ["circle-y:0"], 64) == ["MorseBott0"]


@given(st.floats(0.01, 100.0))
@settings(max_examples=25, deadline=None)
def test_classification_scale_invariant(c):
    grid = TorusGrid(1, 128)
    g = gamma_of(1, "point1d:0", "point1d:0.5")
    for text in ("sin(2*pi*x)", "sin(2*pi*x)^2"):
        f = parse_expression(text, ("x",))
        a = [k.kind for k in classify_zero_set(f, g, grid)]
        b = [k.kind for k in classify_zero_set(f.scaled(c), g, grid)]
        assert a == b


def test_validate_pair_rejects_degenerate_f1():
    s = make_scenario(1, 128, "sin(pi*x)^2", "sin(pi*x)^4", ["point1d:0"])
    with pytest.raises(InvalidZeroSet):
        validate_pair(s)


def test_validate_pair_rejects_opposite_folds():
    s = make_scenario(1, 128, "sin(2*pi*x)", "-sin(2*pi*x)", ["point1d:0", "point1d:0.5"])
    with pytest.raises(InvalidZeroSet):
        validate_pair(s)


def test_validate_pair_rejects_stray_zero():
    s = make_scenario(1, 128, "sin(2*pi*x)^2", "sin(2*pi*x)^2", ["point1d:0"])
    with pytest.raises(ZeroSetMismatch):
        validate_pair(s)


# -- components -------------------------------------------------------------

def test_labels_point_2d():
    grid = TorusGrid(2, 32)
    lab = label_components(gamma_of(2, "point:0.5,0.5"), grid)
    assert lab.count == 1
    pts = grid.points()
    near = np.sqrt(np.sum(grid.shortest(pts - 0.5) ** 2, axis=0)) < grid.spacing[0] * (1 - 1e-9)
    assert np.array_equal(lab.mask(0).ravel(), ~near)


def test_labels_1d_two_points():
    lab = label_components(gamma_of(1, "point1d:0", "point1d:0.5"), TorusGrid(1, 64))
    assert lab.count == 2
    assert set(lab.names) == {"(0,0.5)", "(0.5,1)"}
    x = TorusGrid(1, 64).points()[0]
    for i, name in enumerate(lab.names):
        xs = x[lab.mask(i)]
        assert np.all((xs > 0) & (xs < 0.5)) if name == "(0,0.5)" else np.all(xs > 0.5)


def test_labels_parallel_circles():
    grid = TorusGrid(2, 16)
    lab = label_components(gamma_of(2, "circle-y:0.25", "circle-y:0.75"), grid)
    assert lab.count == 2
    # oracle: bands are decided by the y coordinate alone
    y = grid.nodes()[1]
    for i in range(2):
        ys = y[lab.mask(i)]
        assert np.all((ys > 0.25) & (ys < 0.75)) or np.all((ys < 0.25) | (ys > 0.75))


@pytest.mark.parametrize("specs, dim", [(["point1d:0", "point1d:0.5"], 1),
                                        (["circle-y:0.25", "circle-y:0.75"], 2),
                                        (["point:0.5,0.5"], 2)])
def test_labels_refinement_invariant(specs, dim):
    g = gamma_of(dim, *specs)
    a, b = TorusGrid(dim, 32), TorusGrid(dim, 64)
    la, lb = label_components(g, a), label_components(g, b)
    assert la.count == lb.count and la.names == lb.names
    for i in range(la.count):
        va = la.mask(i).sum() * a.cell_volume
        vb = lb.mask(i).sum() * b.cell_volume
        assert abs(va - vb) <= 4 * a.spacing[0]


# -- cohomology -------------------------------------------------------------

def test_cohomology_identical():
    s = make_scenario(1, 128, "sin(pi*x)^2", "sin(pi*x)^2", ["point1d:0"])
    v = cohomology_check(s)
    assert v.passed and all(d == 0 for d in v.discrepancies)


def test_cohomology_morse_bott_1d():
    s = make_scenario(1, 512, "sin(pi*x)^2", "sin(pi*x)^2*(1 + 0.3*sin(2*pi*x))", ["point1d:0"])
    v = cohomology_check(s)
    assert v.passed and abs(v.volumes0[0] - 0.5) < 1e-12


def test_cohomology_folded_mismatch():
    s = make_scenario(1, 512, "sin(2*pi*x)", "sin(2*pi*x)*(1 + 0.3*sin(2*pi*x))",
                      ["point1d:0", "point1d:0.5"])
    with pytest.raises(CohomologyMismatch) as info:
        cohomology_check(s)
    assert "(0,0.5)" in info.value.components
    v = info.value.verdict
    i = v.names.index("(0,0.5)")
    # closed form: int_0^(1/2) sin = 1/pi and int_0^(1/2) 0.3 sin^2 = 0.075;
    # the rectangle rule on an arc is second order for sin, whose slope jumps
    # at the ends, but the difference 0.3 sin^3 has flat ends
    assert abs(v.volumes0[i] - 1 / PI) < (1 / 512) ** 2 * 4 * PI / 12 * 1.01
    assert abs(v.discrepancies[i] - 0.075) < 1e-12


def test_cohomology_total_mode_for_points():
    f0 = "(1-cos(2*pi*(x-0.5))) + (1-cos(2*pi*(y-0.5)))"
    s = make_scenario(2, 32, f0, f"({f0})*(1 + 0.2*sin(2*pi*x)*sin(2*pi*y))", ["point:0.5,0.5"])
    v = cohomology_check(s)
    assert v.mode == "total" and v.passed and abs(v.volumes0[0] - 2.0) < 1e-12


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
@settings(max_examples=30, deadline=None)
def test_cohomology_iff_component_integrals(a, b):
    # sin(2 pi x) sin(4 pi x) integrates to zero on both arcs, sin(2 pi x)^2
    # gives b/4 on each
    f1 = f"sin(2*pi*x)*(1 + {a!r}*sin(4*pi*x) + {b!r}*sin(2*pi*x))"
    s = make_scenario(1, 256, "sin(2*pi*x)", f1, ["point1d:0", "point1d:0.5"])
    v = cohomology_check(s, strict=False)
    expected = abs(b) * 0.25 <= s.solver.volume_tol
    assert v.passed == expected


# -- scenario files ---------------------------------------------------------

GOOD = """
# comment
[grid]
dim = 2
resolution = 64
period = 1.0
[forms]
f0 = "sin(2*pi*y)^2"   # trailing comment
f1 = "sin(2*pi*y)^2"
[gamma]
class = morse-bott
component = "circle-y:0.0"
component = "circle-y:0.5"
class = auto
[solver]
flow_steps = 32
tube_radius_frac = 0.3
"""


def test_parse_scenario_file():
    s = parse_scenario(GOOD)
    assert s.dim == 2 and s.resolution == (64, 64)
    assert [c.cls for c in s.gamma] == ["morse-bott", "auto"]
    assert s.solver.flow_steps == 32 and s.solver.tube_radius_frac == 0.3
    assert s.digest() == parse_scenario(GOOD).digest()


@pytest.mark.parametrize("bad", [
    GOOD.replace("flow_steps", "flowsteps"),
    GOOD.replace("[solver]", "[solvers]"),
    GOOD.replace("tube_radius_frac = 0.3", "tube_radius_frac = 0.5"),
    GOOD.replace("dim = 2", "dim = 3"),
    GOOD.replace("flow_steps = 32", "flow_steps = 8"),
    GOOD.replace('f1 = "sin(2*pi*y)^2"', ""),
    GOOD.replace("class = auto", "class = weird"),
    GOOD.replace('"circle-y:0.5"', '"circle-y:0.03"'),
])
def test_parse_scenario_rejects(bad):
    with pytest.raises(ScenarioError):
        parse_scenario(bad)


def test_overrides():
    s = parse_scenario(GOOD).with_overrides(resolution=128, quad_nodes=8)
    assert s.resolution == (128, 128) and s.solver.quad_nodes == 8
    with pytest.raises(ScenarioError):
        parse_scenario(GOOD).with_overrides(tube_radius_frac=0.7)
