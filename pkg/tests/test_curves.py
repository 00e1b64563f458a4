import json
import math

import numpy as np
import pytest

from separatrix_lab import _geometry
from separatrix_lab._validation import DomainError
from separatrix_lab.curves import (
    GraphCurve,
    continued_fraction,
    curve_hausdorff,
    find_translated_curve,
    hausdorff,
    integrable_guess,
    invariance_error,
    level_error,
    lift_circle,
    omega_menu,
    ring_psi,
    rotation_number,
    rotation_relation_check,
    solve_ring_curve,
    write_catalog,
    write_polyline_csv,
)
from separatrix_lab.model import build_model
from separatrix_lab.return_renorm import Renormalization, build_fundamental_domain

# Arnold map x + a + K/(2 pi) sin(2 pi x), a = 0.3819660113, K = 0.5:
# mean increment over 1e7 iterates from x = 0 in extended precision
ARNOLD_BRUTE = 0.3783097892928496


@pytest.fixture(scope="module")
def model():
    return build_model()


@pytest.fixture(scope="module")
def fd(model):
    return build_fundamental_domain(model)


@pytest.fixture(scope="module")
def ren0(model, fd):
    return Renormalization(model, fd)


@pytest.fixture(scope="module")
def ren3(model, fd, ren0):
    r = Renormalization(model.with_epsilon(1e-3), fd)
    r._table = ren0.table
    return r


@pytest.fixture(scope="module")
def lifted0(model, fd, ren0):
    res = solve_ring_curve(ren0, 8, omega_menu()[0])
    return res, lift_circle(model, fd, res.curve, 8)


@pytest.fixture(scope="module")
def lifted3(ren3, fd):
    res = solve_ring_curve(ren3, 8, omega_menu()[0])
    return res, lift_circle(ren3.model, fd, res.curve, 8)


def twist_psi(x, logy):
    # T_l with l(y) = -ln y on the ring fibers
    return x - logy, logy


# -- rotation numbers


def test_rigid_rotation():
    a = 0.3819660113
    r = rotation_number(lambda x: x + a, 0.0, 4000)
    assert abs(r.value - a) < 1e-12
    assert rotation_number(lambda x: x, 0.3, 100).value == 0.0


def test_arnold_map_against_brute_force():
    a, K = 0.3819660113, 0.5
    r = rotation_number(lambda x: x + a + K / (2 * math.pi) * math.sin(2 * math.pi * x), 0.0, 20000)
    assert abs(r.value - ARNOLD_BRUTE) < 1e-8
    assert r.error < 1e-10


def test_weighted_beats_plain():
    a, K = 0.3819660113, 0.5

    def lift(x):
        return x + a + K / (2 * math.pi) * math.sin(2 * math.pi * x)

    w = rotation_number(lift, 0.0, 4000)
    p = rotation_number(lift, 0.0, 4000, scheme="plain")
    assert abs(w.value - ARNOLD_BRUTE) < 0.01 * abs(p.value - ARNOLD_BRUTE)


def test_rotation_number_rejects_non_monotone():
    with pytest.raises(DomainError):
        rotation_number(lambda x: x + 0.3 + 0.5 * math.sin(2 * math.pi * x), 0.0, 100)
    with pytest.raises(DomainError):
        rotation_number(lambda x: 2 * x, 0.0, 100)


def test_rotation_number_with_period():
    r = rotation_number(lambda t: t + 1.0, 0.0, 2000, period=2.5)
    assert abs(r.value - 0.4) < 1e-12


# -- omega menu


def test_omega_menu_is_noble():
    menu = omega_menu()
    assert len(menu) == 30 and len(set(menu)) == 30
    assert menu[0] == pytest.approx(0.6180339887, abs=1e-10)
    for w in menu:
        assert 0 < w < 1
        cf = continued_fraction(w, 10)
        assert max(cf) <= 30
        assert all(c == 1 for c in cf[2:])


def test_continued_fraction():
    assert continued_fraction(0.25) == [0, 4]
    assert continued_fraction(1 / (7 + 0.6180339887498949), 6) == [0, 7, 1, 1, 1, 1]


# -- graph curves


def test_graph_of_sheared_embedding():
    K = 8
    p = np.zeros(2 * K + 1)
    p[1] = 0.05
    u = np.zeros(2 * K + 1)
    u[0], u[K + 1] = -0.5, 0.1
    c = GraphCurve(p, u)
    theta = np.linspace(0, 1, 33)
    x, y = c.embed(theta)
    np.testing.assert_allclose(c.graph(x), y, atol=1e-14)
    assert c.mean() == -0.5
    assert abs(c.graph_coefficients(64)[0] - np.mean(c.graph(np.arange(64) / 64))) < 1e-15


# -- solver


def test_integrable_half():
    res = find_translated_curve(twist_psi, 0.5, GraphCurve.constant(-0.4, 16))
    assert res.converged
    assert res.curve.mean() == pytest.approx(-0.5, abs=1e-12)
    assert math.exp(res.curve.mean()) == pytest.approx(0.60653, abs=1e-5)
    assert abs(res.t) < 1e-12


def test_integrable_golden_kills_modes():
    w = 0.6180339887
    init = GraphCurve.constant(-0.55, 32)
    init.u[3] = 1e-3
    init.u[32 + 5] = -2e-3
    res = find_translated_curve(twist_psi, w, init)
    assert res.converged and res.residual < 1e-12
    assert abs(res.curve.mean() + w) < 1e-9
    assert np.max(np.abs(res.curve.u[1:])) < 1e-12
    assert np.max(np.abs(res.curve.p)) < 1e-12
    assert abs(res.t) < 1e-12


def test_solver_reports_failure():
    res = find_translated_curve(lambda x, y: (x, y), 0.3, GraphCurve.constant(-0.5, 8), max_iter=3)
    assert not res.converged
    assert res.residual > 0.1
    assert len(res.history) >= 1


def test_solver_rejects_coarse_grid():
    with pytest.raises(DomainError):
        find_translated_curve(twist_psi, 0.3, GraphCurve.constant(-0.5, 16), grid=16)


def test_integrable_guess_solves_l(ren0):
    w = omega_menu()[4]
    g = integrable_guess(ren0, 9, w)
    lv = float(ren0.l_ring(9, math.exp(g.mean())))
    assert abs((lv - w + 0.5) % 1.0 - 0.5) < 1e-12
    assert -1.0 < g.mean() < 0.0


def test_ring_curve_integrable(ren0):
    res = solve_ring_curve(ren0, 10, omega_menu()[7])
    assert res.converged and res.residual < 1e-12
    assert np.max(np.abs(res.curve.u[1:])) < 1e-12


def test_ring_curve_perturbed(ren3):
    res = solve_ring_curve(ren3, 8, omega_menu()[10])
    assert res.converged and res.residual < 1e-10
    assert abs(res.t) < 1e-9
    assert res.invariant
    # the curve moves off the integrable fiber
    assert np.ptp(res.curve.graph(np.linspace(0, 1, 64))) > 1e-9
    rec = res.record()
    assert set(rec) >= {"omega", "t", "residual", "newton_iters"}


def test_ring_psi_matches_ring_f(ren3):
    psi = ring_psi(ren3, 9)
    x, ly = np.array([0.2, 0.8]), np.array([-0.3, -0.7])
    xs, ys = ren3.ring_f(9, x, np.exp(ly), "table")
    px, pl = psi(x, ly)
    np.testing.assert_allclose(px, xs)
    np.testing.assert_allclose(pl, np.log(ys))


# -- lifting


def test_lift_integrable_is_level_set(model, lifted0):
    res, L = lifted0
    assert L.closure_gap < 1e-7
    assert L.overlap_distance < 1e-7
    assert level_error(model, L) < 1e-8
    assert L.self_distance < 1e-6
    w = res.omega
    assert L.tau == pytest.approx(L.n_return + 1.0 - w, abs=1e-9)


def test_lift_integrable_no_self_intersection(lifted0):
    _, L = lifted0
    assert _geometry.self_intersections(L.polyline) == 0


def test_lift_perturbed_is_invariant(ren3, fd, lifted3):
    res, L = lifted3
    assert L.passed
    assert invariance_error(ren3.model, fd, res.curve, 8, L) < 1e-7


def test_lift_rotation_relation(lifted3):
    res, L = lifted3
    rot = L.rotation()
    ok, dev = rotation_relation_check(rot.value, res.omega, orientation=-1)
    assert ok, dev
    assert 1.0 / rot.value == pytest.approx(L.tau, abs=1e-6)


def test_lifted_circle_polyline_csv(lifted0, tmp_path):
    _, L = lifted0
    p = write_polyline_csv(tmp_path / "curve.csv", L.polyline)
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y" and len(lines) == len(L.polyline) + 1


# -- distances and the rotation relation


def test_hausdorff_concentric_circles():
    t = np.linspace(0, 2 * np.pi, 1000)
    a = np.column_stack([np.cos(t), np.sin(t)])
    assert abs(hausdorff(a, 2 * a) - 1.0) < 1e-5
    assert hausdorff(a, a) == 0.0


def test_hausdorff_translated_segment():
    a = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert hausdorff(a, a + [0.25, 0.0]) == pytest.approx(0.25)


def test_curve_hausdorff_beats_polyline_distance():
    t = np.linspace(0, 2 * np.pi, 200)
    a = np.column_stack([np.cos(t), np.sin(t)])
    s = np.linspace(0, 2 * np.pi, 501)
    b = np.column_stack([np.cos(s), np.sin(s)])
    assert curve_hausdorff(a, b) < 1e-7 < hausdorff(a, b)


def test_rotation_relation_examples():
    ok, dev = rotation_relation_check(1.0 / (7 + 0.381966), 0.381966)
    assert ok and dev < 1e-12
    ok, dev = rotation_relation_check(0.5, 0.0)
    assert ok and dev == 0.0
    ok, dev = rotation_relation_check(1.0 / (7 + 0.381966), 0.618034, orientation=-1)
    assert ok
    ok, dev = rotation_relation_check(0.3, 0.5)
    assert not ok and dev == pytest.approx(0.5 - 1 / 3)
    with pytest.raises(DomainError):
        rotation_relation_check(0.0, 0.2)


def test_catalog_json(tmp_path):
    p = write_catalog(tmp_path / "cat.json", [{"omega": 0.5, "n": 7}])
    data = json.loads(p.read_text())
    assert data["schema_version"] == 1 and data["curves"][0]["n"] == 7
