import csv
import json
import math

import numpy as np
import pytest

from separatrix_lab._validation import DomainError
from separatrix_lab.counterexample import (
    LogGraph,
    bar_fpert,
    build_counterexample,
    certify_no_invariant_circle,
    choose_M,
    control_case,
    curve_sweep,
    descent_run,
    derivative_bounds,
    push_graph,
    simulate_bar_fpert,
    wrap_unit,
    write_certificate,
    write_report,
    write_witness_csv,
)
from separatrix_lab.curves import omega_menu
from separatrix_lab.model import build_bump, build_model
from separatrix_lab.return_renorm import Renormalization, build_fundamental_domain


@pytest.fixture(scope="module")
def model():
    return build_model()


@pytest.fixture(scope="module")
def fd(model):
    return build_fundamental_domain(model)


@pytest.fixture(scope="module")
def sigma(model, fd):
    return Renormalization(model, fd).table


@pytest.fixture(scope="module")
def params(model, fd, sigma):
    return build_counterexample(model, fd, sigma=sigma)


@pytest.fixture(scope="module")
def trivial(model, fd, sigma, params):
    return build_counterexample(model, fd, build_bump(params.bump.rho, 0.0), sigma)


@pytest.fixture(scope="module")
def report(params):
    return descent_run(params, steps=10)


def test_choose_M():
    M, rho = choose_M()
    assert M == 7.5
    assert rho == pytest.approx(1.0 / 192.0)


def test_params_invariants(params):
    lo, hi = params.J_M
    assert -1.0 <= lo < hi < 0.0
    assert params.bM > math.log(2.0)
    assert params.bM >= 5.0
    assert params.y_pert < params.c / 2


def test_wrap_unit():
    assert wrap_unit(0.25) == -0.75
    assert wrap_unit(-1.0) == -1.0
    np.testing.assert_allclose(wrap_unit(np.array([-2.5, 3.0])), [-0.5, -1.0])


# -- the renormalized map


def test_trivial_bump_is_translation(trivial):
    x = np.linspace(-0.99, -0.01, 7)
    ly = np.full(7, -11.0)
    xb, lb = bar_fpert(trivial, x, ly)
    np.testing.assert_allclose(lb, ly, atol=0)
    np.testing.assert_allclose(xb, x + trivial.l(ly), atol=1e-13)


def test_fiber_drop_on_I(params):
    bp = params.bump
    t = np.linspace(bp.I[0], bp.I[1], 9)
    x = bp.s(t) - 1.0
    xb, lb = bar_fpert(params, x, np.full(9, -9.0))
    drop = lb + 9.0
    np.testing.assert_allclose(drop, bp.phi(bp.s_inv(x + 1.0)), atol=1e-12)
    assert np.all(drop <= -params.bM)


def test_formula_matches_plane_return(model, fd, params):
    x = np.array([-0.95, -0.7, -0.4, -0.05, -0.34])
    for ly in (-8.0, -10.0):
        sx, sl, steps = simulate_bar_fpert(model, fd, params, x, np.full(5, ly))
        fx, fl = bar_fpert(params, x, np.full(5, ly))
        assert np.max(np.abs((sx - fx + 0.5) % 1.0 - 0.5)) < 1e-6
        assert np.max(np.abs(sl - fl)) < 1e-6
        assert np.all(steps >= 1)


def test_bar_fpert_rejects(params):
    with pytest.raises(DomainError):
        bar_fpert(params, 0.0, -9.0)
    with pytest.raises(DomainError):
        bar_fpert(params, -0.5, math.log(params.c / 2))


# -- derivative bounds


def test_t_phi_bound(params):
    v = derivative_bounds(params.bump)
    assert v["dt_dphi_max"] <= v["I_over_M"] * (1 + 1e-9)
    assert v["I_over_M"] <= 0.25 * 0.9


def test_push_phi_bounds(params):
    v = derivative_bounds(params.bump)
    assert v["dx_dphi_dev"] <= 0.25 * 0.9
    assert v["dlogy_dphi_dev"] <= 0.25 * 0.9


# -- pushing graphs


def test_push_seed_graph(params):
    g = LogGraph.seed(params, -8.0)
    assert g.slope(-0.3) == 1.0
    res = push_graph(params, g)
    assert res.violations == []
    assert res.image_length > 2.0
    assert 0.5 <= res.slope_range[0] <= res.slope_range[1] <= 1.5
    assert res.descent <= -params.bM
    assert params.J_M[0] <= res.J_next[0] < res.J_next[1] <= params.J_M[1]
    assert res.graph.lo == -1.0 and res.graph.hi == 0.0
    assert max(res.derivative_dev) <= 0.25


def test_push_output_is_the_image(params):
    g = LogGraph.seed(params, -8.0)
    res = push_graph(params, g)
    t = np.linspace(*res.t_window, 5)
    x = params.bump.s(t) - 1.0
    from separatrix_lab.counterexample import _from_t
    xb, lb = _from_t(params, t, g(x))
    np.testing.assert_allclose(res.graph(xb - res.shift), lb, atol=1e-9)


def test_push_needs_large_M(trivial):
    with pytest.raises(DomainError):
        push_graph(trivial, LogGraph.seed(trivial, -8.0))


def test_push_rejects_high_graph(params):
    with pytest.raises(DomainError):
        push_graph(params, LogGraph.seed(params, math.log(params.y_pert) + 1.0))


# -- descent


def test_descent_per_step(report, params):
    assert report.violations == []
    sup = report.sup_logy
    assert len(sup) == 11
    assert all(b - a <= -params.bM for a, b in zip(sup, sup[1:]))


def test_nested_intervals(report):
    w = [k["log10_width"] for k in report.intervals]
    assert all(b < a for a, b in zip(w, w[1:]))
    assert w[0] < math.log10(report.pushes[0].J_next[1] - report.pushes[0].J_next[0]) + 1e-9


def test_witness_containment(report, params):
    lo, hi = params.J_M
    for w, g in zip(report.witness[1:], [p.graph for p in report.pushes]):
        assert w.logy <= report.log_y0 - w.step * params.bM
        ys = g(np.linspace(-1, 0, 201))
        assert ys.min() - 1e-9 <= w.logy <= ys.max() + 1e-9
    assert lo <= report.x_inf <= hi
    assert report.witness[0].logy == pytest.approx(report.log_y0 + report.x_inf)


def test_descent_step_cap(params):
    with pytest.raises(DomainError):
        descent_run(params, steps=51)
    with pytest.raises(DomainError):
        descent_run(params, log_y0=math.log(params.y_pert))


# -- certificate


def test_certificate(model, fd, params, report):
    cert = certify_no_invariant_circle(model, fd, params, report)
    assert cert.produced, cert.reason
    assert len(cert.memberships) >= 5
    assert all(m["in_D"] and m["logy"] <= m["log_bound"] for m in cert.memberships)
    assert 0 < cert.C <= 1.0
    # return times follow the |ln v| law of the unperturbed return
    for t, w in zip(cert.return_times, report.witness[:-1]):
        lv = w.logy + float(params.bump.phi(w.t))
        assert abs(t - abs(lv)) <= 1.5
    assert cert.orbit_times == sorted(cert.orbit_times)
    assert cert.base_chart[1] >= cert.w_log_fiber


def test_certificate_fails_closed(model, fd, params, report):
    assert not certify_no_invariant_circle(model, fd, params, None).produced
    short = descent_run(params, steps=3)
    assert not certify_no_invariant_circle(model, fd, params, short).produced
    inside = certify_no_invariant_circle(model, fd, params, report, w_log_fiber=0.0)
    assert not inside.produced


def test_no_translated_curves_below_witness(params, report):
    n = math.ceil(-report.witness[0].logy) + 1
    res = curve_sweep(params, n, omega_menu()[:3])
    assert not any(r.invariant and r.converged for r in res)


def test_control_case_has_curves(model, fd, params):
    out = control_case(model, fd, params, 9, omega_menu()[:3])
    assert not out["certificate_produced"]
    assert out["descent_error"] is not None
    assert out["curves_found"] == 3


# -- dumps


def test_dumps(tmp_path, model, fd, params, report):
    r = json.loads(write_report(tmp_path / "descent.json", report).read_text())
    assert r["schema_version"] == 1 and len(r["sup_logy"]) == 11
    cert = certify_no_invariant_circle(model, fd, params, report)
    c = json.loads(write_certificate(tmp_path / "cert.json", cert).read_text())
    assert c["produced"] is True
    rows = list(csv.reader(write_witness_csv(tmp_path / "w.csv", report).open()))
    assert rows[0] == ["step", "x", "logy"] and len(rows) == 12
