"""Renormalized counterexample map, graph descent and the no-circle certificate.

The perturbed map is f_pert = (h^-1 g_M h) o f. Read on the domain
D = h^-1([-1, 0) x (0, c)) its first return is T_{l-1} o g_M o T_1:

    t = s_M^-1(x + 1),   ln y' = phi_M(t) + ln y,   x' = t - 1 + l(ln y')

with l(ln v) = (ln v - sigma(v)) / lam the unperturbed translation. All of it is
evaluated in (x, ln y) because a descent run loses about 20 in ln y per step.
Where phi_M is very negative s_M^-1 expands by e^{-phi}, so curves over
J_M = s_M(I) - 1 are parameterized by t in I, never by x.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from ._validation import ConvergenceError, DomainError, check_int
from .curves import GraphCurve, TranslatedCurveResult, find_translated_curve, omega_menu
from .model import BumpParams, ModelFamily, build_bump, build_fpert, largest_invertible_rho
from .return_renorm import (AnnulusPoint, FundamentalDomainSpec, SigmaTable, _return_chart,
                            build_sigma_table, normalizer_h_inv)

DERIVATIVE_BOUND = 0.25
MARGIN = 0.1
MIN_DESCENT = 5.0
T_SAMPLES = 4097        # t grid over I for one push
WINDOW_SAMPLES = 513    # t grid over the part of I that lands in the unit window
MAX_STEPS = 50


@dataclass(frozen=True)
class CounterexampleParams:
    bump: BumpParams
    sigma: SigmaTable = field(repr=False)
    lam: float
    c: float
    y_pert: float
    J_M: tuple[float, float]

    @property
    def bM(self) -> float:
        return self.bump.b * self.bump.M

    def l(self, logv):
        logv = np.asarray(logv, dtype=float)
        return (logv - self.sigma(np.exp(logv))) / self.lam

    def dl(self, logv):
        """d l / d ln v."""
        logv = np.asarray(logv, dtype=float)
        v = np.exp(logv)
        return (1.0 - v * self.sigma.derivative(v)) / self.lam

    def describe(self) -> dict:
        return {"bump": self.bump.describe(), "lam": self.lam, "c": self.c,
                "y_pert": self.y_pert, "log_y_pert": math.log(self.y_pert),
                "J_M": list(self.J_M), "bM": self.bM, "sigma_at_zero": self.sigma.limit}


def build_counterexample(m: ModelFamily, fd: FundamentalDomainSpec, bump: BumpParams | None = None,
                         sigma: SigmaTable | None = None) -> CounterexampleParams:
    if m.epsilon != 0.0:
        raise DomainError("the counterexample perturbs the unperturbed model")
    if m.q.higher and any(m.q.higher):
        raise DomainError("the counterexample needs linear q")
    if bump is None:
        M, rho = choose_M()
        bump = build_bump(rho, M)
    sigma = build_sigma_table(m, fd) if sigma is None else sigma
    J = tuple(float(v) for v in bump.s(np.array(bump.I)) - 1.0)
    if not -1.0 <= J[0] < J[1] < 0.0:
        raise DomainError(f"J_M = {J} is not inside [-1, 0)")
    if bump.M > 0 and bump.b * bump.M <= math.log(2.0):
        raise DomainError("bM must exceed ln 2")
    # images of fibers below y_pert stay in the core |v| <= c/2 of g_M
    y_pert = 0.5 * fd.c * math.exp(-max(bump.a, 0.0))
    return CounterexampleParams(bump, sigma, float(m.q.lam), fd.c, y_pert, J)


def derivative_bounds(bp: BumpParams, lam: float = 1.0, samples: int = 2001) -> dict:
    """Grid values for the t-phi and push derivative bounds on I (seed graph slope 1)."""
    t = np.linspace(bp.I[0], bp.I[1], samples)
    dphi = bp.phi_d(t)
    if np.any(dphi == 0):
        raise DomainError("phi_M is not monotone on I")
    dt_dphi = 1.0 / np.abs(dphi)
    # x' = t - 1 + l(ln y'), ln y' = phi + ln y(s(t) - 1): with slope-one input
    # and l' = 1/lam near zero fibers
    sp = np.exp(bp.phi(t))
    dly_dt = dphi + sp
    dx_dt = 1.0 + dly_dt / lam
    return {
        "dt_dphi_max": float(dt_dphi.max()),
        "I_over_M": bp.I_length / bp.M if bp.M > 0 else math.inf,
        "dx_dphi_dev": float(np.max(np.abs(lam * dx_dt / dphi - 1.0))),
        "dlogy_dphi_dev": float(np.max(np.abs(dly_dt / dphi - 1.0))),
    }


def derivative_bounds_pass(bp: BumpParams, margin: float = MARGIN) -> bool:
    v = derivative_bounds(bp)
    lim = DERIVATIVE_BOUND * (1.0 - margin)
    return (v["dt_dphi_max"] <= v["I_over_M"] * (1 + 1e-9) and v["I_over_M"] <= lim
            and v["dx_dphi_dev"] <= lim and v["dlogy_dphi_dev"] <= lim)


def choose_M(step: float = 0.5, M_max: float = 40.0, margin: float = MARGIN,
             min_descent: float = MIN_DESCENT) -> tuple[float, float]:
    """Smallest M on a grid with bM >= min_descent and the derivative bounds met with margin."""
    M = step
    while M <= M_max:
        rho = largest_invertible_rho(M)
        bp = build_bump(rho, M)
        if bp.b * M >= min_descent and derivative_bounds_pass(bp, margin):
            return float(M), float(rho)
        M += step
    raise DomainError("no M on the grid passes the descent and derivative checks")


# ---------------------------------------------------------------------------
# the renormalized map


def wrap_unit(x):
    """Representative in [-1, 0)."""
    x = np.asarray(x, dtype=float)
    out = x - np.floor(x) - 1.0
    return out if out.ndim else float(out)


def _from_t(params: CounterexampleParams, t, logy):
    lny2 = logy + params.bump.phi(t)
    return t - 1.0 + params.l(lny2), lny2


def bar_fpert(params: CounterexampleParams, x, logy):
    """(x', ln y') for x in [-1, 0); x' is not reduced mod 1."""
    x = np.asarray(x, dtype=float)
    logy = np.asarray(logy, dtype=float)
    if np.any(x < -1.0) or np.any(x >= 0.0):
        raise DomainError("x must lie in [-1, 0)")
    if np.any(logy >= math.log(params.c / 2)):
        raise DomainError("fiber above c/2")
    t = params.bump.s_inv(x + 1.0)
    xb, ly = _from_t(params, t, logy)
    if np.ndim(xb) == 0:
        return float(xb), float(ly)
    return xb, ly


def simulate_bar_fpert(m: ModelFamily, fd: FundamentalDomainSpec, params: CounterexampleParams,
                       x, logy, cap: int = 2000):
    """First return to D of the plane map f_pert, read in the chart: (x in [-1, 0), ln v, steps)."""
    fp = build_fpert(m, params.bump, fd)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    logy = np.atleast_1d(np.asarray(logy, dtype=float))
    z = normalizer_h_inv(m, fd, AnnulusPoint(x, logy))
    px, py = np.array(z.x, dtype=float), np.array(z.y, dtype=float)
    out_x = np.full(len(x), np.nan)
    out_l = np.full(len(x), np.nan)
    steps = np.zeros(len(x), dtype=np.int64)
    active = np.ones(len(x), dtype=bool)
    lnx_star = math.log(fd.x_star)
    for k in range(1, cap + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        nx, ny = fp(px[idx], py[idx])
        px[idx], py[idx] = nx, ny
        ok = (nx > 0) & m.in_exact_region(nx, ny)
        v = nx * ny
        hx = (lnx_star - np.log(np.where(ok, nx, 1.0))) / params.lam
        hit = ok & (hx >= -1.0) & (hx < 0.0) & (v > 0) & (v < fd.c)
        sel = idx[hit]
        out_x[sel], out_l[sel], steps[sel] = hx[hit], np.log(v[hit]), k
        active[sel] = False
    if np.any(active):
        raise ConvergenceError(f"plane orbit did not return to D within {cap} steps")
    return out_x, out_l, steps


# ---------------------------------------------------------------------------
# graphs and the descent


@dataclass
class LogGraph:
    """ln y = g(x) on [lo, hi]: either the seed ln y0 + x or a spline from a push."""

    lo: float
    hi: float
    log_y0: float | None = None
    spline: CubicSpline | None = field(default=None, repr=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.spline is None:
            return self.log_y0 + x
        return self.spline(x)

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        if self.spline is None:
            return np.ones_like(x)
        return self.spline(x, 1)

    @classmethod
    def seed(cls, params: CounterexampleParams, log_y0: float) -> "LogGraph":
        """ln y = ln y0 + x on J_M: the unit-slope seed graph."""
        return cls(params.J_M[0], params.J_M[1], float(log_y0))

    def sup(self, lo: float | None = None, hi: float | None = None, samples: int = 2001) -> float:
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        return float(np.max(self(np.linspace(lo, hi, samples))))


@dataclass
class PushResult:
    graph: LogGraph
    shift: int
    t_window: tuple[float, float]
    J_next: tuple[float, float]
    image_length: float
    sup_in: float
    sup_out: float
    slope_range: tuple[float, float]
    derivative_dev: tuple[float, float]
    violations: list = field(default_factory=list)

    @property
    def descent(self) -> float:
        return self.sup_out - self.sup_in


def _push_curve(params: CounterexampleParams, graph: LogGraph, t):
    x = params.bump.s(t) - 1.0
    ly = graph(x)
    xb, ly2 = _from_t(params, t, ly)
    # derivatives along t: d ln y'/dt = phi' + g'(x) s'(t), dx'/dt = 1 + l'(ln y') d ln y'/dt
    dphi = params.bump.phi_d(t)
    dly2 = dphi + graph.slope(x) * params.bump.s_prime(t)
    dxb = 1.0 + params.dl(ly2) * dly2
    return xb, ly2, dxb, dly2, dphi


def push_graph(params: CounterexampleParams, graph: LogGraph) -> PushResult:
    """Image of the graph over J_M, cut to one period and shifted onto [-1, 0)."""
    bp = params.bump
    lo, hi = bp.I
    J = params.J_M
    if graph.lo > J[0] + 1e-15 or graph.hi < J[1] - 1e-15:
        raise DomainError("graph does not cover J_M")
    if graph.sup(J[0], J[1], 64) >= math.log(params.y_pert):
        raise DomainError("graph fibers above y_pert")
    violations = []
    t = np.linspace(lo, hi, T_SAMPLES)
    xs = bp.s(t) - 1.0
    in_slope = graph.slope(xs)
    if np.any(np.abs(in_slope - 1.0) > 0.5):
        violations.append("input graph slope outside [1/2, 3/2]")
    xb, _, _, _, _ = _push_curve(params, graph, t)
    a, b = float(np.min(xb)), float(np.max(xb))
    if b - a <= 2.0:
        raise DomainError(f"image of J_M has length {b - a:.3g} <= 2: M too small to cover a period")
    # the unit window with the largest margin inside the image
    k = int(math.floor(0.5 * (a + b) + 0.5))
    if not (a < k - 1 and k < b):
        raise ConvergenceError("no unit window inside the image")

    def xbar(tt, target):
        return float(_push_curve(params, graph, np.array([tt]))[0][0]) - target

    ta = brentq(xbar, lo, hi, args=(k - 1.0,), xtol=1e-16, rtol=1e-15)
    tb = brentq(xbar, lo, hi, args=(float(k),), xtol=1e-16, rtol=1e-15)
    t0, t1 = min(ta, tb), max(ta, tb)
    # Chebyshev-Lobatto in t keeps the spline knots dense at both window ends
    tw = t0 + 0.5 * (t1 - t0) * (1.0 - np.cos(np.pi * np.arange(WINDOW_SAMPLES) / (WINDOW_SAMPLES - 1)))
    xw, lw, dxw, dlw, dphiw = _push_curve(params, graph, tw)
    xw = xw - k
    order = np.argsort(xw)
    xw, lw, dxw, dlw, dphiw = xw[order], lw[order], dxw[order], dlw[order], dphiw[order]
    xw[0], xw[-1] = -1.0, 0.0           # the root solves put the ends on -1 and 0 to rounding
    slope = dlw / dxw
    spline = CubicSpline(xw, lw, bc_type=((1, slope[0]), (1, slope[-1])))
    if np.any(np.abs(slope - 1.0) > 0.5):
        violations.append("output graph slope outside [1/2, 3/2]")
    dev_x = float(np.max(np.abs(params.lam * dxw / dphiw - 1.0)))
    dev_l = float(np.max(np.abs(dlw / dphiw - 1.0)))
    if max(dev_x, dev_l) > DERIVATIVE_BOUND:
        violations.append("push derivatives in phi exceed 1/4")
    sup_in = float(np.max(graph(xs)))
    sup_out = float(np.max(lw))
    if sup_out - sup_in > -params.bM:
        violations.append("descent smaller than bM")
    # the part of the window that lands back in J_M, in the input coordinate
    Jn = tuple(sorted(float(v) for v in bp.s(np.array([t0, t1])) - 1.0))
    out = LogGraph(-1.0, 0.0, None, spline)
    return PushResult(out, k, (t0, t1), Jn, b - a, sup_in, sup_out,
                      (float(slope.min()), float(slope.max())), (dev_x, dev_l), violations)


@dataclass
class WitnessPoint:
    step: int
    x: float
    logy: float
    t: float | None = None


@dataclass
class DescentReport:
    log_y0: float
    bM: float
    sup_logy: list[float]
    pushes: list = field(repr=False)
    intervals: list[dict]
    x_inf: float
    witness: list[WitnessPoint]
    violations: list[str]

    @property
    def steps(self) -> int:
        return len(self.pushes)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "log_y0": self.log_y0,
            "bM": self.bM,
            "sup_logy": self.sup_logy,
            "descents": [p.descent for p in self.pushes],
            "image_lengths": [p.image_length for p in self.pushes],
            "shifts": [p.shift for p in self.pushes],
            "slope_ranges": [list(p.slope_range) for p in self.pushes],
            "derivative_deviations": [list(p.derivative_dev) for p in self.pushes],
            "intervals": self.intervals,
            "x_inf": self.x_inf,
            "witness": [{"step": w.step, "x": w.x, "logy": w.logy, "t": w.t} for w in self.witness],
            "violations": self.violations,
        }


def descent_run(params: CounterexampleParams, log_y0: float | None = None, steps: int = 10) -> DescentReport:
    """Push the seed graph `steps` times, then pull a witness orbit back from the last graph."""
    steps = check_int("steps", steps, 1, MAX_STEPS)
    if log_y0 is None:
        log_y0 = math.log(params.y_pert) - 1.0
    if log_y0 >= math.log(params.y_pert):
        raise DomainError("y0 must lie below y_pert")
    graphs = [LogGraph.seed(params, log_y0)]
    pushes = []
    for _ in range(steps):
        res = push_graph(params, graphs[-1])
        pushes.append(res)
        graphs.append(res.graph)
    sup = [graphs[0].sup()] + [p.sup_out for p in pushes]
    violations = [f"step {i + 1}: {v}" for i, p in enumerate(pushes) for v in p.violations]

    # witness: start mid-window on the last graph and pull back; the inverse
    # steps contract, so this is the stable direction
    bp = params.bump
    x = -0.5
    pts = [WitnessPoint(steps, x, float(graphs[-1](x)))]
    log_expansion = []
    for j in range(steps, 0, -1):
        p, g = pushes[j - 1], graphs[j - 1]
        target = x + p.shift

        def resid(tt):
            return float(_push_curve(params, g, np.array([tt]))[0][0]) - target

        tt = brentq(resid, p.t_window[0], p.t_window[1], xtol=1e-16, rtol=1e-15)
        _, _, dxb, _, _ = _push_curve(params, g, np.array([tt]))
        # dx'/dx = (dx'/dt) / s'(t)
        log_expansion.append(float(np.log(abs(dxb[0])) - bp.phi(tt)))
        x = float(bp.s(tt) - 1.0)
        pts.append(WitnessPoint(j - 1, x, float(g(x)), float(tt)))
    pts.reverse()
    log_expansion.reverse()        # index j-1: expansion of step j at the witness

    # K_n: seed parameters whose first n images stay on the chain of windows;
    # widths are window widths pulled back by the expansions at the witness
    intervals = []
    for n in range(1, steps + 1):
        window = pushes[n - 1].J_next
        logw = math.log(window[1] - window[0]) - sum(log_expansion[: n - 1])
        intervals.append({"n": n, "center": pts[0].x, "log10_width": logw / math.log(10.0)})
    for a, b in zip(intervals, intervals[1:]):
        if not b["log10_width"] < a["log10_width"]:
            violations.append(f"K_{b['n']} not strictly inside K_{a['n']}")
    for w in pts[1:]:
        if w.logy > log_y0 - w.step * params.bM:
            violations.append(f"witness fiber at step {w.step} above ln y0 - n bM")
    return DescentReport(float(log_y0), params.bM, sup, pushes, intervals, pts[0].x, pts, violations)


# ---------------------------------------------------------------------------
# certificate


@dataclass
class Certificate:
    produced: bool
    reason: str
    base_point: tuple[float, float] | None = None
    base_chart: tuple[float, float] | None = None
    w_log_fiber: float | None = None
    return_times: list[int] = field(default_factory=list)
    orbit_times: list[int] = field(default_factory=list)
    memberships: list[dict] = field(default_factory=list)
    C: float | None = None

    def to_dict(self) -> dict:
        return {"schema_version": 1, "produced": self.produced, "reason": self.reason,
                "base_point": self.base_point, "base_chart": self.base_chart,
                "w_log_fiber": self.w_log_fiber, "return_times": self.return_times,
                "orbit_times": self.orbit_times, "memberships": self.memberships, "C": self.C}


def certify_no_invariant_circle(m: ModelFamily, fd: FundamentalDomainSpec, params: CounterexampleParams,
                                report: DescentReport | None, w_log_fiber: float | None = None,
                                min_levels: int = 5) -> Certificate:
    """Evidence that no f_pert-invariant circle lies in W minus Sigma, W = {ln v < w_log_fiber}.

    The witness orbit starts outside W and visits D at fibers below
    C e^{-n bM} y0 for every n, so it enters any annulus between Sigma and a
    circle in W; an invariant annulus cannot be entered from outside.
    Fails closed: any missing piece gives produced=False.
    """
    if report is None:
        return Certificate(False, "no descent report")
    if report.violations:
        return Certificate(False, "descent report has violations: " + "; ".join(report.violations))
    if report.steps < min_levels:
        return Certificate(False, f"only {report.steps} strip levels, need {min_levels}")
    base = report.witness[0]
    if w_log_fiber is None:
        w_log_fiber = base.logy - 1.0
    if base.logy < w_log_fiber:
        return Certificate(False, "base point lies inside W")
    z = normalizer_h_inv(m, fd, AnnulusPoint(base.x, base.logy))
    times, orbit_times, members = [], [0], []
    C = 0.0
    for w_prev, w in zip(report.witness[:-1], report.witness[1:]):
        # D -> F (one step, then g_M) -> back to D: the unperturbed return time of
        # the point after g_M, read in F
        lny_after = w_prev.logy + float(params.bump.phi(w_prev.t))
        xr, _, n = _return_chart(m, fd, np.array([w_prev.t]), np.array([lny_after]))
        gap = abs((float(xr[0]) - (w.x + 1.0) + 0.5) % 1.0 - 0.5)
        if gap > 1e-8:
            return Certificate(False, f"return chart and witness disagree at step {w.step} by {gap:.2e}")
        times.append(int(n[0]))
        orbit_times.append(orbit_times[-1] + int(n[0]))
        bound = report.log_y0 - w.step * params.bM
        C = max(C, math.exp(w.logy - bound))
        members.append({"step": w.step, "time": orbit_times[-1], "x": w.x, "logy": w.logy,
                        "log_bound": bound, "in_D": bool(-1.0 <= w.x < 0.0)})
    if not all(mb["in_D"] for mb in members):
        return Certificate(False, "an orbit point is outside D")
    return Certificate(True, "witness orbit starts outside W and accumulates on Sigma",
                       (float(z.x), float(z.y)), (base.x, base.logy), float(w_log_fiber),
                       times, orbit_times, members, C)


# ---------------------------------------------------------------------------
# solver cross-check


def ring_psi_pert(params: CounterexampleParams, n: int):
    """bar_fpert conjugated to the ring fibers ln y + n in (-1, 0)."""
    def psi(x, logy):
        xb, ly = bar_fpert(params, wrap_unit(np.asarray(x)), np.asarray(logy) - n)
        return xb, ly + n
    return psi


def curve_sweep(params: CounterexampleParams, n: int, omegas=None, max_iter: int = 30,
                K: int = 128) -> list[TranslatedCurveResult]:
    """Translated-curve solves for the renormalized perturbed map on ring level n."""
    n = check_int("n", n, 1)
    if math.exp(-n) >= params.c / 2:
        raise DomainError("ring level above c/2")
    omegas = omega_menu() if omegas is None else list(omegas)
    psi = ring_psi_pert(params, n)
    out = []
    for w in omegas:
        # integrable start: l(ln y - n) = w mod 1 on the ring
        def g(s):
            return float(params.l(s - n)) - w
        j = math.ceil(g(-1.0))
        s0 = brentq(lambda s: g(s) - j, -1.0, 0.0, xtol=1e-15)
        init = GraphCurve.constant(s0, K)
        with np.errstate(all="ignore"):
            try:
                res = find_translated_curve(psi, w, init, max_iter=max_iter)
            except (DomainError, ConvergenceError, np.linalg.LinAlgError):
                res = TranslatedCurveResult(init, float("nan"), w, float("inf"), 0, False)
        out.append(res)
    return out


def control_case(m: ModelFamily, fd: FundamentalDomainSpec, params: CounterexampleParams, n: int,
                 omegas=None) -> dict:
    """The same pipeline with the trivial bump (M = 0): curves must exist, no certificate."""
    p0 = build_counterexample(m, fd, build_bump(params.bump.rho, 0.0), params.sigma)
    try:
        report = descent_run(p0, steps=MAX_STEPS // 10)
        descent_error = None
    except DomainError as exc:
        report, descent_error = None, str(exc)
    cert = certify_no_invariant_circle(m, fd, p0, report)
    found = [r for r in curve_sweep(p0, n, omegas) if r.invariant]
    return {"certificate_produced": cert.produced, "reason": cert.reason,
            "descent_error": descent_error, "curves_found": len(found),
            "max_residual": max((r.residual for r in found), default=None)}


# ---------------------------------------------------------------------------
# dumps


def write_report(path, report: DescentReport) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def write_certificate(path, cert: Certificate) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cert.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def write_witness_csv(path, report: DescentReport) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "logy"])
        for p in report.witness:
            w.writerow([p.step, repr(p.x), repr(p.logy)])
    return path
