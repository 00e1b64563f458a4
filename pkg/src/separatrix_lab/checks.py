"""Numerical checks behind the scenario reports.

Each check returns a CheckResult with the measured quantities next to the
limits they were held to. Heavy shared objects (model, domain, sigma table,
counterexample parameters) live on a Workspace and are built once.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import IntegrationWarning, quad

from ._validation import DomainError
from .charts_flows import PlanePoint, extend_symplectic, fd_determinant, generator_chain, local_flow
from .counterexample import (
    DERIVATIVE_BOUND,
    bar_fpert,
    build_counterexample,
    certify_no_invariant_circle,
    control_case,
    descent_run,
    derivative_bounds,
    simulate_bar_fpert,
)
from .curves import omega_menu, rotation_relation_check, sweep_level
from .model import Glue, build_bump, build_fpert, build_model, f_eps, g_M, largest_invertible_rho
from .nf_algebra import bnf_normalize, random_perturbation
from .return_renorm import (
    AnnulusPoint,
    Renormalization,
    build_fundamental_domain,
    first_return,
    sigma_estimate,
)

DEFAULT_TOLERANCES = {
    "jacobian": 1e-4,
    "flow_drift": 1e-12,
    "bnf_slope_excess": 0.5,
    "return_time": 0.2,
    "oracle": 1e-8,
    "sigma_spread": 1e-8,
    "newton_residual": 1e-10,
    "closure": 1e-7,
    "invariance": 1e-7,
    "distance_to_sigma": 1e-3,
    "rotation_relation": 1e-6,
    "rotation_samples": 5,
    "min_curves": 25,
    "bump_integral": 1e-12,
    "derivative_margin": 0.1,
    "cross_validation": 1e-6,
    "min_descent": 5.0,
}


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    measured: dict
    limits: dict
    note: str | None = None

    def to_dict(self) -> dict:
        out = {"criterion": self.criterion, "name": self.name, "passed": bool(self.passed),
               "measured": _plain(self.measured), "limits": _plain(self.limits)}
        if self.note:
            out["note"] = self.note
        return out

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.criterion}: {self.name}"


def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


# ---------------------------------------------------------------------------
# shared objects


@dataclass
class Workspace:
    """Lazily built objects for one parsed config (see cli.load_config)."""

    config: dict
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def __post_init__(self):
        self.tolerances = {**DEFAULT_TOLERANCES, **self.config.get("tolerances", {})}

    @cached_property
    def model(self):
        mc = self.config["model"]
        glue = Glue(**mc["glue"])
        return build_model(mc["lambda"], mc["r0"], glue, tuple(mc["q_higher"]),
                           resolution=mc["resolution"])

    @cached_property
    def fd(self):
        f = self.config["fundamental_domain"]
        return build_fundamental_domain(self.model, f["x_star"], f["y_star"], f["c_star"])

    @cached_property
    def ren0(self) -> Renormalization:
        return Renormalization(self.model, self.fd)

    def renormalization(self, epsilon: float) -> Renormalization:
        if epsilon == 0.0:
            return self.ren0
        r = Renormalization(self.model.with_epsilon(epsilon), self.fd, base=self.model)
        r._table = self.ren0.table
        return r

    @cached_property
    def omegas(self) -> list[float]:
        om = self.config["omegas"]
        return list(om) if isinstance(om, list) else omega_menu(om["count"])

    @cached_property
    def params(self):
        cc = self.config["counterexample"]
        bump = None
        if cc["M"] is not None:
            rho = cc["rho"] if cc["rho"] is not None else largest_invertible_rho(cc["M"])
            bump = build_bump(rho, cc["M"])
        return build_counterexample(self.model, self.fd, bump, self.ren0.table)

    @property
    def seed(self) -> int:
        return int(self.config["seed"])


# ---------------------------------------------------------------------------
# structural checks


def _lobe_band(m, rng, count: int) -> np.ndarray:
    """Random points on scaled copies of the lobe, inside and just outside Sigma."""
    sep = m.separatrix
    pts = sep.points[sep.lobe_start:sep.lobe_end]
    centre = pts.mean(axis=0)
    pick = pts[rng.integers(0, len(pts), count)]
    scale = rng.uniform(0.5, 1.05, count)[:, None]
    return centre + scale * (pick - centre)


def check_symplectic(ws: Workspace, count: int = 100) -> CheckResult:
    rng = np.random.default_rng(ws.seed)
    m = ws.model.with_epsilon(1e-3)
    fd = ws.fd
    bump = ws.params.bump
    dev = {}

    pts = _lobe_band(m, rng, count)
    det = fd_determinant(lambda x, y: tuple(f_eps(m, (x, y))), pts[:, 0], pts[:, 1])
    dev["f_eps"] = float(np.max(np.abs(det - 1)))

    x = rng.uniform(0, 1, count)
    y = rng.uniform(-fd.c, fd.c, count)
    third = count // 3
    y[:third] = np.sign(y[:third]) * rng.uniform(0.5 * fd.c, 0.75 * fd.c, third)
    det = fd_determinant(lambda a, b: tuple(g_M(bump, (a, b), fd.c)), x, y, scale=(bump.rho, fd.c))
    dev["g_M"] = float(np.max(np.abs(det - 1)))

    fp = build_fpert(ws.model, bump, fd)
    x = fd.x_star * np.exp(rng.uniform(0, 1, count))
    y = rng.uniform(-0.9, 0.9, count) * fd.c / x
    det = fd_determinant(fp, x, y, scale=(fd.x_star * bump.rho, fd.c / fd.x_star))
    dev["f_pert"] = float(np.max(np.abs(det - 1)))

    def germ(x, y):
        return x * np.exp(-0.1 * (1 + x * y)), y * np.exp(0.1 * (1 + x * y))

    ext = extend_symplectic(germ, 0.5)
    r = 0.5 * np.sqrt(rng.uniform(0, 1, count))
    ang = rng.uniform(0, 2 * np.pi, count)
    det = fd_determinant(ext, r * np.cos(ang), r * np.sin(ang))
    dev["extension"] = float(np.max(np.abs(det - 1)))

    tol = ws.tolerances["jacobian"]
    return CheckResult(1, "symplecticity of f_eps, g_M, f_pert and the extension",
                       all(v < tol for v in dev.values()),
                       {"max_abs_det_minus_1": dev, "points_each": count}, {"jacobian": tol})


def check_flow_conservation(ws: Workspace, steps: int = 10_000, dt: float = 1e-3,
                            count: int = 1000) -> CheckResult:
    rng = np.random.default_rng(ws.seed + 1)
    x0, y0 = rng.uniform(-1, 1, count), rng.uniform(-1, 1, count)
    p = PlanePoint(x0, y0)
    q = ws.model.q
    for _ in range(steps):
        p = local_flow(q, dt, p)
    drift = float(np.max(np.abs(p.x * p.y - x0 * y0)))
    tol = ws.tolerances["flow_drift"]
    return CheckResult(2, "closed-form flow conserves xy", drift < tol,
                       {"max_xy_drift": drift, "steps": steps, "dt": dt}, {"flow_drift": tol})


def check_bnf_order(ws: Workspace, seeds=(0, 1, 2), order: int = 5) -> CheckResult:
    slopes = []
    rho = np.logspace(-3, -1, 9)
    for s in seeds:
        H = random_perturbation(np.random.default_rng(ws.seed + s), (3, 4))
        q, gens = bnf_normalize(H, order)
        z = generator_chain(gens, rho, rho)
        r = np.abs(H(0.0, z.x, z.y) - q(rho * rho))
        slopes.append(float(np.polyfit(np.log(rho), np.log(r), 1)[0]))
    need = order + ws.tolerances["bnf_slope_excess"]
    return CheckResult(3, "normal form remainder order", min(slopes) >= need,
                       {"slopes": slopes, "N": order}, {"min_slope": need})


# ---------------------------------------------------------------------------
# return map and renormalization


def check_return_time(ws: Workspace, samples: int = 13) -> CheckResult:
    m, fd = ws.model, ws.fd
    lam = m.q.lam
    x = fd.x_star * math.exp(-0.3)
    lv = np.linspace(math.log(1e-10), math.log(1e-4), samples)
    _, n = first_return(m, fd, (np.full(samples, x), np.exp(lv) / x))
    dev = float(np.max(np.abs(n * lam / np.abs(lv) - 1.0)))
    tol = ws.tolerances["return_time"]
    return CheckResult(4, "return time follows |ln v| / lambda", dev <= tol,
                       {"max_relative_deviation": dev, "return_index": n, "samples": samples},
                       {"return_time": tol})


def check_renorm_oracle(ws: Workspace, grid: int = 64) -> CheckResult:
    ren, fd = ws.ren0, ws.fd
    xb, lv = np.meshgrid(np.linspace(0, 1, grid, endpoint=False),
                         np.linspace(math.log(1e-10), math.log(0.99 * fd.entry_height), grid))
    a = AnnulusPoint(xb.ravel(), lv.ravel())
    out = ren.bar_f(a)
    expect = np.mod(a.x + ren.l(a.logy), 1.0)
    sup = float(max(np.max(np.abs((out.x - expect + 0.5) % 1.0 - 0.5)),
                    np.max(np.abs(out.logy - a.logy))))
    spread = 0.0
    for v in (1e-8, 1e-6, 1e-4, 1e-3):
        s = sigma_estimate(ws.model, fd, np.full(20, v), np.linspace(0, 1, 20, endpoint=False))
        spread = max(spread, float(np.ptp(s)))
    t = ws.tolerances
    return CheckResult(5, "simulated bar_f is the translation T_l",
                       sup < t["oracle"] and spread < t["sigma_spread"],
                       {"sup_norm": sup, "sigma_spread": spread, "grid": grid},
                       {"oracle": t["oracle"], "sigma_spread": t["sigma_spread"]})


def check_twist(ws: Workspace, n0: int = 6, span: int = 10,
                epsilons=(1e-2, 1e-3, 1e-4), grid: int = 8) -> CheckResult:
    ren0 = ws.ren0
    levels = list(range(n0, n0 + span + 1))
    y = np.linspace(math.exp(-1), 1.0, 200)
    twist = min(float(np.min(np.abs(ren0.dl_ring(n, y)))) for n in levels)
    bound = 1.0 / (2 * ws.model.q.lam)

    gx, gy = np.meshgrid(np.linspace(0, 1, grid, endpoint=False), np.linspace(math.exp(-1), 1.0, grid))
    gx, gy = gx.ravel(), gy.ravel()
    for n in levels:
        ren0.check_level(n)
    xs = np.tile(gx, len(levels))
    ys = np.tile(gy, len(levels))
    ns = np.repeat(levels, len(gx))
    lv = np.log(ys) - ns
    expect = np.mod(xs + ren0.l(lv), 1.0)
    devs = {}
    for eps in epsilons:
        out = ws.renormalization(eps).bar_f(AnnulusPoint(xs, lv))
        dx = np.abs((out.x - expect + 0.5) % 1.0 - 0.5)
        dy = np.abs(np.exp(out.logy - lv) - 1.0) * ys
        per = np.maximum(dx, dy).reshape(len(levels), -1).max(axis=1)
        devs[eps] = per
    table = np.array([devs[e] for e in epsilons])
    decreasing = bool(np.all(np.diff(table, axis=0) < 0))
    return CheckResult(6, "twist bound and deviation from T_l shrinking with epsilon",
                       twist >= bound and decreasing,
                       {"min_twist": twist, "levels": levels, "epsilons": list(epsilons),
                        "deviation": {repr(e): devs[e].tolist() for e in epsilons},
                        "decreasing_at_every_level": decreasing},
                       {"min_twist": bound})


# ---------------------------------------------------------------------------
# invariant curves


def run_sweep_task(ren: Renormalization, n: int, omegas):
    return sweep_level(ren, n, omegas)


def check_invariant_curves(ws: Workspace, summaries) -> CheckResult:
    t = ws.tolerances
    by_eps: dict[float, list] = {}
    for s in summaries:
        by_eps.setdefault(s.epsilon, []).append(s)
    counts, closure, inv, dist, rel = {}, [], [], {}, []
    for eps, rows in sorted(by_eps.items()):
        rows = sorted(rows, key=lambda s: s.n)
        counts[repr(eps)] = {str(s.n): s.invariant_count for s in rows}
        dist[repr(eps)] = {str(s.n): s.distance_to_sigma for s in rows}
        for s in rows:
            closure.append(max(s.lifted.closure_gap, s.lifted.overlap_distance))
            inv.append(s.invariance)
            _, dev = rotation_relation_check(s.alpha_hat, s.lifted_omega, t["rotation_relation"],
                                             orientation=-1)
            rel.append(dev)
    enough = all(c >= t["min_curves"] for d in counts.values() for c in d.values())
    lifts_ok = max(closure) < t["closure"] and max(inv) < t["invariance"]
    dist_dec = all(all(b < a for a, b in zip(list(d.values()), list(d.values())[1:]))
                   for d in dist.values())
    top = max(s.n for s in summaries)
    dist_top = max(s.distance_to_sigma for s in summaries if s.n == top)
    rel_ok = len(rel) >= t["rotation_samples"] and max(rel) < t["rotation_relation"]
    passed = enough and lifts_ok and dist_dec and dist_top < t["distance_to_sigma"] and rel_ok
    parts = {"curve_count": enough, "lift_closure_and_invariance": lifts_ok,
             "distance_decreasing": dist_dec, "distance_at_top_level": dist_top < t["distance_to_sigma"],
             "rotation_relation": rel_ok}
    return CheckResult(7, "invariant circles accumulating on Sigma", passed,
                       {"invariant_counts": counts, "max_closure": max(closure),
                        "max_invariance": max(inv), "distance_to_sigma": dist,
                        "top_level": top, "distance_at_top_level": dist_top,
                        "rotation_relation_max_dev": max(rel), "rotation_samples": len(rel),
                        "parts": parts},
                       {k: t[k] for k in ("min_curves", "newton_residual", "closure", "invariance",
                                          "distance_to_sigma", "rotation_relation",
                                          "rotation_samples")})


def accumulation_rows(summaries) -> list[dict]:
    rows = []
    for s in sorted(summaries, key=lambda s: (s.epsilon, s.n)):
        rows.append({"epsilon": s.epsilon, "n": s.n, "curves": len(s.results),
                     "invariant": s.invariant_count, "lifted_omega": s.lifted_omega,
                     "tau": s.lifted.tau if s.lifted else float("nan"),
                     "alpha_hat": s.alpha_hat, "distance_to_sigma": s.distance_to_sigma,
                     "invariance": s.invariance})
    return rows


# ---------------------------------------------------------------------------
# counterexample


@dataclass
class CounterexampleRun:
    params: object
    report: object
    certificate: object
    control: dict
    cross_validation: dict


def run_counterexample(ws: Workspace) -> CounterexampleRun:
    cc = ws.config["counterexample"]
    params = ws.params
    report = descent_run(params, cc["log_y0"], cc["steps"])
    cert = certify_no_invariant_circle(ws.model, ws.fd, params, report)
    n = cc["control_level"]
    control = control_case(ws.model, ws.fd, params, n, ws.omegas[:cc["control_omegas"]])
    x = np.array([-0.95, -0.7, -0.4, -0.05, -0.34])
    cross = {}
    for ly in cc["cross_validation_logy"]:
        sx, sl, _ = simulate_bar_fpert(ws.model, ws.fd, params, x, np.full(len(x), ly))
        fx, fl = bar_fpert(params, x, np.full(len(x), ly))
        cross[repr(float(ly))] = float(max(np.max(np.abs((sx - fx + 0.5) % 1.0 - 0.5)),
                                           np.max(np.abs(sl - fl))))
    return CounterexampleRun(params, report, cert, control, cross)


def check_counterexample(ws: Workspace, run: CounterexampleRun) -> CheckResult:
    t = ws.tolerances
    bp = run.params.bump
    pts = sorted({1 / 3 - 1 / 24, 1 / 3 + 1 / 24, 2 / 3 - bp.rho / 2, 2 / 3 + bp.rho / 2})
    with warnings.catch_warnings():
        # asking for 1e-14 trips the roundoff warning; the value is what is checked
        warnings.simplefilter("ignore", IntegrationWarning)
        integral = quad(lambda u: math.exp(bp.phi(u)), 0, 1, points=pts, limit=400,
                        epsabs=1e-14, epsrel=1e-14)[0]
    tt = np.linspace(bp.I[0], bp.I[1], 2001)
    slope = -bp.phi_d(tt)
    items = {
        "phi_below_minus_bM": bool(np.all(bp.phi(tt) <= -bp.b * bp.M)),
        "slope_lower": bool(np.all(slope >= bp.M / bp.I_length * (1 - 1e-12))),
        "slope_upper": bool(np.all(slope <= bp.M / (bp.b * bp.I_length) * (1 + 1e-12))),
    }
    lb = derivative_bounds(bp, run.params.lam)
    lim = DERIVATIVE_BOUND * (1 - t["derivative_margin"])
    bounds_ok = (lb["dt_dphi_max"] <= lb["I_over_M"] * (1 + 1e-9) and lb["I_over_M"] <= lim
              and lb["dx_dphi_dev"] <= lim and lb["dlogy_dphi_dev"] <= lim)
    sup = run.report.sup_logy
    drops = [b - a for a, b in zip(sup, sup[1:])]
    bM = run.params.bM
    descent = (len(drops) >= 10 and all(d <= -bM for d in drops) and bM >= t["min_descent"]
               and not run.report.violations)
    cross_ok = max(run.cross_validation.values()) < t["cross_validation"]
    control_ok = run.control["curves_found"] > 0 and not run.control["certificate_produced"]
    parts = {"bump_integral": abs(integral - 1) < t["bump_integral"],
             "bump_items": all(items.values()), "derivative_bounds": bounds_ok,
             "descent": descent, "cross_validation": cross_ok,
             "certificate": bool(run.certificate.produced), "control": control_ok}
    return CheckResult(8, "graph descent and certificate for the perturbed map", all(parts.values()),
                       {"M": bp.M, "rho": bp.rho, "bM": bM, "bump_integral": integral,
                        "bump_items": items, "derivative_bounds": lb, "descent_per_step": drops,
                        "cross_validation": run.cross_validation,
                        "certificate_reason": run.certificate.reason,
                        "control": run.control, "parts": parts},
                       {"bump_integral": t["bump_integral"], "derivative_bound": lim,
                        "min_descent": t["min_descent"], "cross_validation": t["cross_validation"]})


def check_determinism(files_a: dict[str, bytes], files_b: dict[str, bytes]) -> CheckResult:
    """Byte comparison of two output trees keyed by relative path."""
    names = sorted(set(files_a) | set(files_b))
    differ = [n for n in names if files_a.get(n) != files_b.get(n)]
    return CheckResult(9, "reruns are byte-identical", not differ,
                       {"files_compared": len(names), "differing": differ}, {})


STRUCTURAL_CHECKS = (check_symplectic, check_flow_conservation, check_bnf_order,
                     check_return_time, check_renorm_oracle, check_twist)


def safe_check(criterion: int, fn, *args, **kw) -> CheckResult:
    """Run a check; a domain failure becomes a failed result instead of an abort."""
    try:
        return fn(*args, **kw)
    except DomainError as exc:
        return CheckResult(criterion, fn.__name__, False, {}, {}, note=f"DomainError: {exc}")
