"""Rotation numbers, translated-curve solver, lifting annulus curves back to the plane.

The solver is the parameterization method: find an embedding
K(theta) = (theta + p(theta), u(theta)) and a shift t with
psi(K(theta)) = K(theta + omega) + (0, t), by Newton (least squares) on Fourier
coefficients. Graphs are logy = u(x) in whatever fiber coordinate psi uses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import _geometry
from ._validation import ConvergenceError, DomainError, check_int, check_positive
from .model import ModelFamily, f_eps
from .return_renorm import (AnnulusPoint, FundamentalDomainSpec, Renormalization, in_domain,
                            normalizer_h_inv)

GRID = 512
MODES = 128
NEWTON_TOL = 1e-10
NEWTON_MAX = 30
FD_H = 1e-6
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# rotation numbers


def _weights(n: int) -> np.ndarray:
    s = (np.arange(n) + 0.5) / n
    w = np.exp(-1.0 / (s * (1.0 - s)))
    return w / w.sum()


@dataclass(frozen=True)
class RotationEstimate:
    value: float
    error: float


def rotation_number(lift: Callable[[float], float], x0: float = 0.0, n_iters: int = 20000,
                    scheme: str = "weighted", period: float = 1.0,
                    check_points: int = 1024) -> RotationEstimate:
    """Rotation number (in turns) of a degree-one circle map given by its lift.

    `scheme` is "weighted" (exp(-1/(s(1-s))) Birkhoff weights) or "plain".
    The error estimate is the change when the orbit length is halved.
    """
    n_iters = check_int("n_iters", n_iters, 16)
    check_positive("period", period)
    grid = np.linspace(0.0, period, check_points, endpoint=False)
    vals = np.array([lift(float(g)) for g in grid])
    shifted = np.array([lift(float(g) + period) for g in grid[:8]])
    if np.any(np.diff(vals) <= 0) or vals[-1] >= vals[0] + period:
        raise DomainError("lift is not increasing")
    if np.max(np.abs(shifted - vals[:8] - period)) > 1e-9 * max(1.0, period):
        raise DomainError("map is not a degree-one circle map")
    x = float(x0)
    inc = np.empty(n_iters)
    for k in range(n_iters):
        xr = math.fmod(x, period)
        if xr < 0:
            xr += period
        nxt = lift(xr)
        inc[k] = nxt - xr
        x = nxt
    if scheme == "weighted":
        full = float(np.dot(_weights(n_iters), inc))
        half = float(np.dot(_weights(n_iters // 2), inc[: n_iters // 2]))
    elif scheme == "plain":
        full = float(inc.mean())
        half = float(inc[: n_iters // 2].mean())
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return RotationEstimate(full / period, abs(full - half) / period)


def omega_menu(count: int = 30) -> list[float]:
    """gamma = golden mean - 1 and its images 1/(m + gamma), m = 2..count; all noble."""
    out = [GOLDEN]
    out += [1.0 / (m + GOLDEN) for m in range(2, count + 1)]
    return out


def continued_fraction(x: float, terms: int = 12) -> list[int]:
    out = []
    for _ in range(terms):
        a = math.floor(x)
        out.append(int(a))
        x -= a
        if x < 1e-12:
            break
        x = 1.0 / x
    return out


def rotation_relation_check(alpha_hat: float, alpha_bar: float, tol: float = 1e-6,
                            orientation: int = 1):
    """(passed, deviation) for frac(1/alpha_hat) against orientation * alpha_bar, mod 1.

    Rotation numbers measured in a chart whose angle runs against the motion on
    the plane circle need orientation=-1.
    """
    if alpha_hat == 0:
        raise DomainError("alpha_hat must be non-zero")
    if not 0 < alpha_hat < 1:
        raise DomainError("alpha_hat must lie in (0, 1)")
    if orientation not in (1, -1):
        raise ValueError("orientation must be 1 or -1")
    inv = 1.0 / alpha_hat
    d = abs((inv - math.floor(inv) - orientation * alpha_bar + 0.5) % 1.0 - 0.5)
    return d < tol, d


def hausdorff(a, b) -> float:
    return _geometry.hausdorff(a, b)


def curve_hausdorff(a, b) -> float:
    """Hausdorff distance with both polylines read as cubic interpolants of their vertices."""
    return max(float(np.max(_geometry.distance_to_curve(a, b))),
               float(np.max(_geometry.distance_to_curve(b, a))))


# ---------------------------------------------------------------------------
# curves and the solver


def _basis(theta: np.ndarray, K: int) -> np.ndarray:
    k = np.arange(1, K + 1)
    arg = 2.0 * np.pi * np.outer(theta, k)
    return np.hstack([np.ones((len(theta), 1)), np.cos(arg), np.sin(arg)])


@dataclass
class GraphCurve:
    """Curve K(theta) = (theta + p(theta), u(theta)); as a graph, logy = gamma(x).

    Coefficient vectors are [a0, a1..aK, b1..bK] for a0 + sum a_k cos + b_k sin.
    """

    p: np.ndarray
    u: np.ndarray
    domain: str = "ring"
    residual: float = float("nan")

    @property
    def K(self) -> int:
        return (len(self.u) - 1) // 2

    def embed(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        B = _basis(theta, self.K)
        return theta + B @ self.p, B @ self.u

    def graph(self, x):
        """gamma(x): solve theta + p(theta) = x by Newton, then u(theta)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = np.arange(1, self.K + 1)
        a, b = self.p[1:self.K + 1], self.p[self.K + 1:]
        th = x.copy()
        for _ in range(50):
            arg = 2 * np.pi * np.outer(th, k)
            val = th + self.p[0] + np.cos(arg) @ a + np.sin(arg) @ b - x
            der = 1.0 + 2 * np.pi * (np.cos(arg) @ (k * b) - np.sin(arg) @ (k * a))
            step = val / der
            th -= step
            if np.max(np.abs(step)) < 1e-15:
                break
        return self.embed(th)[1]

    def graph_coefficients(self, n: int = GRID) -> np.ndarray:
        x = np.arange(n) / n
        spec = np.fft.rfft(self.graph(x)) / n
        return spec[: self.K + 1]

    def mean(self) -> float:
        return float(self.u[0])

    @classmethod
    def constant(cls, value: float, K: int = MODES, domain: str = "ring") -> "GraphCurve":
        u = np.zeros(2 * K + 1)
        u[0] = value
        return cls(np.zeros(2 * K + 1), u, domain)


@dataclass
class TranslatedCurveResult:
    curve: GraphCurve
    t: float
    omega: float
    residual: float
    newton_iters: int
    converged: bool
    history: list[float] = field(default_factory=list)

    @property
    def invariant(self) -> bool:
        return self.converged and abs(self.t) <= 10 * max(self.residual, 1e-16)

    def record(self) -> dict:
        return {"omega": self.omega, "t": self.t, "residual": self.residual,
                "newton_iters": self.newton_iters, "converged": self.converged,
                "mean_logy": self.curve.mean()}


def _wrap(d):
    return (d + 0.5) % 1.0 - 0.5


def find_translated_curve(psi: Callable, omega: float, init: GraphCurve,
                          tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX,
                          grid: int = GRID) -> TranslatedCurveResult:
    """Newton for psi(K(theta)) = K(theta + omega) + (0, t); psi maps (x, logy) arrays.

    Returns the best iterate even without convergence (converged=False).
    """
    K = init.K
    if grid < 2 * K + 1:
        raise DomainError("grid too coarse for the number of modes")
    theta = np.arange(grid) / grid
    B = _basis(theta, K)
    Bw = _basis(theta + omega, K)
    Bp, Bwp = B[:, 1:], Bw[:, 1:]           # p has zero mean (gauge)
    p = init.p[1:].copy()
    u = init.u.copy()
    t = 0.0

    def residual(p, u, t):
        x = theta + Bp @ p
        y = B @ u
        px, py = psi(x, y)
        r1 = _wrap(np.asarray(px) - theta - omega - Bwp @ p)
        r2 = np.asarray(py) - Bw @ u - t
        return r1, r2, x, y

    history = []
    best = None
    polished = False
    for it in range(max_iter + 1):
        r1, r2, x, y = residual(p, u, t)
        res = float(max(np.max(np.abs(r1)), np.max(np.abs(r2))))
        history.append(res)
        if not np.isfinite(res):
            break
        if best is None or res < best[0]:
            best = (res, p.copy(), u.copy(), t, it)
        # one polishing step past the tolerance, kept only if it helps
        if polished or (res < tol and res < 1e-15):
            break
        polished = res < tol
        if it == max_iter:
            break
        # Jacobian of psi by central differences
        xp1, yp1 = psi(x + FD_H, y)
        xm1, ym1 = psi(x - FD_H, y)
        xp2, yp2 = psi(x, y + FD_H)
        xm2, ym2 = psi(x, y - FD_H)
        a = _wrap(np.asarray(xp1) - np.asarray(xm1)) / (2 * FD_H)
        b = _wrap(np.asarray(xp2) - np.asarray(xm2)) / (2 * FD_H)
        c = (np.asarray(yp1) - np.asarray(ym1)) / (2 * FD_H)
        d = (np.asarray(yp2) - np.asarray(ym2)) / (2 * FD_H)
        top = np.hstack([a[:, None] * Bp - Bwp, b[:, None] * B, np.zeros((grid, 1))])
        bot = np.hstack([c[:, None] * Bp, d[:, None] * B - Bw, -np.ones((grid, 1))])
        J = np.vstack([top, bot])
        rhs = -np.concatenate([r1, r2])
        delta = np.linalg.lstsq(J, rhs, rcond=None)[0]
        p = p + delta[:2 * K]
        u = u + delta[2 * K:4 * K + 1]
        t = t + delta[-1]
    res, p, u, t, it = best
    curve = GraphCurve(np.concatenate([[0.0], p]), u, init.domain, res)
    return TranslatedCurveResult(curve, float(t), float(omega), res, it, res < tol, history)


# ---------------------------------------------------------------------------
# ring maps of a renormalization


def ring_psi(ren: Renormalization, n: int, method: str = "table") -> Callable:
    """psi(x, logy) for the rescaled ring map at level n."""
    ren.check_level(n)

    def psi(x, logy):
        xs, ys = ren.ring_f(n, np.asarray(x), np.exp(np.asarray(logy)), method)
        return np.asarray(xs), np.log(np.asarray(ys))

    return psi


def integrable_guess(ren: Renormalization, n: int, omega: float, K: int = MODES) -> GraphCurve:
    """The circle l_{0,n}(y) = omega mod 1 of the integrable ring map, as a constant graph."""
    def g(s):
        return float(ren.l_ring(n, math.exp(s))) - omega

    lo, hi = -1.0, 0.0
    glo, ghi = g(lo), g(hi)
    j = math.ceil(glo)
    if j > ghi:
        raise DomainError(f"omega={omega} is not attained by l on the ring at n={n}")
    s = brentq(lambda s: g(s) - j, lo, hi, xtol=1e-15)
    return GraphCurve.constant(s, K, "ring")


def solve_ring_curve(ren: Renormalization, n: int, omega: float, method: str = "table",
                     continuation: int = 4, K: int = MODES) -> TranslatedCurveResult:
    """Solve at the model's epsilon; on failure continue from epsilon = 0 in equal steps."""
    init = integrable_guess(ren, n, omega, K)
    res = find_translated_curve(ring_psi(ren, n, method), omega, init)
    if res.converged or ren.model.epsilon == 0.0:
        return res
    eps = ren.model.epsilon
    cur = init
    for k in range(1, continuation + 1):
        sub = Renormalization(ren.model.with_epsilon(eps * k / continuation), ren.fd, ren.base)
        sub._table = ren.table
        res = find_translated_curve(ring_psi(sub, n, method), omega, cur)
        if not res.converged:
            return res
        cur = res.curve
    return res


# ---------------------------------------------------------------------------
# lifting to the plane


@dataclass
class LiftedCircle:
    polyline: np.ndarray = field(repr=False)
    tau: float
    n_return: int
    s_star: float
    closure_gap: float
    overlap_distance: float
    self_distance: float
    samples_per_arc: int
    arcs: list = field(repr=False, default_factory=list)
    psi_spline: CubicSpline | None = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.closure_gap < 1e-7 and self.overlap_distance < 1e-7

    def circle_lift(self, t: float) -> float:
        """f on the circle, in the parameter t in [0, tau) of Z(t) = f^k(gamma(s))."""
        k = math.floor(t / self.tau)
        nt = t - k * self.tau + 1.0
        if nt < self.tau:
            return nt + k * self.tau
        return float(self.psi_spline(nt - self.tau)) + (k + 1) * self.tau

    def rotation(self, n_iters: int = 20000) -> RotationEstimate:
        return rotation_number(self.circle_lift, 0.0, n_iters, period=self.tau)


def _annulus_graph(curve: GraphCurve, n_level: int, s):
    return curve.graph(s) - n_level


def _orbits(m: ModelFamily, pts: np.ndarray, steps: int) -> np.ndarray:
    out = np.empty((steps + 1, len(pts), 2))
    out[0] = pts
    x, y = pts[:, 0], pts[:, 1]
    for k in range(steps):
        z = f_eps(m, (x, y))
        x, y = z.x, z.y
        out[k + 1, :, 0] = x
        out[k + 1, :, 1] = y
    return out


def _first_entry(m, fd, orb):
    """Index of the first k >= 1 with the k-th iterate in F (len if none)."""
    inside = in_domain(m, fd, orb[1:, :, 0], orb[1:, :, 1])
    first = np.where(inside.any(axis=0), inside.argmax(axis=0) + 1, orb.shape[0])
    return first


def lift_circle(m: ModelFamily, fd: FundamentalDomainSpec, curve: GraphCurve, n_level: int,
                samples: int = 256, self_tol: float = 1e-6, max_samples: int = 4096) -> LiftedCircle:
    """Continue gamma^ = h^-1(gamma_bar) by f until it re-enters F and close it up.

    `curve` is a ring graph at renormalization level n_level (annulus fiber
    ln v = gamma(x) - n_level). Samples per arc double until successive polylines
    are within `self_tol` in Hausdorff distance.
    """
    prev = None
    m_s = samples
    s_all = np.arange(m_s) / m_s
    orb_all = None
    while True:
        if orb_all is None:
            s_new = s_all
        else:
            s_new = (np.arange(m_s // 2) + 0.5) / (m_s // 2)
        gam = normalizer_h_inv(m, fd, AnnulusPoint(s_new, _annulus_graph(curve, n_level, s_new)))
        pts = np.column_stack([gam.x, gam.y])
        # enough steps to pass the return of every sample
        base_steps = orb_all.shape[0] - 1 if orb_all is not None else None
        steps = base_steps or 8
        orb = _orbits(m, pts, steps)
        first = _first_entry(m, fd, orb)
        while np.any(first > orb.shape[0] - 1) or orb.shape[0] - 1 < first.max() + 1:
            extra = _orbits(m, orb[-1], 8)[1:]
            orb = np.concatenate([orb, extra])
            first = _first_entry(m, fd, orb)
        if orb_all is None:
            orb_all, s_grid = orb, s_new
        else:
            L = max(orb_all.shape[0], orb.shape[0])
            if orb_all.shape[0] < L:
                orb_all = np.concatenate([orb_all, _orbits(m, orb_all[-1], L - orb_all.shape[0])[1:]])
            if orb.shape[0] < L:
                orb = np.concatenate([orb, _orbits(m, orb[-1], L - orb.shape[0])[1:]])
            merged = np.empty((L, m_s, 2))
            merged[:, 0::2] = orb_all
            merged[:, 1::2] = orb
            orb_all, s_grid = merged, s_all
        lifted = _assemble(m, fd, curve, n_level, s_grid, orb_all)
        if prev is not None:
            lifted.self_distance = curve_hausdorff(prev.polyline, lifted.polyline)
            if lifted.self_distance < self_tol or 2 * m_s > max_samples:
                return lifted
        prev = lifted
        m_s *= 2
        s_all = np.arange(m_s) / m_s


def _assemble(m, fd, curve, n_level, s, orb) -> LiftedCircle:
    first = _first_entry(m, fd, orb)
    n_star = int(first.min())
    # landing chart coordinate for the samples that return after n_star or n_star + 1 steps
    xs = np.log(fd.x_star)
    land = np.empty(len(s))
    for j in range(len(s)):
        p = orb[first[j], j]
        land[j] = (xs - math.log(p[0])) / float(m.q.d1(p[0] * p[1]))
    if not set(np.unique(first)) <= {n_star, n_star + 1}:
        raise ConvergenceError("return times of the curve differ by more than one")
    # s* solves landing(s) = 0 on the n_star branch; the landing coordinate is
    # continuous in s once the n_star + 1 branch is shifted down by one step
    cont = np.where(first == n_star + 1, land - 1.0, land)
    ss = np.concatenate([s - 1.0, s, s + 1.0])
    period_shift = np.concatenate([cont - 1.0, cont, cont + 1.0])
    spline = CubicSpline(ss, period_shift)
    s_star = brentq(lambda x: float(spline(x)), -0.5, 1.5, xtol=1e-15)
    s_star %= 1.0
    # Z(tau) by direct iteration
    z0 = normalizer_h_inv(m, fd, AnnulusPoint(np.array([s_star]),
                                              _annulus_graph(curve, n_level, np.array([s_star]))))
    zt = _orbits(m, np.column_stack([z0.x, z0.y]), n_star)[-1, 0]
    g0 = normalizer_h_inv(m, fd, AnnulusPoint(np.array([0.0]), _annulus_graph(curve, n_level, np.array([0.0]))))
    closure = math.hypot(zt[0] - g0.x[0], zt[1] - g0.y[0])
    tau = n_star + s_star
    # polyline for t in [0, tau]
    pieces = [orb[k] for k in range(n_star)]
    pieces.append(orb[n_star][s <= s_star])
    pieces.append(zt[None])
    poly = np.concatenate(pieces)
    # Z([tau, tau + 1]) against Z([0, 1]) = gamma^ closed by f(gamma^(0))
    z1 = _orbits(m, zt[None], 1)[-1, 0]
    after = np.concatenate([zt[None], orb[n_star][s > s_star], orb[n_star + 1][s < s_star],
                            z1[None]])
    s_after = np.concatenate([[0.0], s[s > s_star] - s_star, s[s < s_star] + 1.0 - s_star, [1.0]])
    gclosed = np.concatenate([orb[0], orb[1][:1]])
    overlap = curve_hausdorff(after, gclosed)
    # psi(s) = chart coordinate of Z(tau + s); extended by psi(s + 1) = psi(s) + 1
    psi_vals = (xs - np.log(after[:, 0])) / m.q.d1(after[:, 0] * after[:, 1])
    ext_s = np.concatenate([s_after[:-1] - 1.0, s_after[:-1], s_after + 1.0])
    ext_v = np.concatenate([psi_vals[:-1] - 1.0, psi_vals[:-1], psi_vals + 1.0])
    psi_spline = CubicSpline(ext_s, ext_v)
    return LiftedCircle(poly, tau, n_star, s_star, closure, overlap, float("nan"), len(s),
                        pieces, psi_spline)


def level_error(m: ModelFamily, lifted: LiftedCircle) -> float:
    """max |H0 - mean H0| on the lifted polyline."""
    h = m.H0(lifted.polyline[:, 0], lifted.polyline[:, 1])
    return float(np.max(np.abs(h - np.mean(h))))


def invariance_error(m: ModelFamily, fd: FundamentalDomainSpec, curve: GraphCurve, n_level: int,
                     lifted: LiftedCircle, samples: int = 200, seed: int = 0) -> float:
    """Distance of f(Z(t)) to the lifted curve for random t off the polyline vertices."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 1.0, samples)
    k = rng.integers(0, max(1, lifted.n_return - 1), samples)
    z = normalizer_h_inv(m, fd, AnnulusPoint(s, _annulus_graph(curve, n_level, s)))
    pts = np.column_stack([z.x, z.y])
    out = np.empty_like(pts)
    for kk in np.unique(k):
        sel = k == kk
        out[sel] = _orbits(m, pts[sel], int(kk) + 1)[-1]
    return float(np.max(_geometry.distance_to_curve(out, lifted.polyline)))


def plane_rotation_number(lifted: LiftedCircle, n_iters: int = 20000) -> RotationEstimate:
    """alpha^ of f on the lifted circle (turns per step)."""
    return lifted.rotation(n_iters)


def distance_to_sigma(m: ModelFamily, lifted: LiftedCircle) -> float:
    return hausdorff(lifted.polyline, m.separatrix.points)


def write_catalog(path, records: list[dict]) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"schema_version": 1, "curves": records}, indent=2,
                               sort_keys=True) + "\n")
    return path


def write_polyline_csv(path, poly) -> Path:
    path = Path(path)
    lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in np.asarray(poly).tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# sweeps over levels


@dataclass
class LevelSummary:
    epsilon: float
    n: int
    results: list = field(repr=False)
    lifted: LiftedCircle | None = field(repr=False, default=None)
    lifted_omega: float | None = None
    invariance: float = float("nan")
    distance_to_sigma: float = float("nan")
    alpha_hat: float = float("nan")

    @property
    def invariant_count(self) -> int:
        return sum(1 for r in self.results if r.invariant and r.residual < NEWTON_TOL)


def sweep_level(ren: Renormalization, n: int, omegas=None, lift: bool = True,
                lift_index: int = 0, method: str = "table") -> LevelSummary:
    """Solve every menu rotation number at level n and lift one of the curves."""
    omegas = omega_menu() if omegas is None else list(omegas)
    results = [solve_ring_curve(ren, n, w, method) for w in omegas]
    out = LevelSummary(ren.model.epsilon, n, results)
    if lift:
        res = results[lift_index]
        lc = lift_circle(ren.model, ren.fd, res.curve, n)
        out.lifted, out.lifted_omega = lc, res.omega
        out.invariance = invariance_error(ren.model, ren.fd, res.curve, n, lc)
        out.distance_to_sigma = distance_to_sigma(ren.model, lc)
        out.alpha_hat = lc.rotation().value
    return out


def catalog_records(summaries) -> list[dict]:
    recs = []
    for s in summaries:
        for r in s.results:
            rec = {"epsilon": s.epsilon, "n": s.n, "omega": r.omega, "t": r.t,
                   "residual": r.residual, "newton_iters": r.newton_iters,
                   "converged": r.converged, "mean_logy": r.curve.mean(),
                   "hausdorff_to_sigma": None, "alpha_hat": None}
            if s.lifted is not None and r.omega == s.lifted_omega:
                rec["hausdorff_to_sigma"] = s.distance_to_sigma
                rec["alpha_hat"] = s.alpha_hat
                rec["closure_gap"] = s.lifted.closure_gap
                rec["overlap_distance"] = s.lifted.overlap_distance
                rec["invariance"] = s.invariance
            recs.append(rec)
    return recs
