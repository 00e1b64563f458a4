"""Concrete map families with a compact non-split separatrix.

H0 = q(xy) - kappa * w(|z|) * (x^4 + y^4), with w a C-infinity transition that is
0 below r_in and 1 above r_out (a finitely smooth glue stalls the high-order
integrator where orbits cross it). Inside D(o, r_in) the Hamiltonian is exactly
q(xy) and the time-1 map is evaluated in closed form. The separatrix is a
single lobe in the first quadrant.

The perturbation F(t, z) = cos(2 pi t) H0(z)^2 w(|z|) vanishes to second order
on {H0 = 0}, so Sigma stays invariant and the exact region is untouched.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import _geometry
from ._validation import ConvergenceError, DomainError, check_int, check_interval, check_positive
from .charts_flows import PlanePoint, integrate_fixed, local_flow
from .nf_algebra import PolyQ

BBOX = 2.5
CALIBRATION_TOL = 1e-11
GRAD_FLOOR = 1e-6   # squared gradient below which the energy projection is skipped


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep_d(s):
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 30.0 * s * s * (1.0 - s) ** 2, 0.0)


def _flat_step(s):
    """C-infinity transition e^{-1/s} / (e^{-1/s} + e^{-1/(1-s)}) from 0 to 1 on [0, 1]."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    si = np.where(inside, s, 0.5)
    a = np.exp(-1.0 / si)
    b = np.exp(-1.0 / (1.0 - si))
    return np.where(inside, a / (a + b), np.where(s >= 1.0, 1.0, 0.0))


def _flat_step_d(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    si = np.where(inside, s, 0.5)
    a = np.exp(-1.0 / si)
    b = np.exp(-1.0 / (1.0 - si))
    da = a / si ** 2
    db = -b / (1.0 - si) ** 2
    return np.where(inside, (da * b - a * db) / (a + b) ** 2, 0.0)


@dataclass(frozen=True)
class Glue:
    """Confining quartic kappa (x^4 + y^4) switched on between r_in and r_out."""

    r_in: float = 0.3
    r_out: float = 0.5
    kappa: float = 1.0


@dataclass(frozen=True)
class Separatrix:
    points: np.ndarray = field(repr=False)
    resolution: float
    lobe_start: int           # index of (0, r_in)
    lobe_end: int             # index of (r_in, 0)

    @property
    def max_extent(self) -> float:
        return float(np.max(np.abs(self.points)))

    @property
    def area(self) -> float:
        return _geometry.enclosed_area(self.points)


@dataclass(frozen=True)
class ModelFamily:
    q: PolyQ
    r0: float
    glue: Glue
    epsilon: float = 0.0
    steps: int = 16
    separatrix: Separatrix | None = field(default=None, compare=False, repr=False)

    # -- pieces of the Hamiltonian
    def cutoff(self, x, y):
        """w(r) and its gradient."""
        r = np.hypot(x, y)
        width = self.glue.r_out - self.glue.r_in
        s = (r - self.glue.r_in) / width
        w = _flat_step(s)
        dw = _flat_step_d(s) / width
        rs = np.where(r > 0, r, 1.0)
        return w, dw * x / rs, dw * y / rs

    def H0(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        w, _, _ = self.cutoff(x, y)
        return self.q(x * y) - self.glue.kappa * w * (x ** 4 + y ** 4)

    def grad_H0(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        w, wx, wy = self.cutoff(x, y)
        dq = self.q.d1(x * y)
        quart = x ** 4 + y ** 4
        k = self.glue.kappa
        return (dq * y - k * (wx * quart + 4.0 * w * x ** 3),
                dq * x - k * (wy * quart + 4.0 * w * y ** 3))

    def in_exact_region(self, x, y):
        return np.hypot(x, y) < self.glue.r_in

    @property
    def V_radius(self) -> float:
        return self.r0

    # -- extended vector field on (x, y, H0)
    def _field(self, t, state):
        x, y, e = state[0], state[1], state[2]
        hx, hy = self.grad_H0(x, y)
        if self.epsilon == 0.0:
            return np.stack([-hy, hx, np.zeros_like(e)])
        w, wx, wy = self.cutoff(x, y)
        beta = self.epsilon * math.cos(2.0 * math.pi * t)
        h0 = self.H0(x, y)
        gain = 1.0 + 2.0 * beta * h0 * w
        fx = hx * gain + beta * h0 * h0 * wx
        fy = hy * gain + beta * h0 * h0 * wy
        # d H0/dt = eps beta H0^2 <grad H0, J grad w>, integrated with the
        # tracked value so tiny energies keep their relative accuracy
        bracket = -hx * wy + hy * wx
        return np.stack([-fy, fx, beta * e * e * bracket])

    def with_epsilon(self, epsilon: float) -> "ModelFamily":
        epsilon = float(epsilon)
        m = replace(self, epsilon=epsilon)
        if abs(epsilon) > 1e-2:
            m = replace(m, steps=_calibrate_steps(m))
        return m

    def describe(self) -> dict:
        return {
            "schema_version": 1,
            "lambda": self.q.lam,
            "q_coefficients": [float(c) for c in self.q.coefficients],
            "r0": self.r0,
            "glue": {"r_in": self.glue.r_in, "r_out": self.glue.r_out,
                     "kappa": self.glue.kappa, "profile": "exp(-1/s) transition"},
            "perturbation": {"hamiltonian": "epsilon*cos(2*pi*t)*H0^2*w(r)",
                             "epsilon": self.epsilon},
            "integrator": {"scheme": "GBS(2,4,...,12)", "macro_steps": self.steps},
        }


def model_skeleton(lam: float = 1.0, r0: float = 0.1, glue: Glue | None = None,
                   q_higher: tuple[float, ...] = (), epsilon: float = 0.0) -> ModelFamily:
    """The closed-form checks of build_model; no separatrix, steps uncalibrated."""
    check_positive("lambda", lam)
    check_positive("r0", r0)
    glue = glue or Glue()
    check_positive("r_in", glue.r_in)
    check_positive("kappa", glue.kappa)
    if not glue.r_out > glue.r_in:
        raise DomainError("glue needs r_out > r_in")
    q = PolyQ(lam, tuple(q_higher))
    if q.validity_radius < glue.r_in ** 2:
        raise DomainError("q is not monotone on the exact region")
    vs = np.linspace(-glue.r_in ** 2 / 2, glue.r_in ** 2 / 2, 201)
    dq_max = float(np.max(q.d1(vs)))
    if math.exp(dq_max) * r0 >= glue.r_in:
        raise DomainError(f"f(D(o, r0)) leaves the exact disc: e^{{q'}} r0 = "
                          f"{math.exp(dq_max) * r0:.3g} >= r_in = {glue.r_in}")
    return ModelFamily(q, float(r0), glue, float(epsilon))


def build_model(lam: float = 1.0, r0: float = 0.1, glue: Glue | None = None,
                q_higher: tuple[float, ...] = (), epsilon: float = 0.0,
                resolution: float = 1e-3) -> ModelFamily:
    """Build and validate a model; raises DomainError if Sigma is not a compact lobe."""
    m = model_skeleton(lam, r0, glue, q_higher, epsilon)
    sep = trace_separatrix(m, resolution)
    if sep.max_extent >= 0.5 * BBOX:
        raise DomainError(f"separatrix extends to {sep.max_extent:.3g}; glue radius too large")
    m = replace(m, separatrix=sep)
    return replace(m, steps=_calibrate_steps(m))


def _calibrate_steps(m: ModelFamily, start: int = 8, cap: int = 512) -> int:
    """Smallest power-of-two macro step count whose doubling moves no sample by more than the tolerance."""
    sep = m.separatrix
    pts = sep.points[sep.lobe_start:sep.lobe_end]
    pts = pts[:: max(1, len(pts) // 40)]
    cx, cy = np.mean(pts, axis=0)
    samples = [pts]
    for s in (0.6, 0.9, 0.99, 1.01, 1.05):
        samples.append(np.column_stack([cx + s * (pts[:, 0] - cx), cy + s * (pts[:, 1] - cy)]))
    z = np.concatenate(samples)
    state = np.stack([z[:, 0], z[:, 1], m.H0(z[:, 0], z[:, 1])])
    steps = start
    prev = integrate_fixed(m._field, state, 0.0, 1.0, steps, BBOX)
    while steps < cap:
        cur = integrate_fixed(m._field, state, 0.0, 1.0, 2 * steps, BBOX)
        if np.max(np.abs(cur - prev)) <= CALIBRATION_TOL:
            return steps
        steps *= 2
        prev = cur
    raise ConvergenceError(f"time-1 map not resolved with {cap} macro steps")


# ---------------------------------------------------------------------------
# separatrix


def trace_separatrix(m: ModelFamily, resolution: float = 1e-3) -> Separatrix:
    """Closed polyline o -> (0, r_in) -> lobe -> (r_in, 0) -> o."""
    check_positive("resolution", resolution)
    r_in = m.glue.r_in

    def rhs(t, z):
        hx, hy = m.grad_H0(z[0], z[1])
        return [-hy, hx]

    def back_to_disc(t, z):
        return math.hypot(z[0], z[1]) - r_in if t > 0.5 else 1.0

    back_to_disc.terminal = True
    back_to_disc.direction = -1
    sol = solve_ivp(rhs, (0.0, 500.0), [0.0, r_in], method="DOP853", rtol=1e-13,
                    atol=1e-13, events=back_to_disc, dense_output=True)
    if sol.status != 1 or not len(sol.t_events[0]):
        raise DomainError("level-set continuation did not close: separatrix is not compact")
    t_end = float(sol.t_events[0][0])
    end = sol.y_events[0][0]
    if not (end[0] > 0 and abs(end[1]) < 1e-8):
        raise DomainError(f"separatrix came back at {end}, not along the stable axis")
    if np.max(np.abs(sol.y)) >= BBOX / 2:
        raise DomainError("separatrix lobe leaves the working box; increase kappa")
    # fine time grid, then thin to arclength spacing below the resolution
    t_fine = np.linspace(0.0, t_end, max(2000, int(t_end * 4000)))
    fine = sol.sol(t_fine).T
    seg = np.hypot(*np.diff(fine, axis=0).T)
    if np.any(seg > resolution / 2):
        raise ConvergenceError("fine separatrix sampling too coarse")
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n_out = int(math.ceil(arc[-1] / (0.9 * resolution))) + 1
    targets = np.linspace(0.0, arc[-1], n_out)
    t_pick = np.interp(targets, arc, t_fine)
    lobe = sol.sol(t_pick).T
    lobe[0] = (0.0, r_in)
    lobe[-1] = (r_in, 0.0)
    lobe[1:-1] = _project_to_level(m, lobe[1:-1], 0.0)
    n_axis = int(math.ceil(r_in / (0.9 * resolution))) + 1
    s = np.linspace(0.0, r_in, n_axis)
    up = np.column_stack([np.zeros_like(s), s])[:-1]
    down = np.column_stack([s[::-1], np.zeros_like(s)])[1:]
    pts = np.concatenate([up, lobe, down])
    return Separatrix(pts, float(resolution), len(up), len(up) + len(lobe) - 1)


def _project_to_level(m: ModelFamily, pts, level, iters: int = 3):
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    level = np.broadcast_to(np.asarray(level, dtype=float), x.shape)
    for _ in range(iters):
        gx, gy = m.grad_H0(x, y)
        g2 = gx * gx + gy * gy
        ok = g2 > GRAD_FLOOR
        step = np.where(ok, (m.H0(x, y) - level) / np.where(ok, g2, 1.0), 0.0)
        x = x - step * gx
        y = y - step * gy
    return np.column_stack([x, y])


def distance_to_separatrix(m: ModelFamily, points) -> np.ndarray:
    """Distance from points to Sigma, exact on the axis pieces and first order elsewhere."""
    sep = m.separatrix
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    r_in = m.glue.r_in
    out = _geometry.distance_to_polyline(pts, sep.points)
    gx, gy = m.grad_H0(x, y)
    gnorm = np.hypot(gx, gy)
    linear = np.abs(m.H0(x, y)) / np.where(gnorm > 0, gnorm, 1.0)
    near = (out < 10 * sep.resolution) & (gnorm > 1e-2) & (np.hypot(x, y) >= r_in)
    out = np.where(near, np.minimum(out, linear), out)
    # in the exact disc Sigma is the two axis segments
    inner = np.hypot(x, y) < r_in
    d_xaxis = np.hypot(np.clip(x, 0, r_in) - x, y)
    d_yaxis = np.hypot(x, np.clip(y, 0, r_in) - y)
    return np.where(inner, np.minimum(np.minimum(d_xaxis, d_yaxis), out), out)


# ---------------------------------------------------------------------------
# the time-1 map


def _as_arrays(z):
    x = np.asarray(z[0], dtype=float)
    y = np.asarray(z[1], dtype=float)
    x, y = np.broadcast_arrays(x, y)
    return x, y


def _shape_like(arr, ref):
    return arr.item() if np.ndim(ref) == 0 else arr.reshape(np.shape(ref))


def f_eps(m: ModelFamily, z, inverse: bool = False) -> PlanePoint:
    """Time-1 map (time -1 map with inverse=True) of the model, vectorized."""
    x0, y0 = _as_arrays(z)
    x = x0.ravel()
    y = y0.ravel()
    out_x, out_y, _, _ = f_eps_tracked(m, x, y, m.H0(x, y), inverse)
    return PlanePoint(_shape_like(out_x, x0), _shape_like(out_y, y0))


def f_eps_tracked(m: ModelFamily, x, y, e, inverse: bool = False):
    """One step on (x, y, H0) with the energy carried along as a separate state.

    Returns (x, y, e, exact) where `exact` flags the closed-form branch. Passing
    e = q(v) for a tiny fiber v keeps v to full relative precision even where the
    position itself only resolves Sigma.
    """
    x = np.array(x, dtype=float).ravel()
    y = np.array(y, dtype=float).ravel()
    e = np.array(e, dtype=float).ravel()
    if not np.all(np.isfinite(x) & np.isfinite(y)):
        raise DomainError("non-finite input point")
    if np.any(np.maximum(np.abs(x), np.abs(y)) > BBOX):
        raise DomainError(f"point outside the bounding box |x|,|y| <= {BBOX}")
    sign = -1.0 if inverse else 1.0
    out_x = np.empty_like(x)
    out_y = np.empty_like(y)
    out_e = e.copy()
    exact = m.in_exact_region(x, y)
    if np.any(exact):
        loc = local_flow(m.q, sign, PlanePoint(x[exact], y[exact]))
        still = m.in_exact_region(loc.x, loc.y)
        idx = np.flatnonzero(exact)
        exact[idx[~still]] = False
        out_x[idx[still]] = loc.x[still]
        out_y[idx[still]] = loc.y[still]
    rest = ~exact
    if np.any(rest):
        state = np.stack([x[rest], y[rest], e[rest]])
        t0, t1 = (1.0, 0.0) if inverse else (0.0, 1.0)
        res = integrate_fixed(m._field, state, t0, t1, m.steps, BBOX)
        proj = _project_to_level(m, res[:2].T, res[2], iters=2)
        out_x[rest] = proj[:, 0]
        out_y[rest] = proj[:, 1]
        out_e[rest] = res[2]
    return out_x, out_y, out_e, exact


def f_eps_inv(m: ModelFamily, z) -> PlanePoint:
    return f_eps(m, z, inverse=True)


def orbit(m: ModelFamily, z, n: int) -> np.ndarray:
    """(n+1, 2) array of plane iterates of a single point."""
    n = check_int("n", n, 0)
    pts = np.empty((n + 1, 2))
    pts[0] = (float(z[0]), float(z[1]))
    for k in range(n):
        p = f_eps(m, pts[k])
        pts[k + 1] = (p.x, p.y)
    return pts


def write_description(m: ModelFamily, path, bump: "BumpParams | None" = None) -> Path:
    data = m.describe()
    if bump is not None:
        data["bump"] = bump.describe()
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def export_separatrix_csv(m: ModelFamily, path) -> Path:
    path = Path(path)
    lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in m.separatrix.points.tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# bump functions for the counterexample


def chi_bump(x):
    """(1 - 4x^2)^5 on [-1/2, 1/2], zero outside."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 0.5, np.clip(1.0 - 4.0 * x * x, 0.0, None) ** 5, 0.0)


def chi_bump_d(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 0.5, -40.0 * x * np.clip(1.0 - 4.0 * x * x, 0.0, None) ** 4, 0.0)


_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(20)
PANELS = 32


@dataclass(frozen=True)
class BumpParams:
    rho: float
    M: float
    C_M: float
    alpha: float
    beta_min: float
    beta_max: float
    b: float
    a: float
    I: tuple[float, float]
    edges: np.ndarray = field(repr=False, compare=False)
    cumulative: np.ndarray = field(repr=False, compare=False)

    # phi_M and its derivative
    def phi(self, x):
        x = np.asarray(x, dtype=float)
        return self.a * chi_bump(12.0 * (x - 1.0 / 3.0)) - self.C_M * chi_bump((x - 2.0 / 3.0) / self.rho)

    def phi_d(self, x):
        x = np.asarray(x, dtype=float)
        return (12.0 * self.a * chi_bump_d(12.0 * (x - 1.0 / 3.0))
                - self.C_M / self.rho * chi_bump_d((x - 2.0 / 3.0) / self.rho))

    def s_prime(self, x):
        return np.exp(self.phi(x))

    def s(self, x):
        """s_M(x) = x + int_0^x (e^phi - 1); identity outside [0, 1]."""
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, 0.0, 1.0)
        k = np.clip(np.searchsorted(self.edges, xc, side="right") - 1, 0, len(self.edges) - 2)
        left = self.edges[k]
        half = 0.5 * (xc - left)
        nodes = left[..., None] + half[..., None] * (_NODES + 1.0)
        partial = half * np.sum(_WEIGHTS * np.expm1(self.phi(nodes)), axis=-1)
        inside = xc + self.cumulative[k] + partial
        return np.where((x <= 0.0) | (x >= 1.0), x, inside)

    def s_inv(self, target, tol: float = 1e-13, maxiter: int = 200):
        """Safeguarded Newton on the increasing s_M, bracketed in [0, 1]."""
        target = np.asarray(target, dtype=float)
        inside = (target > 0.0) & (target < 1.0)
        out = target.copy()
        if not np.any(inside):
            return out
        y = target[inside]
        lo = np.zeros_like(y)
        hi = np.ones_like(y)
        x = y.copy()
        for _ in range(maxiter):
            f = self.s(x) - y
            lo = np.where(f < 0, x, lo)
            hi = np.where(f > 0, x, hi)
            newton = x - f / self.s_prime(x)
            bad = ~((newton > lo) & (newton < hi))
            new = np.where(bad, 0.5 * (lo + hi), newton)
            done = (np.abs(new - x) <= tol) | (f == 0)
            x = np.where(f == 0, x, new)
            if np.all(done):
                break
        else:
            raise ConvergenceError("s_M inverse did not converge")
        out[inside] = x
        return out

    def integral(self) -> float:
        return float(self.s(np.array(1.0 - 1e-16)) + 1e-16)

    @property
    def I_length(self) -> float:
        return self.I[1] - self.I[0]

    def strip_margin(self) -> float:
        """1 + A_min (max s' - 1): positive iff g_M is invertible in its cut-off strip.

        For 0 <= A <= 1 the derivative 1 + A (s' - 1) is a convex combination of
        1 and s' > 0, so only the negative part of A with s' > 1 can fail.
        """
        A_min = float(np.min(_strip_A(np.linspace(0.0, 1.0, 20001))))
        return 1.0 + min(A_min, 0.0) * math.expm1(max(self.a, 0.0))

    def describe(self) -> dict:
        return {"rho": self.rho, "M": self.M, "C_M": self.C_M, "alpha": self.alpha,
                "beta_min": self.beta_min, "beta_max": self.beta_max, "b": self.b,
                "a": self.a, "I": list(self.I), "chi": "(1-4x^2)^5"}


def _strip_A(u):
    """A = chi_c + y chi_c' on the strip y = c/2 + u c/4, independent of c."""
    u = np.asarray(u, dtype=float)
    return 1.0 - _smoothstep(u) - (2.0 + u) * _smoothstep_d(u)


def bump_shape_constants(chi_alpha_fraction: float = 0.45):
    """alpha, beta_min, beta_max for chi = (1-4x^2)^5.

    alpha is a fixed fraction of the half-height abscissa divided by two, so chi > 1/2 on (-2 alpha, 2 alpha).
    """
    x_half = math.sqrt((1.0 - 0.5 ** 0.2) / 4.0)
    alpha = chi_alpha_fraction * x_half
    grid = np.linspace(-2 * alpha, -alpha, 20001)
    dchi = chi_bump_d(grid)
    return alpha, float(dchi.min()), float(dchi.max())


def _panel_edges(rho: float) -> np.ndarray:
    hump = np.linspace(1 / 3 - 1 / 24, 1 / 3 + 1 / 24, PANELS + 1)
    dip = np.linspace(2 / 3 - rho / 2, 2 / 3 + rho / 2, PANELS + 1)
    return np.unique(np.concatenate([[0.0], hump, dip, [1.0]]))


def build_bump(rho: float = 1.0 / 12.0, M: float = 8.0) -> BumpParams:
    check_interval("rho", rho, 0.0, 1.0 / 12.0, (False, True))
    M = check_positive("M", M, strict=False)
    alpha, beta_min, beta_max = bump_shape_constants()
    b = 1.0 / max(beta_max / beta_min, 2.0 * alpha * beta_min)
    C_M = M / (alpha * beta_min)
    edges = _panel_edges(rho)
    left, right = edges[:-1], edges[1:]
    half = 0.5 * (right - left)
    nodes = left[:, None] + half[:, None] * (_NODES + 1.0)
    hump_chi = chi_bump(12.0 * (nodes - 1.0 / 3.0))
    dip_chi = chi_bump((nodes - 2.0 / 3.0) / rho)

    def excess(a):
        vals = np.expm1(a * hump_chi - C_M * dip_chi)
        return float(np.sum(half * (vals @ _WEIGHTS)))

    if C_M == 0.0:
        a = 0.0
    else:
        hi = 1.0
        while excess(hi) < 0:
            hi *= 2.0
            if hi > 1e3:
                raise ConvergenceError("normalization root for a(rho, C_M) not bracketed")
        a = brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    vals = np.expm1(a * hump_chi - C_M * dip_chi)
    cumulative = np.concatenate([[0.0], np.cumsum(half * (vals @ _WEIGHTS))])
    I = (2 / 3 - 2 * alpha * rho, 2 / 3 - alpha * rho)
    bp = BumpParams(float(rho), float(M), float(C_M), alpha, beta_min, beta_max, float(b),
                    float(a), I, edges, cumulative)
    if abs(cumulative[-1]) > 1e-12:
        raise ConvergenceError(f"normalization off by {cumulative[-1]:.3g}")
    return bp


def largest_invertible_rho(M: float, start: float = 1.0 / 12.0, margin: float = 0.1) -> float:
    """Halve rho from `start` until g_M is invertible in its cut-off strip with the given margin."""
    rho = start
    for _ in range(20):
        if build_bump(rho, M).strip_margin() >= margin:
            return rho
        rho /= 2.0
    raise DomainError("no rho gives an invertible cut-off strip")


# ---------------------------------------------------------------------------
# g_M and the perturbed plane map


def strip_cutoff(y, c):
    """1 on |y| <= c/2, 0 on |y| >= 3c/4, and its derivative."""
    y = np.asarray(y, dtype=float)
    u = (np.abs(y) - 0.5 * c) / (0.25 * c)
    chi = 1.0 - _smoothstep(u)
    dchi = -np.sign(y) * _smoothstep_d(u) / (0.25 * c)
    return chi, dchi


def g_M(bp: BumpParams, p, c: float, periodic: bool = False) -> PlanePoint:
    """Canonical map generated by S(x~, y) = s(x~) y chi(y) + x~ y (1 - chi(y))."""
    check_positive("c", c)
    x0, y0 = _as_arrays(p)
    x = x0.ravel().astype(float)
    y = y0.ravel().astype(float)
    shift = np.floor(x) if periodic else np.zeros_like(x)
    xr = x - shift
    chi, dchi = strip_cutoff(y, c)
    A = chi + y * dchi
    active = (xr > 0.0) & (xr < 1.0) & (chi > 0.0)
    xt = xr.copy()
    yt = y.copy()
    core = active & (chi == 1.0)
    if np.any(core):
        xt[core] = bp.s_inv(xr[core])
    strip = active & ~core
    if np.any(strip):
        # x~ -> x~ + A (s(x~) - x~) must be monotone on all of [0, 1], not just at the root
        if np.any(1.0 + np.minimum(A[strip], 0.0) * math.expm1(max(bp.a, 0.0)) <= 0.0):
            raise ConvergenceError("g_M generating function is degenerate in the cut-off strip")
        xt[strip] = _strip_solve(bp, xr[strip], A[strip])
    if np.any(active):
        sp = bp.s_prime(xt[active])
        yt[active] = y[active] * (1.0 + chi[active] * (sp - 1.0))
    return PlanePoint(_shape_like(xt + shift, x0), _shape_like(yt, y0))


def _strip_solve(bp: BumpParams, x, A, tol: float = 1e-13, maxiter: int = 200):
    """Solve x = x~ + A (s(x~) - x~) for x~ in [0, 1]."""
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    xt = x.copy()
    for _ in range(maxiter):
        f = xt + A * (bp.s(xt) - xt) - x
        df = 1.0 + A * (bp.s_prime(xt) - 1.0)
        lo = np.where(f < 0, xt, lo)
        hi = np.where(f > 0, xt, hi)
        newton = xt - f / np.where(df != 0, df, 1.0)
        bad = ~((newton > lo) & (newton < hi)) | (df <= 0)
        new = np.where(bad, 0.5 * (lo + hi), newton)
        if np.all(np.abs(new - xt) <= tol):
            xt = new
            break
        xt = new
    else:
        raise ConvergenceError("implicit solve for g_M in the cut-off strip did not converge")
    df = 1.0 + A * (bp.s_prime(xt) - 1.0)
    if np.any(df <= 0):
        raise ConvergenceError("g_M generating function is degenerate at these points")
    return xt


class PerturbedMap:
    """f_pert = (h^-1 g_M h) o f: the model map followed by g_M read in the normalizing chart."""

    def __init__(self, m: ModelFamily, bp: BumpParams, x_star: float, c: float):
        if m.q.higher and any(m.q.higher):
            raise DomainError("the perturbed map is area preserving only for linear q")
        if bp.strip_margin() <= 0:
            raise DomainError("g_M is not invertible in its cut-off strip for this bump; "
                              "use a smaller rho")
        self.model = m
        self.bump = bp
        self.x_star = float(x_star)
        self.c = float(c)
        self.lam = m.q.lam

    def in_support(self, x, y):
        """Points where h^-1 g_M h differs from the identity (closure)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        v = x * y
        with np.errstate(divide="ignore", invalid="ignore"):
            hx = (math.log(self.x_star) - np.log(np.where(x > 0, x, 1.0))) / self.lam
        return (x > 0) & (hx >= 0.0) & (hx <= 1.0) & (np.abs(v) < 0.75 * self.c)

    def conjugated_g(self, x, y):
        x = np.asarray(x, dtype=float).copy()
        y = np.asarray(y, dtype=float).copy()
        sel = self.in_support(x, y)
        if np.any(sel):
            v = x[sel] * y[sel]
            hx = (math.log(self.x_star) - np.log(x[sel])) / self.lam
            g = g_M(self.bump, (hx, v), self.c)
            xn = self.x_star * np.exp(-self.lam * g.x)
            x[sel] = xn
            y[sel] = g.y / xn
        return x, y

    def __call__(self, x, y):
        fx = f_eps(self.model, (x, y))
        return self.conjugated_g(fx.x, fx.y)


def build_fpert(m: ModelFamily, bp: BumpParams, fd) -> PerturbedMap:
    """f_pert for a fundamental domain `fd` (anything with x_star and c attributes)."""
    if m.epsilon != 0.0:
        raise DomainError("f_pert perturbs the unperturbed model")
    return PerturbedMap(m, bp, fd.x_star, fd.c)
