"""Fundamental domain, first return, the normalizing chart and the renormalized maps.

Near the stable axis the chart h(x, y) = ((ln x* - ln x) / q'(xy), xy) turns
f into the unit translation, so the domain F = {0 <= h_x < 1, 0 < xy < c}
glues into the annulus (R/Z) x (0, c). Annulus fibers are stored as logs.

A return is computed in three pieces: closed-form steps up the unstable axis
until the point sits in a fixed entry window, integrated steps around the
lobe (carrying the energy as an extra state so tiny fibers keep their relative
accuracy) until the orbit lands back in the exact disc, and closed-form steps
along the stable axis into F. Everything in the exact disc is a translation in
the charts Xi1, Xi2, which is why only the middle piece needs integration.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import ConvergenceError, DomainError, check_int, check_interval, check_positive
from .charts_flows import PlanePoint
from .model import ModelFamily, f_eps, f_eps_inv, f_eps_tracked

PASSAGE_CAP = 1000          # integrated steps allowed for one trip around the lobe
RETURN_CAP = 10 ** 6        # total return index allowed
WINDOW_FRACTION = 0.95      # entry window top y_a = WINDOW_FRACTION * r0


class AnnulusPoint(NamedTuple):
    x: float | np.ndarray
    logy: float | np.ndarray

    def canonical(self) -> "AnnulusPoint":
        x = np.mod(np.asarray(self.x, dtype=float), 1.0)
        x = np.where(x >= 1.0, 0.0, x)
        return AnnulusPoint(x if np.ndim(x) else float(x), self.logy)


@dataclass(frozen=True)
class FundamentalDomainSpec:
    x_star: float
    y_star: float
    c_star: float
    N: int
    lam: float = field(default=1.0, repr=False)

    @property
    def c(self) -> float:
        return self.x_star * self.y_star

    @property
    def entry_height(self) -> float:
        """delta: fibers below c_star * c form the entry region."""
        return self.c_star * self.c

    def boundary(self, m: ModelFamily, n: int = 64) -> dict[str, np.ndarray]:
        """Polylines (a) L, (b) f(L), (c) the stable-axis segment, (d) the top level arc."""
        s = np.linspace(0.0, 1.0, n)
        xs = self.x_star
        L = np.column_stack([np.full(n, xs), s * self.y_star])
        fL = np.column_stack(f_eps(m, L.T))
        low = xs * math.exp(-m.q.d1(0.0))
        axis = np.column_stack([low + s * (xs - low), np.zeros(n)])
        dq = float(m.q.d1(self.c))
        top_x = xs * np.exp(-dq * s)
        top = np.column_stack([top_x, self.c / top_x])
        return {"L": L, "fL": fL, "axis": axis, "top": top}

    def describe(self) -> dict:
        return {"x_star": self.x_star, "y_star": self.y_star, "c_star": self.c_star,
                "c": self.c, "N": self.N, "entry_height": self.entry_height}


def check_placement(m: ModelFamily, x_star: float, y_star: float, c_star: float) -> None:
    """Closed-form placement conditions on F; no map is iterated."""
    check_positive("x_star", x_star)
    check_positive("y_star", y_star)
    check_interval("c_star", c_star, 0.0, 1.0, closed=(False, False))
    r0 = m.V_radius
    dq0 = float(m.q.d1(0.0))
    if x_star >= r0:
        raise DomainError(f"(x*, 0) must lie in V: x* = {x_star} >= r0 = {r0}")
    if x_star * math.exp(dq0) < r0:
        raise DomainError("f^-1(x*, 0) must leave V; increase x*")
    c = x_star * y_star
    dq = float(m.q.d1(c))
    corner_far = math.hypot(x_star * math.exp(-dq), y_star * math.exp(dq))
    if math.hypot(x_star, y_star) >= r0 or corner_far >= r0:
        raise DomainError("F(y*) is not contained in V; decrease y*")
    if y_star * math.exp(dq) > WINDOW_FRACTION * r0:
        raise DomainError("y* too large for the entry window")


def build_fundamental_domain(m: ModelFamily, x_star: float = 0.08, y_star: float = 0.034,
                             c_star: float = 0.5) -> FundamentalDomainSpec:
    """Validate the placement of F and compute N."""
    check_placement(m, x_star, y_star, c_star)
    fd = FundamentalDomainSpec(float(x_star), float(y_star), float(c_star), 1, m.q.lam)
    return FundamentalDomainSpec(fd.x_star, fd.y_star, fd.c_star, compute_N(m, fd), m.q.lam)


def compute_N(m: ModelFamily, fd: FundamentalDomainSpec, samples: int = 24, cap: int = 200) -> int:
    """Smallest n with f^-n of the boundary of F inside V."""
    pts = np.concatenate([p[1:-1] for p in fd.boundary(m, samples).values()])
    x, y = pts[:, 0], pts[:, 1]
    r0 = m.V_radius
    for n in range(1, cap + 1):
        z = f_eps_inv(m, (x, y))
        x, y = z.x, z.y
        if np.all(np.hypot(x, y) < r0):
            return n
    raise ConvergenceError(f"backward iterates of F did not enter V within {cap} steps")


# ---------------------------------------------------------------------------
# the normalizing chart


def chart_h(m: ModelFamily, fd: FundamentalDomainSpec, x, y):
    """Raw chart value (h_x, v), no reduction mod 1."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(~m.in_exact_region(x, y)):
        raise DomainError("h is defined on the exact disc with x > 0")
    v = x * y
    return (math.log(fd.x_star) - np.log(x)) / m.q.d1(v), v


def normalizer_h(m: ModelFamily, fd: FundamentalDomainSpec, z) -> AnnulusPoint:
    hx, v = chart_h(m, fd, z[0], z[1])
    if np.any(v <= 0) or np.any(v >= fd.c):
        raise DomainError("point is outside the annulus fibers 0 < xy < c")
    return AnnulusPoint(hx, np.log(v)).canonical()


def normalizer_h_inv(m: ModelFamily, fd: FundamentalDomainSpec, a: AnnulusPoint) -> PlanePoint:
    xb = np.asarray(a.x, dtype=float)
    logv = np.asarray(a.logy, dtype=float)
    if np.any(logv >= math.log(fd.c)):
        raise DomainError("fiber above the annulus height c")
    dq = m.q.d1(np.exp(logv))
    ln_x = math.log(fd.x_star) - dq * xb
    x = np.exp(ln_x)
    y = np.exp(logv - ln_x)
    return PlanePoint(x if np.ndim(x) else float(x), y if np.ndim(y) else float(y))


def in_domain(m: ModelFamily, fd: FundamentalDomainSpec, x, y, height: float | None = None):
    """Membership in F (fibers below `height`, default c) via 0 <= h_x < 1."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    height = fd.c if height is None else height
    ok = (x > 0) & m.in_exact_region(x, y)
    v = x * y
    xs = np.where(ok, x, 1.0)
    hx = (math.log(fd.x_star) - np.log(xs)) / m.q.d1(v)
    return ok & (hx >= 0) & (hx < 1) & (v > 0) & (v < height)


def measure_density(m: ModelFamily, fd: FundamentalDomainSpec, a: AnnulusPoint):
    """Density of the pushed-forward area in (x, v): |det Dh^-1| = q'(v)."""
    return m.q.d1(np.exp(np.asarray(a.logy, dtype=float)))


# ---------------------------------------------------------------------------
# the return engine


def _window_top(m: ModelFamily) -> float:
    return WINDOW_FRACTION * m.V_radius


def outer_passage(m: ModelFamily, x, y, e):
    """Iterate from the unstable side until the orbit is back in the exact disc.

    Returns landing (x, y, e) and the step count of each point.
    """
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    e = np.array(e, dtype=float)
    steps = np.zeros(x.shape, dtype=np.int64)
    left = np.zeros(x.shape, dtype=bool)
    active = np.ones(x.shape, dtype=bool)
    for _ in range(PASSAGE_CAP):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return x, y, e, steps
        xn, yn, en, exact = f_eps_tracked(m, x[idx], y[idx], e[idx])
        x[idx], y[idx], e[idx] = xn, yn, en
        steps[idx] += 1
        left[idx] |= ~exact
        landed = left[idx] & m.in_exact_region(xn, yn)
        active[idx[landed]] = False
    raise ConvergenceError(f"orbit did not come back to the exact disc in {PASSAGE_CAP} steps")


def _entry_state(m: ModelFamily, fd: FundamentalDomainSpec, xbar, logv):
    """Closed-form steps from the annulus point to the entry window on the unstable side."""
    dq = m.q.d1(np.exp(logv))
    ln_xs = math.log(fd.x_star)
    ln_ya = math.log(_window_top(m))
    k = np.floor((ln_ya - logv + ln_xs) / dq - xbar)
    if np.any(k < 0):
        raise DomainError("fiber too high for the entry window")
    ln_y = logv - ln_xs + dq * (xbar + k)
    return k.astype(np.int64), np.exp(logv - ln_y), np.exp(ln_y)


def _return_chart(m: ModelFamily, fd: FundamentalDomainSpec, xbar, logv):
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    logv = np.atleast_1d(np.asarray(logv, dtype=float))
    xbar, logv = np.broadcast_arrays(xbar, logv)
    if np.any(logv >= math.log(fd.c)):
        raise DomainError("fiber above the annulus height c")
    k, x, y = _entry_state(m, fd, xbar, logv)
    e0 = m.q(np.exp(logv))
    xl, yl, el, steps = outer_passage(m, x, y, e0)
    same = el == e0
    logv2 = np.where(same, logv, m.q.log_inverse(np.log(np.where(el > 0, el, 1.0))))
    if np.any(el <= 0):
        raise DomainError("orbit crossed Sigma")
    hx = (math.log(fd.x_star) - np.log(xl)) / m.q.d1(np.exp(logv2))
    if np.any(hx >= 1.0):
        raise ConvergenceError("passage landed beyond the fundamental domain")
    j = -np.floor(hx)
    xbar2 = hx + j
    xbar2 = np.where(xbar2 >= 1.0, xbar2 - 1.0, xbar2)
    n = k + steps + j.astype(np.int64)
    if np.any(n > RETURN_CAP):
        raise ConvergenceError("return index above the iteration cap")
    return xbar2, logv2, n


def first_return(m: ModelFamily, fd: FundamentalDomainSpec, z):
    """First return of z in F(c* y*) to F(y*): (landing PlanePoint, return index)."""
    x, y = z
    if not np.all(in_domain(m, fd, x, y, fd.entry_height)):
        raise DomainError("start point is not in the entry region F(c* y*)")
    a = normalizer_h(m, fd, (x, y))
    xb, lv, n = _return_chart(m, fd, a.x, a.logy)
    p = normalizer_h_inv(m, fd, AnnulusPoint(xb, lv))
    if np.ndim(x) == 0:
        return PlanePoint(float(p.x[0]), float(p.y[0])), int(n[0])
    return p, n


def sigma_estimate(m: ModelFamily, fd: FundamentalDomainSpec, v, offset=0.0):
    """sigma_N(v): the u-shift of Xi1 o f^N o Xi2^-1 on the fiber v.

    `offset` in [0, 1) places the start at y = y_a e^{-offset q'(v)} in the window.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or np.any(v >= fd.c):
        raise DomainError("sigma is tabulated on 0 <= v < c")
    v, offset = np.broadcast_arrays(v, np.asarray(offset, dtype=float))
    dq = m.q.d1(v)
    y0 = _window_top(m) * np.exp(-offset * dq)
    x0 = v / y0
    xl, _, _, steps = outer_passage(m, x0.ravel(), y0.ravel(), m.q(v).ravel())
    sig = np.log(xl) + np.log(y0.ravel()) - (fd.N - steps) * dq.ravel()
    return sig.reshape(v.shape) if v.ndim else float(sig[0])


@dataclass
class SigmaTable:
    """Chebyshev interpolant of sigma_N on [0, v_max]."""

    cheb: np.polynomial.Chebyshev
    v_max: float
    tail: float

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0) or np.any(v > self.v_max):
            raise DomainError("v outside the sigma table")
        return self.cheb(v)

    def derivative(self, v):
        return self.cheb.deriv()(np.asarray(v, dtype=float))

    @property
    def limit(self) -> float:
        return float(self.cheb(0.0))


def build_sigma_table(m: ModelFamily, fd: FundamentalDomainSpec, v_max: float | None = None,
                      tol: float = 1e-12) -> SigmaTable:
    if m.epsilon != 0.0:
        raise DomainError("sigma_N is defined by the unperturbed map")
    v_max = fd.c * (1 - 1e-12) if v_max is None else v_max
    deg = 16
    while True:
        cheb = np.polynomial.Chebyshev.interpolate(lambda v: sigma_estimate(m, fd, v), deg,
                                                   domain=[0.0, v_max])
        tail = float(np.max(np.abs(cheb.coef[-3:])))
        if tail < tol or deg >= 64:
            return SigmaTable(cheb, v_max, tail)
        deg *= 2


def sigma_limit(m: ModelFamily, fd: FundamentalDomainSpec, v0: float = 1e-4, levels: int = 5) -> float:
    """sigma_N(0+) by Richardson extrapolation on v0, v0/2, v0/4, ..."""
    vs = v0 * 0.5 ** np.arange(levels)
    table = [list(np.atleast_1d(sigma_estimate(m, fd, vs)))]
    for k in range(1, levels):
        prev = table[-1]
        table.append([(2 ** k * prev[i + 1] - prev[i]) / (2 ** k - 1) for i in range(len(prev) - 1)])
    return float(table[-1][0])


class PassageTable:
    """Perturbed outer passage relative to the unperturbed one, for linear q.

    With start phase theta in the entry window and fiber v, stores
    G1 = (sigma_eps - sigma_0) / v and G2 = (ln v' - ln v) / v, Fourier in theta
    (one map step is one period) and Chebyshev in v. Both corrections are O(eps v),
    so dividing by v keeps them at full relative accuracy down to v -> 0.
    """

    def __init__(self, m: ModelFamily, fd: FundamentalDomainSpec, sigma0: SigmaTable,
                 n_theta: int = 32, deg: int = 16):
        if m.q.higher and any(m.q.higher):
            raise DomainError("the passage table assumes linear q")
        self.lam = m.q.lam
        self.v_max = sigma0.v_max
        theta = np.arange(n_theta) / n_theta
        k = np.arange(deg + 1)
        nodes = np.cos(np.pi * (k + 0.5) / (deg + 1))
        v = 0.5 * self.v_max * (nodes + 1.0)
        T, Vv = np.meshgrid(theta, v, indexing="ij")
        y0 = _window_top(m) * np.exp(-T * self.lam)
        e0 = m.q(Vv)
        xl, _, el, steps = outer_passage(m, (Vv / y0).ravel(), y0.ravel(), e0.ravel())
        sig = np.log(xl) + np.log(y0.ravel()) - (fd.N - steps) * self.lam
        g1 = ((sig - sigma0(Vv.ravel())) / Vv.ravel()).reshape(T.shape)
        g2 = (np.log(el / e0.ravel()) / Vv.ravel()).reshape(T.shape)
        # Fourier in theta, then Chebyshev coefficients in v for each mode
        self._modes = []
        for g in (g1, g2):
            spec = np.fft.rfft(g, axis=0) / n_theta
            coef = np.polynomial.chebyshev.chebfit(nodes, spec.T, deg).T   # (modes, deg+1)
            self._modes.append(coef)
        self.n_theta = n_theta
        self.tail = float(max(np.max(np.abs(c[-2:])) for c in self._modes) +
                          max(np.max(np.abs(c[:, -2:])) for c in self._modes))

    def _eval(self, coef, theta, v):
        s = 2.0 * v / self.v_max - 1.0
        per_mode = np.polynomial.chebyshev.chebval(s, coef.T)      # (modes, npts)
        kk = np.arange(coef.shape[0])[:, None]
        phase = np.exp(2j * np.pi * kk * theta[None, :])
        w = np.where(kk == 0, 1.0, 2.0)
        if self.n_theta % 2 == 0:
            w[-1] = 1.0
        return np.real(np.sum(w * per_mode * phase, axis=0))

    def __call__(self, theta, v):
        theta = np.asarray(theta, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        if np.any(v < 0) or np.any(v > self.v_max):
            raise DomainError("v outside the passage table")
        return v * self._eval(self._modes[0], theta, v), v * self._eval(self._modes[1], theta, v)


class Renormalization:
    """bar_f and the rescaled ring maps for one model and fundamental domain."""

    def __init__(self, m: ModelFamily, fd: FundamentalDomainSpec, base: ModelFamily | None = None):
        self.model = m
        self.fd = fd
        # sigma and l come from the unperturbed map; in this family q_eps = q
        self.base = base if base is not None else (m if m.epsilon == 0 else m.with_epsilon(0.0))
        self._table: SigmaTable | None = None
        self._passage: PassageTable | None = None

    @property
    def table(self) -> SigmaTable:
        if self._table is None:
            self._table = build_sigma_table(self.base, self.fd)
        return self._table

    @property
    def passage(self) -> PassageTable:
        if self._passage is None:
            self._passage = PassageTable(self.model, self.fd, self.table)
        return self._passage

    # -- l and its rescalings
    def l(self, logv):
        """Translation of the integrable renormalized map on fiber v (mod 1)."""
        logv = np.asarray(logv, dtype=float)
        v = np.exp(logv)
        return (logv - self.table(v)) / self.base.q.d1(v)

    def l_ring(self, n: int, y):
        return self.l(np.log(np.asarray(y, dtype=float)) - n)

    def dl_ring(self, n: int, y):
        y = np.asarray(y, dtype=float)
        v = math.exp(-n) * y
        q = self.base.q
        dq, ddq = q.d1(v), q.d2(v)
        lv = (np.log(v) - self.table(v))
        dl_dv = (1.0 / v - self.table.derivative(v)) / dq - lv * ddq / dq ** 2
        return math.exp(-n) * dl_dv

    # -- maps
    def bar_f(self, a: AnnulusPoint, method: str = "simulate") -> AnnulusPoint:
        xb = np.asarray(a.x, dtype=float)
        lv = np.asarray(a.logy, dtype=float)
        if np.any(lv >= math.log(self.fd.c)):
            raise DomainError("annulus point above the annulus height c")
        if method == "table":
            if self.model.epsilon == 0.0:
                out = AnnulusPoint(xb + self.l(lv), lv).canonical()
            else:
                out = self._bar_f_passage(xb, lv)
        elif method == "simulate":
            x2, l2, _ = _return_chart(self.model, self.fd, xb, lv)
            out = AnnulusPoint(x2.reshape(np.shape(xb)), l2.reshape(np.shape(lv)))
        else:
            raise ValueError(f"unknown method {method!r}")
        if np.ndim(xb) == 0 and np.ndim(lv) == 0:
            return AnnulusPoint(float(np.ravel(out.x)[0]), float(np.ravel(out.logy)[0]))
        return out

    def _bar_f_passage(self, xb, lv) -> AnnulusPoint:
        lam = self.passage.lam
        xb, lv = np.broadcast_arrays(xb, lv)
        theta = np.mod((math.log(_window_top(self.model)) - lv + math.log(self.fd.x_star)) / lam
                       - xb, 1.0)
        d1, d2 = self.passage(theta, np.exp(lv.ravel()))
        x2 = xb + self.l(lv) - d1.reshape(xb.shape) / lam
        return AnnulusPoint(x2, lv + d2.reshape(lv.shape)).canonical()

    def check_level(self, n: int) -> int:
        n = check_int("n", n, 1, 500)
        if math.exp(-(n + 1)) >= self.fd.entry_height or math.exp(-n) >= self.fd.c:
            raise DomainError(f"renormalization level n={n} too small for the annulus")
        return n

    def ring_f(self, n: int, x, y, method: str = "simulate"):
        """Lambda_{e^n} o bar_f o Lambda_{e^n}^-1 on (R/Z) x (e^-1, 1); returns (x, y)."""
        n = self.check_level(n)
        y = np.asarray(y, dtype=float)
        out = self.bar_f(AnnulusPoint(x, np.log(y) - n), method)
        return out.x, np.exp(np.asarray(out.logy) + n)

    def ring_deviation(self, n: int, x, y) -> float:
        """Sup over the points of |ring_f - T_{l_n}| with x compared mod 1."""
        xs, ys = self.ring_f(n, x, y)
        xt = np.mod(np.asarray(x) + self.l_ring(n, y), 1.0)
        dx = np.abs((np.asarray(xs) - xt + 0.5) % 1.0 - 0.5)
        return float(max(np.max(dx), np.max(np.abs(np.asarray(ys) - y))))


# ---------------------------------------------------------------------------
# dumps


def write_annulus_orbit(path, orbit) -> Path:
    """CSV (step, x, logy) for a sequence of annulus points."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "logy"])
        for i, (x, ly) in enumerate(orbit):
            w.writerow([i, repr(float(x)), repr(float(ly))])
    return path


def annulus_orbit(ren: Renormalization, a: AnnulusPoint, steps: int, method: str = "simulate"):
    pts = [(float(a.x), float(a.logy))]
    for _ in range(check_int("steps", steps, 0)):
        a = ren.bar_f(a, method)
        pts.append((float(a.x), float(a.logy)))
    return pts


def write_twist_profile(path, ren: Renormalization, n: int, samples: int = 101) -> Path:
    """CSV (y, l, dl_dy) of l_{0,n} on the ring fibers."""
    ren.check_level(n)
    ys = np.linspace(math.exp(-1), 1.0, samples)
    ls = ren.l_ring(n, ys)
    ds = ren.dl_ring(n, ys)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "l", "dl_dy"])
        for row in zip(ys, ls, ds):
            w.writerow([repr(float(v)) for v in row])
    return path
