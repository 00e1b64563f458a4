"""Logarithmic charts, the exact flow of q(xy), a fixed-step time-1 integrator
and the generating-function extension of near-identity symplectic germs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ._validation import ConvergenceError, DomainError, check_positive
from .nf_algebra import PolyQ

FD_STEP = 1e-5          # central-difference step for every Jacobian check
JACOBIAN_TOL = 1e-4     # tolerance those checks are held to


class PlanePoint(NamedTuple):
    x: float | np.ndarray
    y: float | np.ndarray


class ChartPoint(NamedTuple):
    u: float | np.ndarray
    v: float | np.ndarray


def _require_positive(name, arr):
    arr = np.asarray(arr, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be positive for this chart")
    return arr


def xi1(p: PlanePoint) -> ChartPoint:
    x = _require_positive("x", p.x)
    y = np.asarray(p.y, dtype=float)
    return ChartPoint(np.log(x), x * y)


def xi1_inv(c: ChartPoint) -> PlanePoint:
    x = np.exp(np.asarray(c.u, dtype=float))
    return PlanePoint(x, np.asarray(c.v, dtype=float) / x)


def xi2(p: PlanePoint) -> ChartPoint:
    y = _require_positive("y", p.y)
    x = np.asarray(p.x, dtype=float)
    return ChartPoint(-np.log(y), x * y)


def xi2_inv(c: ChartPoint) -> PlanePoint:
    y = np.exp(-np.asarray(c.u, dtype=float))
    return PlanePoint(np.asarray(c.v, dtype=float) / y, y)


def local_flow(q: PolyQ, t, p: PlanePoint) -> PlanePoint:
    """Closed-form time-t flow of J grad q(xy): (e^{-t q'} x, e^{t q'} y)."""
    x = np.asarray(p.x, dtype=float)
    y = np.asarray(p.y, dtype=float)
    v = x * y
    if not np.all(q.in_domain(v)):
        raise DomainError("point outside the validity radius of q")
    rate = np.asarray(t, dtype=float) * q.d1(v)
    return PlanePoint(np.exp(-rate) * x, np.exp(rate) * y)


def transit_time(q: PolyQ, t, v):
    """tau(v) = t q'(v) - ln v, the u-shift of Xi2 o phi^t o Xi1^{-1}."""
    v = _require_positive("v", v)
    if not np.all(q.in_domain(v)):
        raise DomainError("v outside the validity radius of q")
    return np.asarray(t, dtype=float) * q.d1(v) - np.log(v)


# ---------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class Hamiltonian:
    """A planar Hamiltonian given by its value and gradient.

    Both callables take (t, x, y) arrays; grad returns (H_x, H_y).
    """

    value: Callable
    grad: Callable
    autonomous: bool = True

    def vector_field(self, t, state):
        hx, hy = self.grad(t, state[0], state[1])
        return np.stack([-hy, hx])


def polynomial_hamiltonian(coeffs: dict[tuple[int, int], float]) -> Hamiltonian:
    """sum c_ij x^i y^j as a Hamiltonian (used in tests and examples)."""
    items = [(i, j, float(c)) for (i, j), c in coeffs.items() if c]

    def value(t, x, y):
        return sum(c * x ** i * y ** j for i, j, c in items) + 0.0 * x

    def grad(t, x, y):
        hx = sum(c * i * x ** (i - 1) * y ** j for i, j, c in items if i) + 0.0 * x
        hy = sum(c * j * x ** i * y ** (j - 1) for i, j, c in items if j) + 0.0 * y
        return hx, hy

    return Hamiltonian(value, grad, True)


GBS_SEQUENCE = (2, 4, 6, 8, 10, 12)


def gbs_step(field, t, state, h, f0=None):
    """One Gragg-Bulirsch-Stoer step of order 12 (modified midpoint + extrapolation)."""
    if f0 is None:
        f0 = field(t, state)
    table = []
    for j, n in enumerate(GBS_SEQUENCE):
        hh = h / n
        z0 = state
        z1 = state + hh * f0
        for m in range(1, n):
            z0, z1 = z1, z0 + 2.0 * hh * field(t + m * hh, z1)
        row = [z1]
        for k in range(1, j + 1):
            r = (GBS_SEQUENCE[j] / GBS_SEQUENCE[j - k]) ** 2
            prev = table[j - 1][k - 1]
            row.append(row[k - 1] + (row[k - 1] - prev) / (r - 1.0))
        table.append(row)
    return table[-1][-1]


def integrate_fixed(field, state, t0: float, t1: float, steps: int, bbox: float = np.inf):
    """Integrate with `steps` equal GBS macro steps; raises on escape from the box."""
    state = np.asarray(state, dtype=float)
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        state = gbs_step(field, t, state, h)
        t += h
        if np.isfinite(bbox) and np.any(np.abs(state[:2]) > bbox):
            raise DomainError(f"trajectory escaped the box |x|,|y| <= {bbox}")
        if not np.all(np.isfinite(state)):
            raise DomainError("trajectory became non-finite")
    return state


def integrate_adaptive(field, state, t0: float, t1: float, tol: float,
                       bbox: float = np.inf, start_steps: int = 2, max_halvings: int = 14,
                       relative: bool = False):
    """Halve the macro step until two successive answers agree within tol.

    With relative=True the agreement is measured per point against the size of
    that point. Returns (state, steps used)."""
    steps = start_steps
    prev = integrate_fixed(field, state, t0, t1, steps, bbox)
    for _ in range(max_halvings):
        steps *= 2
        cur = integrate_fixed(field, state, t0, t1, steps, bbox)
        err = np.abs(cur - prev)
        if relative:
            err = err / np.maximum(np.max(np.abs(cur), axis=0), 1e-300)
        if np.max(err) <= tol:
            return cur, steps
        prev = cur
    raise ConvergenceError(f"step-size underflow: no agreement to {tol} after {steps} steps")


def integrate_time1(H: Hamiltonian, p: PlanePoint, tol: float = 1e-12,
                    bbox: float = 1e3, t0: float = 0.0, duration: float = 1.0) -> PlanePoint:
    """Time-1 map of J grad H starting at time t0."""
    check_positive("tol", tol)
    state = np.stack([np.asarray(p.x, dtype=float), np.asarray(p.y, dtype=float)])
    out, _ = integrate_adaptive(H.vector_field, state, t0, t0 + duration, tol, bbox)
    return PlanePoint(out[0], out[1])


# ---------------------------------------------------------------------------
# Jacobians


def fd_jacobian(fmap: Callable, x, y, h: float = FD_STEP, scale=(1.0, 1.0)):
    """Central-difference Jacobian entries of a planar map at arrays (x, y).

    `scale` gives the feature length of each input coordinate; the step along
    that coordinate is h times its length.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    hx, hy = h * scale[0], h * scale[1]
    xs = np.concatenate([x + hx, x - hx, x, x])
    ys = np.concatenate([y, y, y + hy, y - hy])
    X, Y = fmap(xs, ys)
    X = np.asarray(X).reshape(4, -1)
    Y = np.asarray(Y).reshape(4, -1)
    a = (X[0] - X[1]) / (2 * hx)
    b = (X[2] - X[3]) / (2 * hy)
    c = (Y[0] - Y[1]) / (2 * hx)
    d = (Y[2] - Y[3]) / (2 * hy)
    return a, b, c, d


def fd_determinant(fmap: Callable, x, y, h: float = FD_STEP, scale=(1.0, 1.0)):
    a, b, c, d = fd_jacobian(fmap, x, y, h, scale)
    return a * d - b * c


# ---------------------------------------------------------------------------
# symplectic extension through a cut-off generating function


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep_d(s):
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 30.0 * s * s * (1.0 - s) ** 2, 0.0)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def _damped_fixed_point(update, start, tol=1e-13, maxiter=100, damping=1.0):
    cur = start
    for _ in range(maxiter):
        new = update(cur)
        step = new - cur
        cur = cur + damping * step
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(cur))):
            return cur
    raise ConvergenceError("implicit generating-function solve did not converge")


class SymplecticExtension:
    """Map equal to theta near o and to the identity far away.

    theta(x, y) -> (x~, y~) is encoded by F(x, y~) with dF = (y - y~) dx + (x~ - x) dy~.
    F is multiplied by a radial cut-off chi(|(x, y~)|) that is 1 below
    `inner * r_cut` and 0 beyond `outer * r_cut`; the cut-off function generates
    the extension.
    """

    def __init__(self, theta: Callable, r_cut: float, inner: float = 0.6,
                 outer: float = 0.9, tol: float = 1e-13, maxiter: int = 100):
        self.theta = theta
        self.r_cut = check_positive("r_cut", r_cut)
        self.inner = inner * r_cut
        self.outer = outer * r_cut
        self.tol = tol
        self.maxiter = maxiter

    # y such that theta_y(x, y) = ytil
    def _preimage_y(self, x, ytil):
        return _damped_fixed_point(lambda y: y - (self.theta(x, y)[1] - ytil), ytil,
                                   self.tol, self.maxiter)

    def _dF(self, x, ytil):
        y = self._preimage_y(x, ytil)
        xt, _ = self.theta(x, y)
        return y - ytil, xt - x

    def _F(self, x, ytil):
        xs = np.multiply.outer(_GL_NODES, x)
        ys = np.multiply.outer(_GL_NODES, ytil)
        fx, fy = self._dF(xs, ys)
        return np.tensordot(_GL_WEIGHTS, fx * x + fy * ytil, axes=1)

    def _chi(self, x, ytil):
        r = np.hypot(x, ytil)
        s = (r - self.inner) / (self.outer - self.inner)
        chi = 1.0 - _smoothstep(s)
        dchi_dr = -_smoothstep_d(s) / (self.outer - self.inner)
        rs = np.where(r > 0, r, 1.0)
        return chi, dchi_dr * x / rs, dchi_dr * ytil / rs

    def _dFcut(self, x, ytil):
        chi, cx, cy = self._chi(x, ytil)
        active = chi > 0
        fx = np.zeros_like(x)
        fy = np.zeros_like(x)
        if np.any(active):
            xa, ya = x[active], ytil[active]
            gx, gy = self._dF(xa, ya)
            partial = (cx[active] != 0) | (cy[active] != 0)
            F = np.zeros_like(xa)
            if np.any(partial):
                F[partial] = self._F(xa[partial], ya[partial])
            fx[active] = chi[active] * gx + F * cx[active]
            fy[active] = chi[active] * gy + F * cy[active]
        return fx, fy

    def __call__(self, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ytil = _damped_fixed_point(lambda yt: y - self._dFcut(x, yt)[0], y.copy(),
                                   self.tol, self.maxiter)
        return x + self._dFcut(x, ytil)[1], ytil


def extend_symplectic(theta: Callable, r_cut: float, **kw) -> SymplecticExtension:
    """Globalize a near-identity symplectic germ theta fixing o."""
    fx, fy = theta(np.array([0.0]), np.array([0.0]))
    if abs(float(fx[0])) > 1e-12 or abs(float(fy[0])) > 1e-12:
        raise DomainError("theta must fix the origin")
    return SymplecticExtension(theta, r_cut, **kw)


def generator_chain(generators, z1, z2, tol: float = 1e-12):
    """phi^1_{-G_1} o ... o phi^1_{-G_n} applied to (z1, z2), last generator first.

    This is the change of coordinates under which H becomes its normal form.
    Only autonomous generators have a plain time-1 flow.
    """
    state = np.stack([np.asarray(z1, dtype=float), np.asarray(z2, dtype=float)])
    for G in reversed(generators):
        if G.is_zero():
            continue
        if not G.is_autonomous():
            raise DomainError("generator chain needs t-independent generators")

        grad = G.gradient_function()

        def field(t, s, grad=grad):
            g1, g2 = grad(s[0], s[1])
            return np.stack([g2, -g1])  # J grad(-G)

        state, _ = integrate_adaptive(field, state, 0.0, 1.0, tol, relative=True)
    return PlanePoint(state[0], state[1])
