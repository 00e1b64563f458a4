"""Truncated Fourier-Taylor series and normal-form elimination for
1-periodically forced planar Hamiltonians near a saddle.

Series are polynomials in (z1, z2) whose coefficients are real trigonometric
polynomials in t with period 1. The bracket is {A, B} = <grad A, J grad B>
with J = ((0, -1), (1, 0)), i.e. {A, B} = -A_1 B_2 + A_2 B_1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._validation import DomainError, check_int, check_positive

TWO_PI = 2.0 * math.pi
DEG_LIMIT = 12
FOURIER_LIMIT = 32
DEGENERACY_TOL = 1e-12

Key = tuple[int, int, int, str]


class TruncationError(ValueError):
    """Requested order exceeds what the series stores."""


# ---------------------------------------------------------------------------
# trigonometric polynomials in t


@dataclass(frozen=True)
class TrigPoly:
    """c[0] + sum_k c[k] cos(2 pi k t) + s[k] sin(2 pi k t); s[0] is ignored."""

    cos: np.ndarray
    sin: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.cos, dtype=float)).copy()
        s = np.atleast_1d(np.asarray(self.sin, dtype=float)).copy()
        n = max(len(c), len(s))
        c = np.pad(c, (0, n - len(c)))
        s = np.pad(s, (0, n - len(s)))
        s[0] = 0.0
        object.__setattr__(self, "cos", c)
        object.__setattr__(self, "sin", s)

    @classmethod
    def constant(cls, value: float) -> "TrigPoly":
        return cls(np.array([float(value)]), np.zeros(1))

    @classmethod
    def from_modes(cls, modes: dict[tuple[int, str], float]) -> "TrigPoly":
        kmax = max((k for k, _ in modes), default=0)
        c = np.zeros(kmax + 1)
        s = np.zeros(kmax + 1)
        for (k, phase), v in modes.items():
            (c if phase == "cos" else s)[k] += v
        return cls(c, s)

    @classmethod
    def from_samples(cls, values: np.ndarray, kmax: int) -> "TrigPoly":
        """Project equispaced samples on [0, 1) onto modes 0..kmax."""
        n = len(values)
        spec = np.fft.rfft(values) / n
        kk = min(kmax, n // 2 - 1)
        c = np.zeros(kmax + 1)
        s = np.zeros(kmax + 1)
        c[0] = spec[0].real
        c[1:kk + 1] = 2.0 * spec[1:kk + 1].real
        s[1:kk + 1] = -2.0 * spec[1:kk + 1].imag
        return cls(c, s)

    @property
    def kmax(self) -> int:
        return len(self.cos) - 1

    @property
    def mean(self) -> float:
        return float(self.cos[0])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.arange(len(self.cos))
        arg = TWO_PI * np.multiply.outer(t, k)
        return np.cos(arg) @ self.cos + np.sin(arg) @ self.sin

    def derivative(self) -> "TrigPoly":
        k = TWO_PI * np.arange(len(self.cos))
        return TrigPoly(k * self.sin, -k * self.cos)

    def is_constant(self) -> bool:
        return not (np.any(self.cos[1:]) or np.any(self.sin[1:]))

    def modes(self) -> dict[tuple[int, str], float]:
        out = {}
        for k, v in enumerate(self.cos):
            if v != 0.0:
                out[(k, "cos")] = float(v)
        for k, v in enumerate(self.sin):
            if k > 0 and v != 0.0:
                out[(k, "sin")] = float(v)
        return out


# ---------------------------------------------------------------------------
# the series type


def _trig_product(k1: int, p1: str, k2: int, p2: str):
    """Expand a product of two trig modes into (k, phase, factor) triples."""
    kd, ks = k1 - k2, k1 + k2
    sd = 1.0 if kd >= 0 else -1.0
    kd = abs(kd)
    if p1 == "cos" and p2 == "cos":
        return [(kd, "cos", 0.5), (ks, "cos", 0.5)]
    if p1 == "sin" and p2 == "sin":
        return [(kd, "cos", 0.5), (ks, "cos", -0.5)]
    if p1 == "sin" and p2 == "cos":
        return [(ks, "sin", 0.5), (kd, "sin", 0.5 * sd)]
    return [(ks, "sin", 0.5), (kd, "sin", -0.5 * sd)]


class TrigTaylorSeries:
    """Sparse map (i1, i2, k, phase) -> coefficient with fixed truncation orders."""

    __slots__ = ("coeffs", "deg_max", "fourier_max")

    def __init__(self, coeffs: dict[Key, float] | None = None,
                 deg_max: int = DEG_LIMIT, fourier_max: int = FOURIER_LIMIT):
        self.deg_max = check_int("deg_max", deg_max, 0, DEG_LIMIT)
        self.fourier_max = check_int("fourier_max", fourier_max, 0, FOURIER_LIMIT)
        self.coeffs: dict[Key, float] = {}
        for key, v in (coeffs or {}).items():
            self._accumulate(key, v)

    # -- construction helpers
    def _accumulate(self, key: Key, value: float) -> None:
        i1, i2, k, phase = key
        if phase not in ("cos", "sin"):
            raise DomainError(f"phase must be 'cos' or 'sin', got {phase!r}")
        if i1 < 0 or i2 < 0 or k < 0:
            raise DomainError(f"negative index in {key}")
        if i1 + i2 > self.deg_max or k > self.fourier_max:
            return
        if phase == "sin" and k == 0:
            return
        key = (int(i1), int(i2), int(k), phase)
        new = self.coeffs.get(key, 0.0) + float(value)
        if new == 0.0:
            self.coeffs.pop(key, None)
        else:
            self.coeffs[key] = new

    def _empty(self) -> "TrigTaylorSeries":
        return TrigTaylorSeries(None, self.deg_max, self.fourier_max)

    @classmethod
    def monomial(cls, i1: int, i2: int, coeff: float = 1.0, k: int = 0,
                 phase: str = "cos", deg_max: int = DEG_LIMIT,
                 fourier_max: int = FOURIER_LIMIT) -> "TrigTaylorSeries":
        return cls({(i1, i2, k, phase): coeff}, deg_max, fourier_max)

    @classmethod
    def from_trig(cls, i1: int, i2: int, poly: TrigPoly, deg_max: int = DEG_LIMIT,
                  fourier_max: int = FOURIER_LIMIT) -> "TrigTaylorSeries":
        out = cls(None, deg_max, fourier_max)
        for (k, phase), v in poly.modes().items():
            out._accumulate((i1, i2, k, phase), v)
        return out

    def copy(self) -> "TrigTaylorSeries":
        out = self._empty()
        out.coeffs = dict(self.coeffs)
        return out

    # -- inspection
    def __len__(self) -> int:
        return len(self.coeffs)

    def __repr__(self) -> str:
        return (f"TrigTaylorSeries({len(self.coeffs)} terms, deg_max={self.deg_max}, "
                f"fourier_max={self.fourier_max})")

    def is_zero(self, tol: float = 0.0) -> bool:
        return all(abs(v) <= tol for v in self.coeffs.values())

    def monomials(self) -> set[tuple[int, int]]:
        return {(i1, i2) for i1, i2, _, _ in self.coeffs}

    def coefficient(self, i1: int, i2: int) -> TrigPoly:
        modes = {(k, p): v for (a, b, k, p), v in self.coeffs.items() if (a, b) == (i1, i2)}
        return TrigPoly.from_modes(modes) if modes else TrigPoly.constant(0.0)

    def degree_part(self, d: int) -> "TrigTaylorSeries":
        out = self._empty()
        out.coeffs = {key: v for key, v in self.coeffs.items() if key[0] + key[1] == d}
        return out

    def max_fourier_index(self) -> int:
        return max((k for _, _, k, _ in self.coeffs), default=0)

    def is_autonomous(self) -> bool:
        return all(k == 0 for _, _, k, _ in self.coeffs)

    def max_abs(self) -> float:
        return max((abs(v) for v in self.coeffs.values()), default=0.0)

    # -- arithmetic
    def _compatible(self, other: "TrigTaylorSeries") -> tuple[int, int]:
        return min(self.deg_max, other.deg_max), min(self.fourier_max, other.fourier_max)

    def __add__(self, other: "TrigTaylorSeries") -> "TrigTaylorSeries":
        d, f = self._compatible(other)
        out = TrigTaylorSeries(self.coeffs, d, f)
        for key, v in other.coeffs.items():
            out._accumulate(key, v)
        return out

    def __neg__(self) -> "TrigTaylorSeries":
        return self.scale(-1.0)

    def __sub__(self, other: "TrigTaylorSeries") -> "TrigTaylorSeries":
        return self + (-other)

    def scale(self, factor: float) -> "TrigTaylorSeries":
        out = self._empty()
        if factor != 0.0:
            out.coeffs = {key: factor * v for key, v in self.coeffs.items()}
        return out

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        d, f = self._compatible(other)
        out = TrigTaylorSeries(None, d, f)
        for (a1, a2, ka, pa), va in self.coeffs.items():
            for (b1, b2, kb, pb), vb in other.coeffs.items():
                if a1 + b1 + a2 + b2 > d:
                    continue
                for k, p, fac in _trig_product(ka, pa, kb, pb):
                    if p == "sin" and k == 0:
                        continue
                    out._accumulate((a1 + b1, a2 + b2, k, p), fac * va * vb)
        return out

    __rmul__ = __mul__

    def d_z1(self) -> "TrigTaylorSeries":
        out = self._empty()
        for (i1, i2, k, p), v in self.coeffs.items():
            if i1:
                out._accumulate((i1 - 1, i2, k, p), i1 * v)
        return out

    def d_z2(self) -> "TrigTaylorSeries":
        out = self._empty()
        for (i1, i2, k, p), v in self.coeffs.items():
            if i2:
                out._accumulate((i1, i2 - 1, k, p), i2 * v)
        return out

    def d_t(self) -> "TrigTaylorSeries":
        out = self._empty()
        for (i1, i2, k, p), v in self.coeffs.items():
            if k == 0:
                continue
            if p == "cos":
                out._accumulate((i1, i2, k, "sin"), -TWO_PI * k * v)
            else:
                out._accumulate((i1, i2, k, "cos"), TWO_PI * k * v)
        return out

    def truncate(self, deg_max: int | None = None,
                 fourier_max: int | None = None) -> "TrigTaylorSeries":
        d = self.deg_max if deg_max is None else deg_max
        f = self.fourier_max if fourier_max is None else fourier_max
        return TrigTaylorSeries(self.coeffs, d, f)

    # -- evaluation
    def __call__(self, t, z1, z2):
        t, z1, z2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, z1, z2)))
        out = np.zeros(t.shape)
        for (i1, i2, k, p), v in self.coeffs.items():
            trig = np.cos(TWO_PI * k * t) if p == "cos" else np.sin(TWO_PI * k * t)
            out = out + v * trig * z1 ** i1 * z2 ** i2
        return out

    def gradient(self, t, z1, z2):
        return self.d_z1()(t, z1, z2), self.d_z2()(t, z1, z2)

    def gradient_function(self):
        """Fast (z1, z2) -> gradient for a t-independent series."""
        if not self.is_autonomous():
            raise DomainError("gradient_function needs a t-independent series")
        terms = [(i1, i2, v) for (i1, i2, _, _), v in self.coeffs.items()]

        def grad(z1, z2):
            g1 = 0.0 * z1
            g2 = 0.0 * z2
            for i1, i2, v in terms:
                if i1:
                    g1 = g1 + (v * i1) * z1 ** (i1 - 1) * z2 ** i2
                if i2:
                    g2 = g2 + (v * i2) * z1 ** i1 * z2 ** (i2 - 1)
            return g1, g2

        return grad

    # -- serialization: one line per stored coefficient
    def to_text(self) -> str:
        lines = [f"# deg_max={self.deg_max} fourier_max={self.fourier_max}",
                 "# i1 i2 k phase value"]
        for key in sorted(self.coeffs):
            i1, i2, k, p = key
            lines.append(f"{i1} {i2} {k} {p} {self.coeffs[key]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrigTaylorSeries":
        deg_max, fourier_max = DEG_LIMIT, FOURIER_LIMIT
        rows = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("deg_max="):
                        deg_max = int(tok.split("=")[1])
                    elif tok.startswith("fourier_max="):
                        fourier_max = int(tok.split("=")[1])
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"bad coefficient line: {raw!r}")
            rows.append(((int(parts[0]), int(parts[1]), int(parts[2]), parts[3]),
                         float(parts[4])))
        return cls(dict(rows), deg_max, fourier_max)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrigTaylorSeries):
            return NotImplemented
        return self.coeffs == other.coeffs


def z1z2_power(m: int, coeff: float = 1.0, deg_max: int = DEG_LIMIT,
               fourier_max: int = FOURIER_LIMIT) -> TrigTaylorSeries:
    return TrigTaylorSeries.monomial(m, m, coeff, deg_max=deg_max, fourier_max=fourier_max)


def poisson(A: TrigTaylorSeries, B: TrigTaylorSeries) -> TrigTaylorSeries:
    """{A, B} = <grad A, J grad B> = -dA/dz1 dB/dz2 + dA/dz2 dB/dz1."""
    return A.d_z2() * B.d_z1() - A.d_z1() * B.d_z2()


# ---------------------------------------------------------------------------
# polynomial q


@dataclass(frozen=True)
class PolyQ:
    """q(s) = lam s + sum_{i>=2} higher[i-2] s^i."""

    lam: float
    higher: tuple[float, ...] = ()
    validity_radius: float = field(default=math.inf, compare=False)

    def __post_init__(self):
        check_positive("lambda", self.lam)
        object.__setattr__(self, "higher", tuple(float(a) for a in self.higher))
        object.__setattr__(self, "validity_radius", self._radius())

    @property
    def coefficients(self) -> np.ndarray:
        """Power-basis coefficients, index = power."""
        return np.array([0.0, self.lam, *self.higher])

    def _radius(self) -> float:
        """Largest r with q'(s) > lam/2 for all |s| < r."""
        if not any(self.higher):
            return math.inf
        dq = np.polynomial.Polynomial(self.coefficients).deriv()
        roots = (dq - self.lam / 2).roots()
        real = [abs(r.real) for r in roots if abs(r.imag) < 1e-12 * max(1.0, abs(r))]
        return float(min(real)) if real else math.inf

    def __call__(self, s):
        return np.polynomial.polynomial.polyval(s, self.coefficients)

    def d1(self, s):
        c = self.coefficients
        return np.polynomial.polynomial.polyval(s, c[1:] * np.arange(1, len(c)))

    def d2(self, s):
        c = self.coefficients
        k = np.arange(2, len(c))
        return np.polynomial.polynomial.polyval(s, c[2:] * k * (k - 1)) if len(k) else 0.0 * s

    def in_domain(self, s) -> np.ndarray:
        return np.abs(np.asarray(s, dtype=float)) < self.validity_radius

    def log_ratio(self, logs):
        """ln(q(s)/s) for s = exp(logs), accurate for tiny s."""
        s = np.exp(np.asarray(logs, dtype=float))
        c = self.coefficients
        poly = np.polynomial.polynomial.polyval(s, c[1:])
        return np.log(poly)

    def log_inverse(self, log_energy, guess=None, tol: float = 1e-15, maxiter: int = 50):
        """Solve ln q(e^s) = log_energy for s (energy > 0 branch near 0)."""
        log_energy = np.asarray(log_energy, dtype=float)
        s = log_energy - math.log(self.lam) if guess is None else np.asarray(guess, dtype=float)
        if not any(self.higher):
            return s
        for _ in range(maxiter):
            v = np.exp(s)
            f = s + self.log_ratio(s) - log_energy
            # d/ds [s + ln(q(v)/v)] = v q'(v)/q(v)
            fp = v * self.d1(v) / self(v)
            step = f / fp
            s = s - step
            if np.all(np.abs(step) < tol):
                break
        return s

    def as_series(self, deg_max: int = DEG_LIMIT, fourier_max: int = FOURIER_LIMIT):
        out = TrigTaylorSeries(None, deg_max, fourier_max)
        for m, a in enumerate(self.coefficients):
            if m and a:
                out = out + z1z2_power(m, a, deg_max, fourier_max)
        return out


# ---------------------------------------------------------------------------
# homological equations


def average_quadratic(lambda_of_t: TrigPoly) -> tuple[float, TrigPoly]:
    """Mean of lambda(t) and a0 with a0' = -(lambda - mean), a0(0) = 0."""
    lam_bar = lambda_of_t.mean
    if not lam_bar > 0:
        raise DomainError(f"mean of lambda(t) must be positive, got {lam_bar!r}")
    _, a0 = solve_homological_diag(lambda_of_t)
    return lam_bar, a0


def solve_homological_offdiag(h: TrigPoly, mu: float) -> TrigPoly:
    """Periodic g with h + g' - mu g = 0, one 2x2 real system per mode."""
    mu = float(mu)
    if abs(math.expm1(mu)) < DEGENERACY_TOL:
        raise DomainError(f"degenerate multiplier mu={mu!r}; use the diagonal solver")
    n = len(h.cos)
    gc = np.zeros(n)
    gs = np.zeros(n)
    gc[0] = h.cos[0] / mu
    for k in range(1, n):
        w = TWO_PI * k
        # cos: w gs - mu gc = -hc ; sin: -w gc - mu gs = -hs
        det = mu * mu + w * w
        gc[k] = (mu * h.cos[k] + w * h.sin[k]) / det
        gs[k] = (mu * h.sin[k] - w * h.cos[k]) / det
    return TrigPoly(gc, gs)


def solve_homological_diag(h: TrigPoly) -> tuple[float, TrigPoly]:
    """a_tilde = mean(h) and g(t) = -int_0^t (h - a_tilde), so g(0) = 0."""
    n = len(h.cos)
    gc = np.zeros(n)
    gs = np.zeros(n)
    for k in range(1, n):
        w = TWO_PI * k
        gs[k] = -h.cos[k] / w
        gc[k] = h.sin[k] / w
        gc[0] -= h.sin[k] / w
    return h.mean, TrigPoly(gc, gs)


# ---------------------------------------------------------------------------
# Lie transforms and the normal form


def lie_transform(H: TrigTaylorSeries, G: TrigTaylorSeries) -> TrigTaylorSeries:
    """exp(ad_G) applied to H + E on extended phase space, minus E.

    First order: H + dG/dt + {G, H}. G must have degree >= 3 so the series
    terminates at the truncation order.
    """
    if any(i1 + i2 < 3 for i1, i2, _, _ in G.coeffs):
        raise DomainError("lie_transform needs a generator of degree >= 3")
    result = H.copy()
    term = H.copy()
    k = 1
    while not term.is_zero():
        term = poisson(G, term).scale(1.0 / k)
        result = result + term
        k += 1
    gt = G.d_t()
    term = gt
    k = 1
    while not term.is_zero():
        result = result + term.scale(1.0 / math.factorial(k))
        term = poisson(G, term)
        k += 1
    return result


def _apply_quadratic_generator(H: TrigTaylorSeries, a0: TrigPoly, lam_bar: float) -> TrigTaylorSeries:
    """Closed-form Lie transform by G = a0(t) z1 z2 (degree preserving)."""
    fm = H.fourier_max
    n = max(256, 8 * (fm + 1))
    t = np.arange(n) / n
    a_vals = a0(t)
    out = TrigTaylorSeries(None, H.deg_max, fm)
    for i1, i2 in sorted(H.monomials()):
        if (i1, i2) == (1, 1):
            out = out + z1z2_power(1, lam_bar, H.deg_max, fm)
            continue
        c_vals = H.coefficient(i1, i2)(t)
        new = TrigPoly.from_samples(c_vals * np.exp((i1 - i2) * a_vals), fm)
        out = out + TrigTaylorSeries.from_trig(i1, i2, new, H.deg_max, fm)
    return out


def _clean(poly: TrigPoly, scale: float, rel: float = 1e-15) -> TrigPoly:
    c = np.where(np.abs(poly.cos) > rel * scale, poly.cos, 0.0)
    s = np.where(np.abs(poly.sin) > rel * scale, poly.sin, 0.0)
    return TrigPoly(c, s)


@dataclass
class NormalFormResult:
    q: PolyQ
    generators: list[TrigTaylorSeries]
    transformed: TrigTaylorSeries
    order: int

    def nonintegrable_part(self) -> TrigTaylorSeries:
        """Terms of degree <= order that are not constants times (z1 z2)^m."""
        out = self.transformed._empty()
        for key, v in self.transformed.coeffs.items():
            i1, i2, k, _ = key
            if i1 + i2 > self.order:
                continue
            if i1 == i2 and k == 0:
                continue
            out.coeffs[key] = v
        return out


def bnf_normalize(H: TrigTaylorSeries, N: int, full: bool = False):
    """Birkhoff normal form of H = lambda(t) z1 z2 + O^3 through degree N.

    Returns (q, generators) where generators[j-1] = G_j has degree j+1; G_1 is
    the quadratic averaging generator. With full=True a NormalFormResult is
    returned instead.
    """
    N = check_int("N", N, 2)
    if N > H.deg_max:
        raise TruncationError(f"N={N} exceeds the series truncation deg_max={H.deg_max}")
    for key, v in H.coeffs.items():
        i1, i2 = key[0], key[1]
        if i1 + i2 < 2:
            raise DomainError(f"H must vanish to second order at o, found term {key}")
        if i1 + i2 == 2 and (i1, i2) != (1, 1) and v != 0.0:
            raise DomainError("quadratic part must be lambda(t) z1 z2")

    lam_t = H.coefficient(1, 1)
    lam_bar, a0 = average_quadratic(lam_t)
    G1 = TrigTaylorSeries.from_trig(1, 1, a0, H.deg_max, H.fourier_max)
    current = H.copy() if a0.is_constant() else _apply_quadratic_generator(H, a0, lam_bar)

    generators = [G1]
    diag: dict[int, float] = {}
    scale = max(1.0, H.max_abs())
    for d in range(3, N + 1):
        part = current.degree_part(d)
        G = TrigTaylorSeries(None, H.deg_max, H.fourier_max)
        for i1, i2 in sorted(part.monomials()):
            h = part.coefficient(i1, i2)
            if i1 != i2:
                g = solve_homological_offdiag(h, lam_bar * (i1 - i2))
            else:
                a_tilde, g = solve_homological_diag(h)
                diag[i1] = a_tilde
            G = G + TrigTaylorSeries.from_trig(i1, i2, _clean(g, scale), H.deg_max, H.fourier_max)
        generators.append(G)
        if not G.is_zero():
            current = lie_transform(current, G)

    higher = [diag.get(m, 0.0) for m in range(2, N // 2 + 1)]
    while higher and higher[-1] == 0.0:
        higher.pop()
    q = PolyQ(lam_bar, tuple(higher))
    if full:
        return NormalFormResult(q, generators, current, N)
    return q, generators


def random_perturbation(rng: np.random.Generator, degrees: Iterable[int] = (3, 4),
                        scale: float = 1.0, deg_max: int = DEG_LIMIT) -> TrigTaylorSeries:
    """z1 z2 plus random autonomous monomials of the given degrees."""
    H = z1z2_power(1, 1.0, deg_max, 0)
    for d in degrees:
        for i1 in range(d + 1):
            H = H + TrigTaylorSeries.monomial(i1, d - i1, scale * rng.uniform(-1, 1),
                                              deg_max=deg_max, fourier_max=0)
    return H
