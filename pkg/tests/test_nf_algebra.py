import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from separatrix_lab._validation import DomainError
from separatrix_lab.charts_flows import generator_chain
from separatrix_lab.nf_algebra import (
    PolyQ,
    TrigPoly,
    TrigTaylorSeries,
    TruncationError,
    average_quadratic,
    bnf_normalize,
    poisson,
    random_perturbation,
    solve_homological_diag,
    solve_homological_offdiag,
    z1z2_power,
)

GRID = np.arange(256) / 256
Z1, Z2 = sp.symbols("z1 z2")


def mono(i1, i2, c=1.0, k=0, phase="cos"):
    return TrigTaylorSeries.monomial(i1, i2, c, k=k, phase=phase)


def to_sympy(series):
    assert series.is_autonomous()
    return sum((v * Z1 ** i1 * Z2 ** i2 for (i1, i2, _, _), v in series.coeffs.items()),
               sp.Integer(0))


def sympy_bracket(a, b):
    # <grad A, J grad B> with J = ((0,-1),(1,0))
    return sp.expand(-sp.diff(a, Z1) * sp.diff(b, Z2) + sp.diff(a, Z2) * sp.diff(b, Z1))


def assert_same_polynomial(series, expr, tol=1e-12):
    diff = sp.Poly(sp.expand(to_sympy(series) - expr), Z1, Z2)
    assert all(abs(float(c)) < tol for c in diff.coeffs())


# ---- poisson


def test_bracket_of_product_with_z1():
    out = poisson(mono(1, 1), mono(1, 0))
    assert_same_polynomial(out, sympy_bracket(Z1 * Z2, Z1))
    assert out == mono(1, 0, 1.0)


def test_bracket_with_itself_vanishes():
    assert poisson(mono(1, 1), mono(1, 1)).is_zero()


def test_bracket_of_squares():
    out = poisson(mono(2, 0), mono(0, 2))
    assert_same_polynomial(out, sympy_bracket(Z1 ** 2, Z2 ** 2))
    assert out == mono(1, 1, -4.0)


def random_autonomous(rng, degrees=(2, 3, 4)):
    out = TrigTaylorSeries(None)
    for d in degrees:
        for i1 in range(d + 1):
            out = out + mono(i1, d - i1, rng.uniform(-1, 1))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_bracket_matches_symbolic_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = random_autonomous(rng), random_autonomous(rng)
    assert_same_polynomial(poisson(a, b), sympy_bracket(to_sympy(a), to_sympy(b)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bracket_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    a = random_autonomous(rng) + mono(2, 1, 0.3, k=1, phase="sin")
    b = random_autonomous(rng) + mono(1, 2, -0.7, k=2)
    s = poisson(a, b) + poisson(b, a)
    assert s.max_abs() < 1e-13


def test_bracket_truncates_degree():
    a = TrigTaylorSeries.monomial(3, 3, deg_max=8)
    b = TrigTaylorSeries.monomial(2, 3, deg_max=8)
    assert all(i1 + i2 <= 8 for i1, i2 in poisson(a, b).monomials())


# ---- averaging


def test_average_constant_lambda():
    lam, a0 = average_quadratic(TrigPoly.constant(1.0))
    assert lam == 1.0 and a0.is_constant() and np.all(a0(GRID) == 0)


def test_average_cosine_lambda():
    lam, a0 = average_quadratic(TrigPoly([1.0, 1.0], [0.0, 0.0]))
    assert lam == pytest.approx(1.0)
    np.testing.assert_allclose(a0(GRID), -np.sin(2 * np.pi * GRID) / (2 * np.pi), atol=1e-15)


def test_average_sine_lambda_by_quadrature():
    lam_t = TrigPoly([2.0, 0.0], [0.0, 1.0])
    lam, a0 = average_quadratic(lam_t)
    assert lam == pytest.approx(2.0)
    for t in GRID[::16]:
        expected = -quad(lambda s: lam_t(s) - lam, 0.0, t)[0]
        assert a0(t) == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(a0(GRID), (np.cos(2 * np.pi * GRID) - 1) / (2 * np.pi), atol=1e-15)


def test_average_rejects_nonpositive_mean():
    with pytest.raises(DomainError):
        average_quadratic(TrigPoly([-1.0, 1.0], [0.0, 0.0]))


# ---- homological equations


def residual_offdiag(h, g, mu):
    return np.max(np.abs(h(GRID) + g.derivative()(GRID) - mu * g(GRID)))


def integral_oracle(h, mu, t):
    """The variation-of-constants formula for the periodic solution."""
    c = quad(lambda s: np.exp((1 - s) * mu) * h(s), 0, 1, epsabs=1e-14)[0] / np.expm1(mu)
    return np.exp(mu * t) * c - quad(lambda s: np.exp((t - s) * mu) * h(s), 0, t, epsabs=1e-14)[0]


def test_offdiag_constant():
    g = solve_homological_offdiag(TrigPoly.constant(1.0), 2.0)
    assert g.is_constant() and g.mean == pytest.approx(0.5)


def test_offdiag_cosine_mode():
    h = TrigPoly([0.0, 1.0], [0.0, 0.0])
    g = solve_homological_offdiag(h, 1.0)
    w = 2 * np.pi
    expected = (np.cos(w * GRID) - w * np.sin(w * GRID)) / (1 + w * w)
    np.testing.assert_allclose(g(GRID), expected, atol=1e-15)
    assert residual_offdiag(h, g, 1.0) < 1e-12


def test_offdiag_zero():
    g = solve_homological_offdiag(TrigPoly.constant(0.0), -3.0)
    assert np.all(g(GRID) == 0)


@pytest.mark.parametrize("mu", [-3.0, -1.0, 0.5, 2.0, 4.0])
def test_offdiag_matches_integral_formula(mu):
    rng = np.random.default_rng(int(mu * 10) + 50)
    h = TrigPoly(rng.normal(size=4), rng.normal(size=4))
    g = solve_homological_offdiag(h, mu)
    assert residual_offdiag(h, g, mu) < 1e-10
    for t in (0.0, 0.2, 0.55, 0.9):
        assert g(t) == pytest.approx(integral_oracle(h, mu, t), abs=1e-10)


def test_offdiag_degenerate_multiplier():
    with pytest.raises(DomainError):
        solve_homological_offdiag(TrigPoly.constant(1.0), 0.0)


def test_diag_cosine():
    a, g = solve_homological_diag(TrigPoly([0.0, 1.0], [0.0, 0.0]))
    assert a == 0.0
    np.testing.assert_allclose(g(GRID), -np.sin(2 * np.pi * GRID) / (2 * np.pi), atol=1e-15)


def test_diag_constant():
    a, g = solve_homological_diag(TrigPoly.constant(3.0))
    assert a == 3.0 and np.all(g(GRID) == 0)


def test_diag_sine_by_quadrature():
    h = TrigPoly([1.0, 0.0], [0.0, 1.0])
    a, g = solve_homological_diag(h)
    assert a == pytest.approx(1.0)
    assert g(0.0) == pytest.approx(0.0, abs=1e-15)
    assert np.max(np.abs(g.derivative()(GRID) + h(GRID) - a)) < 1e-10
    for t in GRID[::32]:
        assert g(t) == pytest.approx(-quad(lambda s: h(s) - a, 0, t)[0], abs=1e-12)


# ---- normal form


def test_bnf_already_normal():
    H = z1z2_power(1) + z1z2_power(2)
    q, gens = bnf_normalize(H, 5)
    assert q.lam == 1.0 and q.higher == (1.0,)
    assert len(gens) == 4 and all(g.is_zero() for g in gens)


def test_bnf_cubic_term():
    H = z1z2_power(1) + mono(3, 0)
    q, gens = bnf_normalize(H, 3)
    assert q == PolyQ(1.0)
    nonzero = [g for g in gens if not g.is_zero()]
    assert len(nonzero) == 1
    G = nonzero[0]
    assert G.monomials() == {(3, 0)}
    assert G.coefficient(3, 0).mean == pytest.approx(1 / 3)
    # {G, z1 z2} + z1^3 = 0
    assert_same_polynomial(poisson(G, z1z2_power(1)) + mono(3, 0), sp.Integer(0))


def test_bnf_periodic_diagonal_term():
    H = z1z2_power(1) + mono(2, 2, 1.0, k=1)
    res = bnf_normalize(H, 5, full=True)
    assert res.q == PolyQ(1.0)
    G = res.generators[2]
    np.testing.assert_allclose(G.coefficient(2, 2)(GRID),
                               -np.sin(2 * np.pi * GRID) / (2 * np.pi), atol=1e-15)
    assert res.nonintegrable_part().max_abs() < 1e-14


@pytest.mark.parametrize("seed", range(3))
def test_bnf_leaves_no_resonant_residue(seed):
    rng = np.random.default_rng(seed)
    H = random_perturbation(rng, (3, 4, 5, 6))
    H = H + TrigTaylorSeries.monomial(2, 1, 0.4, k=1, phase="sin")
    H = H + TrigTaylorSeries.monomial(1, 1, 0.5, k=2)
    res = bnf_normalize(H, 7, full=True)
    assert res.nonintegrable_part().max_abs() < 1e-10
    assert len(res.q.coefficients) - 1 <= (7 + 1) // 2


@pytest.mark.parametrize("seed", range(3))
def test_autonomous_input_gives_autonomous_generators(seed):
    rng = np.random.default_rng(100 + seed)
    _, gens = bnf_normalize(random_perturbation(rng, (3, 4, 5)), 6)
    assert all(k == 0 for g in gens for (_, _, k, _) in g.coeffs)


def test_bnf_order_above_truncation():
    H = TrigTaylorSeries.monomial(1, 1, deg_max=4)
    with pytest.raises(TruncationError):
        bnf_normalize(H, 5)


def test_bnf_rejects_hyperbolic_quadratic_cross_terms():
    with pytest.raises(DomainError):
        bnf_normalize(z1z2_power(1) + mono(2, 0), 3)


@pytest.mark.parametrize("seed", range(4))
def test_remainder_order_along_ray(seed):
    rng = np.random.default_rng(seed)
    H = random_perturbation(rng, (3, 4))
    q, gens = bnf_normalize(H, 5)
    rho = np.logspace(-3, -1, 9)
    z = generator_chain(gens, rho, rho)
    r = np.abs(H(0.0, z.x, z.y) - q(rho * rho))
    slope = np.polyfit(np.log(rho), np.log(r), 1)[0]
    assert slope >= 5.5


# ---- misc


def test_text_round_trip():
    rng = np.random.default_rng(7)
    H = random_perturbation(rng, (3, 4)) + mono(2, 1, 0.1 / 3, k=3, phase="sin")
    back = TrigTaylorSeries.from_text(H.to_text())
    assert back == H and back.deg_max == H.deg_max
    for line in (l for l in H.to_text().splitlines() if not l.startswith("#")):
        assert len(line.split()) == 5


def test_evaluation_is_real_and_finite():
    H = z1z2_power(1) + mono(3, 1, 2.0, k=2, phase="sin")
    vals = H(np.linspace(0, 1, 7), np.linspace(-3, 3, 7), np.linspace(2, -2, 7))
    assert np.all(np.isfinite(vals)) and vals.dtype == float


def test_polyq_validity_radius():
    q = PolyQ(1.0, (-1.0,))
    # q'(s) = 1 - 2s reaches 1/2 at s = 1/4
    assert q.validity_radius == pytest.approx(0.25)
    assert isinstance(q.validity_radius, float)
    assert PolyQ(1.0).validity_radius == np.inf


def test_polyq_log_inverse():
    q = PolyQ(1.3, (0.7, -0.2))
    logs = np.log(np.array([1e-30, 1e-8, 1e-3, 0.05]))
    np.testing.assert_allclose(q.log_inverse(np.log(q(np.exp(logs)))), logs, rtol=0, atol=1e-13)
