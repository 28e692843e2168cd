import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from optstop import (DiffusionSpec, DomainError, NumericalFailure, Numerics, check_convexity,
                     decompose_solution, hitting_laplace, make_preset, scale_function,
                     solve_fundamental_pair)
from optstop.expr import Expression
from optstop.fundamentals import gbm_exponents

# roots of 0.045 g^2 - 0.025 g - 0.05 for GBM(0.02, 0.3), r = 0.05, from numpy.roots
GAMMA0 = 1.3678564927971435
GAMMA1 = -0.8123009372415881


@pytest.fixture(scope="module")
def gbm_numeric(gbm):
    return solve_fundamental_pair(gbm, numerics=Numerics(method="numeric"))


@pytest.fixture(scope="module")
def bm_pair():
    # driftless Brownian motion with generator u'' on [1e-2, 20], r = 1
    spec = DiffusionSpec(Expression("0"), Expression("sqrt(2)"), 1.0, 1e-2, 20.0)
    return solve_fundamental_pair(spec, numerics=Numerics(strict=False))


def test_gbm_exponents_match_the_quadratic_roots():
    g0, g1 = gbm_exponents(0.02, 0.3, 0.05)
    roots = np.sort(np.roots([0.045, 0.02 - 0.045, -0.05]))
    assert g0 == pytest.approx(roots[1], rel=1e-14) == pytest.approx(GAMMA0, rel=1e-14)
    assert g1 == pytest.approx(roots[0], rel=1e-14) == pytest.approx(GAMMA1, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(b=st.floats(-0.3, 0.3), v=st.floats(0.05, 1.5), r=st.floats(1e-3, 0.5))
def test_gbm_exponents_solve_the_characteristic_equation(b, v, r):
    g0, g1 = gbm_exponents(b, v, r)
    assert g1 < 0 < g0
    for g in (g0, g1):
        assert 0.5 * v * v * g * g + (b - 0.5 * v * v) * g - r == pytest.approx(0.0, abs=1e-12 * (1 + g * g))


def test_closed_form_pair_is_normalized_power_functions(gbm_pair):
    p = gbm_pair
    xc = p.anchor
    assert p.source == "ClosedFormGBM"
    assert p.psi(xc) == pytest.approx(1.0) and p.phi(xc) == pytest.approx(1.0)
    x = np.array([0.01, 0.5, 1.0, 3.0, 100.0])
    assert np.allclose(p.psi(x), (x / xc) ** GAMMA0, rtol=1e-12)
    assert np.allclose(p.phi(x), (x / xc) ** GAMMA1, rtol=1e-12)
    assert np.allclose(p.dpsi(x), GAMMA0 / x * (x / xc) ** GAMMA0, rtol=1e-12)
    assert p.wronskian == pytest.approx((GAMMA0 - GAMMA1) / xc, rel=1e-14)
    assert p.quality["wronskian_spread"] < 1e-12


def test_numeric_pair_recovers_the_gbm_exponents(gbm_numeric, gbm_pair):
    p = gbm_numeric
    g0, g1 = p.gamma_estimates()
    assert abs(g0 - GAMMA0) <= 1e-7 and abs(g1 - GAMMA1) <= 1e-7
    assert p.quality["wronskian_spread"] <= 1e-6
    x = np.geomspace(1e-3, 1e2, 40)
    assert np.allclose(p.psi(x), gbm_pair.psi(x), rtol=1e-8)
    assert np.allclose(p.phi(x), gbm_pair.phi(x), rtol=1e-8)
    assert np.allclose(p.d2phi(x), gbm_pair.d2phi(x), rtol=1e-6)


def test_pair_is_positive_monotone_and_solves_the_ode(gbm_numeric):
    p = gbm_numeric
    x = p.grid[::16]
    assert np.all(p.psi(x) > 0) and np.all(p.phi(x) > 0)
    assert np.all(np.diff(p.psi(x)) > 0) and np.all(np.diff(p.phi(x)) < 0)
    spec = p.spec
    for u, du, d2u in ((p.psi, p.dpsi, p.d2psi), (p.phi, p.dphi, p.d2phi)):
        res = spec.generator_residual(u(x), du(x), d2u(x), x)
        size = np.abs(0.5 * spec.sigma(x) ** 2 * d2u(x)) + spec.r * u(x)
        assert np.max(np.abs(res) / size) < 1e-7


def test_wronskian_is_constant_across_the_grid(gbm_numeric):
    w = gbm_numeric.wronskian_at(gbm_numeric.grid)
    assert np.ptp(w) / np.mean(w) <= 1e-6


def test_brownian_toy_pair(bm_pair):
    p = bm_pair
    x = np.linspace(0.05, 15.0, 60)
    # phi decays at the natural right end: proportional to e^{-x}
    ratio = p.phi(x) * np.exp(x)
    assert np.ptp(ratio) / np.mean(ratio) < 1e-9
    # psi is some solution of u'' = u
    assert np.max(np.abs(p.d2psi(x) - p.psi(x)) / p.psi(x)) < 1e-8
    # 0 is not a boundary of the toy: shooting for psi is reported inconclusive
    assert p.flags["psi_shooting_conclusive"] is False
    assert any("inconclusive" in w for w in p.warnings)


def test_scale_function_driftless_is_identity_shift(bm_pair):
    x = np.linspace(0.05, 15.0, 30)
    S = scale_function(bm_pair.spec, x)
    assert np.allclose(S, x - bm_pair.spec.anchor, atol=1e-12)


def test_scale_function_gbm_closed_form(gbm):
    x = np.geomspace(0.01, 100.0, 25)
    xc = gbm.anchor
    k = 2 * 0.02 / 0.09
    expected = xc / (1 - k) * ((x / xc) ** (1 - k) - 1)
    assert np.allclose(scale_function(gbm, x), expected, rtol=1e-11)


def test_hitting_laplace_closed_form(gbm_pair):
    assert float(hitting_laplace(gbm_pair, 1.0, 2.0)) == pytest.approx(0.5 ** GAMMA0, rel=1e-12)
    assert float(hitting_laplace(gbm_pair, 2.0, 1.0)) == pytest.approx(2.0 ** GAMMA1, rel=1e-12)
    assert float(hitting_laplace(gbm_pair, 1.0, 1.0)) == 1.0


@settings(max_examples=40, deadline=None)
@given(x=st.floats(1e-3, 100.0), kappa=st.floats(1e-3, 100.0))
def test_hitting_laplace_is_a_probability_weight(gbm_pair, x, kappa):
    v = float(hitting_laplace(gbm_pair, x, kappa))
    assert 0.0 < v <= 1.0
    # farther targets are reached later
    if x < kappa:
        assert v >= float(hitting_laplace(gbm_pair, x, min(kappa * 1.5, 500.0))) - 1e-15


def test_decompose_recovers_known_coefficients(gbm_pair):
    p, xc = gbm_pair, gbm_pair.anchor
    alpha = 1.0 * p.psi(xc) + 2.0 * p.phi(xc)
    beta = 1.0 * p.dpsi(xc) + 2.0 * p.dphi(xc)
    c1, c2, resid = decompose_solution(p, float(alpha), float(beta))
    assert c1 == pytest.approx(1.0, rel=1e-10) and c2 == pytest.approx(2.0, rel=1e-10)
    assert resid <= 1e-6


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_decompose_any_initial_data(gbm_pair, a, b):
    assume(abs(a) + abs(b) > 1e-3)
    c1, c2, resid = decompose_solution(gbm_pair, a, b, span=1.5, n=301)
    assert resid <= 1e-6


def test_convexity_of_gbm_pair(gbm_pair):
    assert check_convexity(gbm_pair) == {"psi_convex": True, "phi_convex": True}


def test_evaluation_outside_domain_raises(gbm_pair):
    with pytest.raises(DomainError):
        gbm_pair.psi(1e-6)
    with pytest.raises(DomainError):
        gbm_pair.phi(1e4)


def test_closed_form_requested_for_non_gbm_fails():
    cev = make_preset("CEV", {"b": 0.02, "v": 0.3, "beta": 0.8}, 0.05)
    with pytest.raises(NumericalFailure):
        solve_fundamental_pair(cev, numerics=Numerics(method="closed_form"))


def test_pair_table_columns(gbm_pair):
    t = gbm_pair.table()
    assert list(t) == ["x", "psi", "phi", "dpsi", "dphi", "scale"]
    assert all(len(v) == gbm_pair.grid.size for v in t.values())


@pytest.mark.slow
@pytest.mark.parametrize("kind,params", [
    ("CEV", {"b": 0.02, "v": 0.3, "beta": 1.5}),
    ("CEV", {"b": 0.02, "v": 0.3, "beta": 0.8}),
    ("CIR", {"a": 1.0, "m": 1.0, "v": 1.0}),
])
def test_numeric_pairs_for_other_presets(kind, params):
    p = solve_fundamental_pair(make_preset(kind, params, 0.05))
    assert p.quality["wronskian_spread"] <= 1e-6
    assert p.quality["ode_residual"] <= 1e-8
    assert check_convexity(p) == {"psi_convex": True, "phi_convex": True}
