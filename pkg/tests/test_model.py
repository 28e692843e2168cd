import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optstop import (ConfigError, DiffusionSpec, EsoReward, PutReward, ValidationError,
                     default_domain, make_preset, validate_assumptions)
from optstop.expr import Expression


def test_gbm_preset_coefficients(gbm):
    x = np.array([0.5, 1.0, 4.0])
    assert np.allclose(gbm.mu(x), 0.02 * x)
    assert np.allclose(gbm.sigma(x), 0.3 * x)
    assert np.allclose(gbm.theta(x), 0.03 * x)
    assert gbm.is_gbm and gbm.r == 0.05
    assert (gbm.domain_lo, gbm.domain_hi) == default_domain(1.0)


def test_default_domain_scales_with_payoff():
    assert default_domain(0.5) == (1e-4, 1e3)
    lo, hi = default_domain(20.0)
    assert lo == pytest.approx(2e-3) and hi == pytest.approx(2e4)


@pytest.mark.parametrize("kind,params", [
    ("GBM", {"b": 0.02, "v": 0.0}),
    ("CEV", {"b": 0.02, "v": 0.3, "beta": -0.5}),
    ("CIR", {"a": 0.1, "m": 1.0, "v": 1.0}),        # 2am = 0.2 < v^2
    ("Heston", {}),
])
def test_bad_presets_are_rejected(kind, params):
    with pytest.raises(ValidationError):
        make_preset(kind, params, r=0.05)


def test_rate_and_domain_must_be_positive():
    with pytest.raises(ValidationError):
        make_preset("GBM", {"b": 0.0, "v": 0.2}, r=0.0)
    with pytest.raises(ValidationError):
        make_preset("GBM", {"b": 0.0, "v": 0.2}, r=0.05, domain=(1.0, 0.5))


def test_rewards_check_their_parameters():
    with pytest.raises(ValidationError):
        EsoReward(1.0, 1.0)
    with pytest.raises(ValidationError):
        PutReward(1.0, 0.9)
    g = EsoReward(1.2, 1.0)
    assert g.cash == pytest.approx(0.2)
    assert np.allclose(g.value([0.5, 1.2, 2.0]), [0.2, 0.2, 1.0])
    assert g.slope(1.2, -1) == 0.0 and g.slope(1.2, +1) == 1.0
    h = PutReward(1.0, 2.0)
    assert np.allclose(h.value([0.25, 1.5]), [0.75, 0.0])
    assert h.slope(1.0, -1) == -1.0 and h.slope(1.0, +1) == 0.0


def test_eso_generator_residual_pieces(gbm):
    g = EsoReward(1.2, 1.0)
    v = g.generator_residual(gbm, np.array([0.5, 2.0]))
    assert v[0] == pytest.approx(-0.05 * 0.2)
    assert v[1] == pytest.approx(0.05 - 0.03 * 2.0)


def test_gbm_passes_validation(gbm):
    rep = validate_assumptions(gbm)
    assert rep.ok
    assert rep.checks["theta_monotone"]["passed"]
    assert rep.checks["transversality"]["passed"]
    rep.raise_if_rejected()


def test_nonmonotone_theta_is_a_hard_rejection():
    spec = DiffusionSpec(Expression("0.1*x - 0.5*x^2"), Expression("0.3*x"), 0.05, 1e-4, 1e3)
    rep = validate_assumptions(spec, transversality=False)
    assert not rep.ok and not rep.checks["theta_monotone"]["passed"]
    with pytest.raises(ValidationError):
        rep.raise_if_rejected()


def test_negative_drift_at_zero_is_a_warning():
    spec = DiffusionSpec(Expression("-0.5"), Expression("0.4*x+0.1"), 0.05, 1e-4, 1e3)
    rep = validate_assumptions(spec, transversality=False)
    assert rep.ok
    assert not rep.checks["drift_near_zero"]["passed"]
    assert any("negative near 0" in w for w in rep.warnings)


def test_cev_and_cir_conventions_are_reported():
    cev = validate_assumptions(make_preset("CEV", {"b": 0.02, "v": 0.3, "beta": 0.8}, 0.05),
                               transversality=False)
    assert any("beta" in c for c in cev.conventions)
    assert any("natural" in w for w in cev.warnings)
    cir = validate_assumptions(make_preset("CIR", {"a": 1, "m": 1, "v": 1}, 0.05),
                               transversality=False)
    assert any("entrance" in w for w in cir.warnings)


def test_shifted_presets_stay_closed_form(gbm):
    s = gbm.shifted(drift_shift=0.01, vol_scale=2.0)
    assert s.is_gbm
    assert s.preset.get("b") == pytest.approx(0.03) and s.preset.get("v") == pytest.approx(0.6)
    assert gbm.shifted() is gbm


def test_shifted_custom_model_adds_linear_drift():
    spec = DiffusionSpec(Expression("0.01*x"), Expression("0.2*x"), 0.05, 1e-4, 1e3)
    s = spec.shifted(drift_shift=0.02, vol_scale=1.5)
    assert s.mu(2.0) == pytest.approx(0.06)
    assert s.sigma(2.0) == pytest.approx(0.6)


@settings(max_examples=40, deadline=None)
@given(b=st.floats(-0.2, 0.2), v=st.floats(0.05, 1.0), r=st.floats(0.01, 0.2))
def test_gbm_theta_is_monotone_for_any_parameters(b, v, r):
    spec = make_preset("GBM", {"b": b, "v": v}, r=r)
    rep = validate_assumptions(spec, grid_size=256, transversality=False)
    assert rep.checks["theta_monotone"]["passed"] == (r - b >= 0)


# ---- coefficient expressions
@pytest.mark.parametrize("src,x,expected", [
    ("0.1*x - 0.5*x^2", 2.0, -1.8),
    ("-x^2", 3.0, -9.0),
    ("2^3^2", 1.0, 512.0),
    ("x**2 + 1", 2.0, 5.0),
    ("sqrt(x) + exp(0) + log(e)", 4.0, 4.0),
    ("pi * x", 1.0, np.pi),
    ("(x + 1) / 2", 3.0, 2.0),
])
def test_expression_grammar_and_precedence(src, x, expected):
    assert float(Expression(src)(x)) == pytest.approx(expected)


@pytest.mark.parametrize("src", [
    "", "y + 1", "__import__('os')", "x if x else 1", "abs(x)", "x[0]", "x % 2",
    "sqrt(x, 2)", "x ^^ 2", "lambda: 1", "'a'", "True",
])
def test_expression_rejects_anything_outside_the_grammar(src):
    with pytest.raises(ConfigError):
        Expression(src)


def test_expression_is_vectorized_and_picklable():
    f = Expression("0.3*x")
    x = np.linspace(0.1, 2.0, 7)
    assert np.allclose(f(x), 0.3 * x)
    assert np.allclose(pickle.loads(pickle.dumps(f))(x), 0.3 * x)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), x=st.floats(0.01, 10))
def test_expression_matches_python_arithmetic(a, b, x):
    f = Expression(f"{a!r}*x + {b!r}*x^2")
    assert float(f(x)) == pytest.approx(a * x + b * x ** 2, rel=1e-12, abs=1e-12)
