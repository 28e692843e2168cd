import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optstop import (INF, DomainError, EsoReward, ValidationError, make_preset,
                     smooth_fit_report, solve_eso)
from optstop.expr import Expression
from optstop.model import DiffusionSpec

GAMMA0 = 1.3678564927971435
GAMMA1 = -0.8123009372415881
# thresholds from an independent root solve of the four raw power-function
# contact equations, eliminating x1 in closed form (brentq on x2)
X1 = 0.2692042313222889
X2 = 3.804953918329179


def raw_contact_residuals(sol, s=0.2, K=1.0):
    xc = sol.pair.anchor
    a, b = sol.c1 / xc ** GAMMA0, sol.c2 / xc ** GAMMA1
    x1, x2 = sol.x1, sol.x2
    return np.array([
        (a * x1 ** GAMMA0 + b * x1 ** GAMMA1 - s) / s,
        GAMMA0 * a * x1 ** (GAMMA0 - 1) + GAMMA1 * b * x1 ** (GAMMA1 - 1),
        (a * x2 ** GAMMA0 + b * x2 ** GAMMA1 - (x2 - K)) / (x2 - K),
        GAMMA0 * a * x2 ** (GAMMA0 - 1) + GAMMA1 * b * x2 ** (GAMMA1 - 1) - 1.0,
    ])


@pytest.fixture(scope="module")
def a1(gbm, eso_reward):
    return solve_eso(gbm, eso_reward)


@pytest.fixture(scope="module")
def a3(eso_reward):
    return solve_eso(make_preset("GBM", {"b": 0.05, "v": 0.3}, 0.05), eso_reward)


def test_two_sided_case_thresholds(a1):
    assert a1.case_label == "A1"
    assert a1.x1 == pytest.approx(X1, rel=1e-9)
    assert a1.x2 == pytest.approx(X2, rel=1e-9)
    assert a1.c1 > 0 and a1.c2 > 0
    assert np.max(np.abs(raw_contact_residuals(a1))) <= 1e-8


def test_two_sided_value_and_regions(a1):
    assert float(a1.value_of(a1.x1)) == pytest.approx(0.2, rel=1e-12)
    assert float(a1.value_of(a1.x2)) == pytest.approx(a1.x2 - 1.0, rel=1e-12)
    x = np.geomspace(a1.pair.lo, a1.pair.hi, 3000)
    V, g = a1.value_of(x), a1.reward.value(x)
    assert np.all(V >= g - 1e-12)
    assert np.all(np.diff(V) >= -1e-12)
    inside = (x > a1.x1) & (x < a1.x2)
    assert np.all(V[inside] > g[inside])
    assert np.all(a1.derivative(x[inside], 2) > 0)
    assert "U" in a1.stopping_region


def test_smooth_fit_and_second_derivative_jumps(a1):
    rep = smooth_fit_report(a1)
    assert rep["smooth_fit_x1"] <= 1e-7 and rep["smooth_fit_x2"] <= 1e-7
    assert rep["second_jump_x1"] > 0
    assert rep["second_jump_x2"] < 0
    assert rep["continuation_residual_rel"] <= 1e-7
    assert rep["min_r_minus_L_V_rel"] >= -1e-9
    assert rep["min_V_minus_g"] >= -1e-12


def test_numeric_pair_gives_the_same_thresholds(gbm, eso_reward, a1):
    from optstop import Numerics
    sol = solve_eso(gbm, eso_reward, Numerics(method="numeric"))
    assert sol.case_label == "A1"
    assert sol.x1 == pytest.approx(a1.x1, rel=1e-8)
    assert sol.x2 == pytest.approx(a1.x2, rel=1e-8)


def test_one_sided_case_when_drift_equals_rate(a3):
    # closed form of the tangent from the left: x1 = s gamma1 / (gamma1 - 1) with gamma0 = 1
    g1 = -0.05 / 0.045
    assert a3.case_label == "A3"
    assert a3.x1 == pytest.approx(0.2 * g1 / (g1 - 1.0), rel=1e-9)
    assert a3.x1 == pytest.approx(0.10526315789473688, rel=1e-9)
    assert a3.x2 is None
    assert a3.c1 == pytest.approx(a3.geometry.L_inf, rel=1e-12)
    assert abs(a3.residuals["one_sided_tangency"]) <= 1e-8
    x = np.geomspace(a3.x1 * 1.01, a3.pair.hi, 500)
    assert np.all(a3.value_of(x) > a3.reward.value(x))
    assert "epsilon-optimal" in a3.optimal_rule


def test_unbounded_when_drift_exceeds_rate(eso_reward):
    sol = solve_eso(make_preset("GBM", {"b": 0.06, "v": 0.3}, 0.05), eso_reward)
    assert sol.case_label == "Unbounded"
    assert sol.margins["L_inf"] == INF
    assert np.all(np.isinf(sol.value_of(np.array([0.5, 2.0]))))
    assert sol.record()["x1"] is None


def test_nonmonotone_theta_is_rejected_when_value_is_finite(eso_reward):
    spec = DiffusionSpec(Expression("0.1*x - 0.5*x^2"), Expression("0.3*x"), 0.05, 1e-4, 1e3)
    with pytest.raises(ValidationError):
        solve_eso(spec, eso_reward)


def test_value_outside_domain_raises(a1):
    with pytest.raises(DomainError):
        a1.value_of(1e-7)


def test_record_fields(a1):
    rec = a1.record()
    assert rec["case"] == "A1"
    assert rec["gamma0"] == pytest.approx(GAMMA0) and rec["gamma1"] == pytest.approx(GAMMA1)
    assert set(rec) >= {"x1", "x2", "c1", "c2", "stopping_region", "optimal_rule",
                        "residuals", "margins"}


@settings(max_examples=12, deadline=None)
@given(b=st.floats(-0.05, 0.04), v=st.floats(0.15, 0.6), K=st.floats(0.5, 1.1))
def test_threshold_ordering_holds_across_gbm_models(b, v, K):
    sol = solve_eso(make_preset("GBM", {"b": b, "v": v}, 0.05), EsoReward(1.2, K))
    assert sol.case_label == "A1"
    x_g = sol.geometry.x_g
    assert 0 < sol.x1 < 1.2 <= x_g < sol.x2
    rep = smooth_fit_report(sol)
    assert rep["smooth_fit_x1"] <= 1e-7 and rep["smooth_fit_x2"] <= 1e-7


@pytest.mark.slow
def test_cev_high_elasticity_is_the_tangent_at_infinity_case():
    cev = make_preset("CEV", {"b": 0.02, "v": 0.3, "beta": 1.5}, 0.05)
    sol = solve_eso(cev, EsoReward(1.2, 1.0))
    assert sol.case_label == "A2"
    assert 0 < sol.x1 < 1.2 <= sol.geometry.x_g < sol.x2
    assert 0 < sol.geometry.L_inf < INF
    assert sol.margins["tail_gap_at_hi"] > 0
    rep = smooth_fit_report(sol)
    assert rep["smooth_fit_x1"] <= 1e-7 and rep["smooth_fit_x2"] <= 1e-7
    assert rep["second_jump_x1"] > 0 and rep["second_jump_x2"] < 0
