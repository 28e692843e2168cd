import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from optstop import (INF, DiffusionSpec, EsoReward, PreconditionError, PutReward,
                     build_geometry, make_preset, solve_fundamental_pair)
from optstop import transform
from optstop.expr import Expression


@pytest.fixture(scope="module")
def eso_geo(gbm_pair, eso_reward):
    return build_geometry(gbm_pair, eso_reward)


@pytest.fixture(scope="module")
def put_geo(gbm_pair, put_barrier):
    return build_geometry(gbm_pair, put_barrier)


def _gbm_geo(b, reward, v=0.3, r=0.05):
    return build_geometry(solve_fundamental_pair(make_preset("GBM", {"b": b, "v": v}, r)), reward)


def test_x_g_is_where_the_drift_term_changes_sign(eso_geo):
    # rK - theta(x) = 0.05 - 0.03 x
    assert eso_geo.x_g == pytest.approx(5.0 / 3.0, rel=1e-12)
    assert eso_geo.L_inf == pytest.approx(0.0, abs=1e-12)


def test_x_g_infinite_when_drift_equals_rate(eso_reward):
    geo = _gbm_geo(0.05, eso_reward)
    assert geo.x_g == INF
    # mu = r gives gamma0 = 1, so psi = x/x_c and g'/psi' is the anchor itself
    assert geo.L_inf == pytest.approx(geo.pair.anchor, rel=1e-9)


def test_tail_ratio_grows_when_drift_exceeds_rate(eso_reward):
    pair = solve_fundamental_pair(make_preset("GBM", {"b": 0.06, "v": 0.3}, 0.05))
    L, info = transform.tail_slope_ratio(pair, eso_reward)
    assert L == INF and info["method"] == "growing"
    # psi is concave here, so the majorant geometry itself is refused
    with pytest.raises(PreconditionError):
        build_geometry(pair, eso_reward)


def test_x_g_at_l_when_the_drift_term_is_already_negative():
    # theta(l) = 0.05 * 1.2 > rK = 0.05
    geo = _gbm_geo(0.0, EsoReward(1.2, 1.0))
    assert geo.x_g == 1.2
    x = np.geomspace(1.2 * 1.001, 100.0, 50)
    assert np.all(geo.curvature_x(x) < 0)


def test_kink_jump_matches_its_closed_form(eso_geo):
    p, l = eso_geo.pair, 1.2
    expected = float(p.phi(l) / (p.dscale(l) * p.wronskian))
    assert eso_geo.kink_jump == pytest.approx(expected, rel=1e-12)
    assert eso_geo.kink_jump > 0


def test_transformed_reward_vanishes_at_zero_and_is_increasing(eso_geo):
    p = eso_geo.pair
    x = p.grid[::8]
    G = eso_geo.ratio_x(x)
    assert np.all(np.diff(G) > 0)
    assert G[0] < 1e-2 * G[len(G) // 2]
    inv_slope = 1.0 / eso_geo.slope_x(p.grid[:20])
    assert np.all(np.diff(inv_slope) > 0) and inv_slope[0] < 1e-3


def test_transformed_reward_concave_below_the_guarantee(eso_geo):
    x = np.geomspace(1e-3, 1.19, 60)
    assert np.all(eso_geo.curvature_x(x) < 0)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(-3.0, 2.5))
def test_curvature_sign_follows_the_generator(eso_geo, u):
    x = 10.0 ** u
    assume(abs(x - 1.2) > 1e-6 and abs(x - 5.0 / 3.0) > 1e-6)
    c = float(eso_geo.curvature_x(x))
    assert np.sign(c) == np.sign(float(eso_geo.gen_residual(x)))


def _fd_checks(geo, xs, skip):
    p = geo.pair
    worst1 = worst2 = 0.0
    for x in xs:
        if any(abs(np.log(x / s)) < 0.02 for s in skip):
            continue
        y = float(p.F(x))
        h1, h2 = 1e-5 * y, 2e-4 * y
        G = lambda y_: float(geo.value_y(y_))
        d1 = (G(y + h1) - G(y - h1)) / (2 * h1)
        d2 = (G(y + h2) - 2 * G(y) + G(y - h2)) / (h2 * h2)
        a1, a2 = float(geo.slope_y(y)), float(geo.curvature_y(y))
        worst1 = max(worst1, abs(d1 - a1) / abs(a1))
        worst2 = max(worst2, abs(d2 - a2) / abs(a2))
    return worst1, worst2


def test_slope_and_curvature_match_finite_differences(eso_geo, rng):
    xs = np.exp(rng.uniform(np.log(0.05), np.log(20.0), 100))
    w1, w2 = _fd_checks(eso_geo, xs, skip=(1.2, 5.0 / 3.0))
    assert w1 <= 1e-6 and w2 <= 1e-4


def test_put_landmarks_without_negative_drift(put_geo):
    p = put_geo.pair
    assert put_geo.x_theta is None
    assert put_geo.y_H == pytest.approx(float(p.F(1.0)), rel=1e-14)
    assert put_geo.y_h < put_geo.y_H
    # H'(y_h) = 0
    assert abs(float(put_geo.slope_x(put_geo.x_h))) <= 1e-8
    assert put_geo.F_d == pytest.approx(float(p.F(2.0)))


def test_put_transformed_reward_shape(put_geo):
    p = put_geo.pair
    x = np.geomspace(p.lo, 1.0, 400)[1:-1]
    H = put_geo.ratio_x(x)
    assert np.all(H > 0)
    assert put_geo.ratio_x(p.lo) < 1e-2 * H.max()
    assert np.all(np.diff(H[:50]) > 0)
    assert float(put_geo.ratio_x(1.0)) == 0.0
    assert np.all(put_geo.curvature_x(x) < 0)


def test_put_landmarks_when_drift_turns_negative_below_strike():
    # theta = 0.1 x^2 crosses rq = 0.05 at sqrt(0.5)
    spec = DiffusionSpec(Expression("0.05*x - 0.1*x^2"), Expression("0.3*x"), 0.05, 1e-4, 1e3)
    geo = build_geometry(solve_fundamental_pair(spec), PutReward(1.0, 2.0))
    assert geo.x_theta == pytest.approx(np.sqrt(0.5), rel=1e-10)
    assert geo.y_H == pytest.approx(float(geo.pair.F(geo.x_theta)), rel=1e-12)
    assert geo.y_h < geo.y_H
    x = np.linspace(geo.x_theta * 1.01, 0.99, 20)
    assert np.all(geo.curvature_x(x) > 0)


def test_negative_drift_at_zero_is_rejected_before_solving():
    spec = DiffusionSpec(Expression("-0.5"), Expression("0.4*x+0.1"), 0.05, 1e-4, 1e3)
    pair = solve_fundamental_pair(spec)
    with pytest.raises(PreconditionError):
        build_geometry(pair, PutReward(1.0))


def test_nonconvex_pair_is_a_precondition_error(gbm_pair, eso_reward, monkeypatch):
    monkeypatch.setattr(transform, "check_convexity",
                        lambda pair: {"psi_convex": False, "phi_convex": True})
    with pytest.raises(PreconditionError):
        build_geometry(gbm_pair, eso_reward)
    monkeypatch.setattr(transform, "check_convexity",
                        lambda pair: {"psi_convex": True, "phi_convex": False})
    with pytest.raises(PreconditionError):
        build_geometry(gbm_pair, PutReward(1.0))


def test_geometry_table_shapes(eso_geo):
    t = eso_geo.table(64)
    assert set(t) == {"x", "y", "value", "slope", "curvature"}
    assert all(len(v) == 64 for v in t.values())
