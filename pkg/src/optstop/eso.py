"""Employee stock option with a minimum guarantee: g(x) = s + (x - l)^+.

The value is V = phi * W(F) where W is the smallest concave majorant of
G = (g/phi) o F^{-1}.  G is concave left of the payoff kink F(l), convex on
(F(l), F(x_g)) and concave beyond, so the majorant is either a double
tangent (two-sided stopping region) or a single tangent with slope L_inf
(one-sided, not attained).

Case labels:
    A1  L_inf <= G'(F(l)-)                        two-sided
    A2  L_inf >  G'(F(l)-), tail gap B(inf) > 0   two-sided
    A3  L_inf >  G'(F(l)-), B(inf) <= 0           one-sided, no optimal time
    Unbounded  L_inf = +inf                       V = +inf
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, NumericalFailure, QualityFailure
from .fundamentals import Numerics, solve_fundamental_pair
from .model import DiffusionSpec, EsoReward, validate_assumptions
from .transform import INF, TransformedGeometry, _root, build_geometry, tail_slope_ratio

TIE_TOL = 1e-10


@dataclass
class EsoSolution:
    case_label: str
    x1: Optional[float]
    x2: Optional[float]
    c1: Optional[float]
    c2: Optional[float]
    geometry: Optional[TransformedGeometry] = None
    stopping_region: str = ""
    optimal_rule: str = ""
    residuals: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def pair(self):
        return self.geometry.pair if self.geometry is not None else None

    @property
    def reward(self):
        return self.geometry.reward

    def value_of(self, x):
        return evaluate_value(self, x)

    def derivative(self, x, order=1):
        """V' or V'' (order 1, 2); one-sided conventions at x1, x2 follow the continuation piece."""
        x = np.asarray(x, dtype=float)
        p = self.pair
        cont = self.c1 * (p.dpsi(x) if order == 1 else p.d2psi(x)) + \
            self.c2 * (p.dphi(x) if order == 1 else p.d2phi(x))
        out = np.where(x < self.x1, 0.0, cont)
        if self.x2 is not None:
            out = np.where(x > self.x2, 1.0 if order == 1 else 0.0, out)
        return out

    def record(self):
        p = self.pair
        gam = p.gamma_estimates() if p is not None else None
        return {
            "case": self.case_label, "x1": self.x1, "x2": self.x2, "c1": self.c1, "c2": self.c2,
            "gamma0": gam[0] if gam else None, "gamma1": gam[1] if gam else None,
            "stopping_region": self.stopping_region, "optimal_rule": self.optimal_rule,
            "residuals": self.residuals, "margins": self.margins,
        }


def classify_case(geometry: TransformedGeometry):
    """Returns (label, info)."""
    rw, p = geometry.reward, geometry.pair
    L = geometry.L_inf
    if L == INF:
        return "Unbounded", {}
    left = float(geometry.slope_x(rw.guarantee, -1))
    info = {"L_inf": L, "left_slope_at_kink": left, "a1_margin": left - L}
    if L <= left + TIE_TOL:
        return "A1", info
    xL = _tangent_point_left(geometry, L)
    # tail gap of G over the tangent of slope L_inf at F(xL), over the top decade
    c1, c2 = L, float(rw.value(xL) / p.phi(xL) - L * p.F(xL))
    x = p.hi * 10.0 ** (-np.arange(15, -1, -1) / 15.0)
    B = geometry.ratio_x(x) - c1 * p.F(x) - c2
    dB = np.diff(B)
    tol = 1e-12 * np.max(np.abs(B))
    if not (np.all(dB >= -tol) or np.all(dB <= tol)):
        raise NumericalFailure("tail gap not monotone over the top decade; enlarge domain_hi",
                               gap=B.tolist())
    info.update({"z_L": float(p.F(xL)), "tail_gap_at_hi": float(B[-1])})
    return ("A2" if B[-1] > 0 else "A3"), info


def _tangent_point_left(geometry, slope):
    """x in (lo, l) where G'(F(x)) = slope on the concave left branch."""
    p, rw = geometry.pair, geometry.reward
    l = rw.guarantee

    def f(x):
        return float(geometry.slope_x(x, -1)) - slope

    if f(p.lo) <= 0:
        raise NumericalFailure("tangent point below domain_lo; lower domain_lo",
                               slope=slope, lo=p.lo)
    return _root(f, p.lo, l * (1 - 1e-14))


def _right_tangency(geometry, c1, x_g):
    """Point x* >= x_g where G'(F(x*)) = c1 on the concave branch; None if G' < c1 at x_g,
    'beyond' if G' > c1 all the way to domain_hi."""
    p = geometry.pair

    def f(x):
        return float(geometry.slope_x(x, +1)) - c1

    a = max(x_g, geometry.reward.guarantee * (1 + 1e-14))
    fa = f(a)
    if fa <= 0:
        return None
    if f(p.hi) > 0:
        return "beyond"
    return _root(f, a, p.hi)


def solve_two_sided(geometry: TransformedGeometry, xtol_rel=1e-14) -> EsoSolution:
    """Double tangent from the constructive parametrization: for each trial
    x_a on the concave left branch take the tangent at F(x_a) and measure
    how far G rises above it to the right of the kink.  That mismatch is
    monotone in x_a (negative near 0, positive at l-), and its root gives x1.
    """
    p, rw = geometry.pair, geometry.reward
    l, s = rw.guarantee, rw.cash
    x_g = geometry.x_g
    if x_g == INF:
        raise NumericalFailure("x_g is infinite: no concave right branch, two-sided solution impossible")
    if x_g >= p.hi:
        raise NumericalFailure("x_g beyond domain_hi; enlarge domain_hi", x_g=x_g)
    L_inf = geometry.L_inf

    def tangent(xa):
        c1 = float(geometry.slope_x(xa, -1))
        c2 = float((s - c1 * p.psi(xa)) / p.phi(xa))
        return c1, c2

    def gap(x, c1, c2):
        return float(geometry.ratio_x(x) - c1 * p.F(x) - c2)

    def mismatch(xa):
        c1, c2 = tangent(xa)
        xs = _right_tangency(geometry, c1, x_g)
        at_kink = gap(l, c1, c2)
        if xs is None:
            return at_kink, None
        if xs == "beyond":
            # G - tangent still rising at hi: its value there is a lower bound of the max
            m = max(at_kink, gap(p.hi, c1, c2))
            if m > 0:
                return m, None
            if c1 < L_inf:
                return math.inf, None
            raise NumericalFailure("right tangency beyond domain_hi; enlarge domain_hi",
                                   slope=c1, L_inf=L_inf)
        return max(at_kink, gap(xs, c1, c2)), xs

    a, b = p.lo, l * (1 - 1e-12)
    ma, _ = mismatch(a)
    if not ma < 0:
        if not p.flags.get("psi_decays_at_lo", True):
            raise NumericalFailure("double tangency not bracketed: psi does not vanish at 0, so "
                                   "0 is not a natural boundary and G' stays bounded there",
                                   mismatch=ma, psi_at_lo=float(p.psi(p.lo)))
        raise NumericalFailure("double tangency not bracketed at domain_lo; lower domain_lo",
                               mismatch=ma)
    mb, _ = mismatch(b)
    if not mb > 0:
        raise NumericalFailure("double tangency not bracketed at the kink", mismatch=mb)
    # bisection in log x: the mismatch may be +inf, so no secant steps
    la, lb = math.log(a), math.log(b)
    while lb - la > xtol_rel:
        lm = 0.5 * (la + lb)
        m, _ = mismatch(math.exp(lm))
        if m > 0:
            lb = lm
        else:
            la = lm
    x1 = math.exp(0.5 * (la + lb))
    c1t, _ = tangent(x1)
    x2 = _right_tangency(geometry, c1t, x_g)
    if not isinstance(x2, float):
        raise NumericalFailure("lost the right tangency at the converged x1", x1=x1)

    # coefficients from the two contact conditions
    g1, g2 = float(rw.value(x1)), float(rw.value(x2))
    ps1, ps2, ph1, ph2 = (float(p.psi(x1)), float(p.psi(x2)), float(p.phi(x1)), float(p.phi(x2)))
    det = ph1 * ps2 - ph2 * ps1
    c1 = (g2 * ph1 - g1 * ph2) / det
    c2 = (g1 * ps2 - g2 * ps1) / det

    sol = EsoSolution(
        case_label="", x1=x1, x2=x2, c1=c1, c2=c2, geometry=geometry,
        stopping_region=f"(0, {x1:.17g}] U [{x2:.17g}, inf)",
        optimal_rule="stop at the first exit of X from (x1, x2)",
    )
    z1, z2 = float(p.F(x1)), float(p.F(x2))
    G1, G2 = float(geometry.ratio_x(x1)), float(geometry.ratio_x(x2))
    chord = (G2 - G1) / (z2 - z1)
    sol.residuals["tangency_left"] = float(geometry.slope_x(x1, -1)) - chord
    sol.residuals["tangency_right"] = float(geometry.slope_x(x2, +1)) - chord
    _verify(sol)
    return sol


def solve_one_sided(geometry: TransformedGeometry) -> EsoSolution:
    """Tangent of slope L_inf touching G on the left branch only."""
    p, rw = geometry.pair, geometry.reward
    L = geometry.L_inf
    if not (L is not None and L != INF):
        raise NumericalFailure("one-sided solution needs a finite L_inf")
    x1 = _tangent_point_left(geometry, L)
    c1 = L
    c2 = float(rw.value(x1) / p.phi(x1) - L * p.F(x1))
    sol = EsoSolution(
        case_label="A3", x1=x1, x2=None, c1=c1, c2=c2, geometry=geometry,
        stopping_region=f"(0, {x1:.17g}]",
        optimal_rule="no optimal stopping time attained; stopping at x1 or a high "
                     "level M is epsilon-optimal as M grows",
    )
    # (g/phi)'(x1) - L_inf F'(x1), normalized by the slope scale
    gphi_d = -rw.cash * p.dphi(x1) / p.phi(x1) ** 2
    sol.residuals["one_sided_tangency"] = float((gphi_d - L * p.dF(x1)) / (L * p.dF(x1)))
    _verify(sol)
    return sol


def evaluate_value(sol: EsoSolution, x):
    x = np.asarray(x, dtype=float)
    if sol.case_label == "Unbounded":
        return np.full_like(x, np.inf)
    p = sol.pair
    if np.any(x < p.lo * (1 - 1e-12)) or np.any(x > p.hi * (1 + 1e-12)):
        raise DomainError("value requested outside the domain", lo=p.lo, hi=p.hi)
    rw = sol.reward
    xc = np.clip(x, p.lo, p.hi)
    cont = sol.c1 * p.psi(xc) + sol.c2 * p.phi(xc)
    out = np.where(x <= sol.x1, rw.cash, cont)
    if sol.x2 is not None:
        out = np.where(x >= sol.x2, x - rw.strike, out)
    return out


def _verify(sol: EsoSolution):
    p, rw = sol.pair, sol.reward
    l = rw.guarantee
    if not (0 < sol.x1 < l):
        raise QualityFailure("x1 not inside (0, l)", x1=sol.x1)
    if sol.x2 is not None and not (l <= sol.geometry.x_g < sol.x2):
        raise QualityFailure("x2 not beyond x_g", x2=sol.x2, x_g=sol.geometry.x_g)
    # majorant: V >= g on a dense grid
    x = np.geomspace(p.lo, p.hi, 4001)
    V = evaluate_value(sol, x)
    g = rw.value(x)
    worst = float(np.min((V - g) / np.maximum(g, 1e-300)))
    sol.residuals["majorant_min_rel"] = worst
    if worst < -1e-9:
        raise QualityFailure("value function dips below the reward", worst=worst)


def smooth_fit_report(sol: EsoSolution, geometry: TransformedGeometry = None, n=2001):
    geometry = geometry or sol.geometry
    p, rw, spec = sol.pair, sol.reward, sol.pair.spec
    x1, x2 = sol.x1, sol.x2
    rep = {}
    d1 = sol.c1 * p.dpsi(x1) + sol.c2 * p.dphi(x1)
    rep["smooth_fit_x1"] = float(abs(d1 - 0.0))
    d2c = float(sol.c1 * p.d2psi(x1) + sol.c2 * p.d2phi(x1))
    rep["second_jump_x1"] = d2c - 0.0                 # V''(x1+) - V''(x1-)
    if x2 is not None:
        d1b = sol.c1 * p.dpsi(x2) + sol.c2 * p.dphi(x2)
        rep["smooth_fit_x2"] = float(abs(d1b - 1.0))
        rep["second_jump_x2"] = 0.0 - float(sol.c1 * p.d2psi(x2) + sol.c2 * p.d2phi(x2))
    # variational inequality min{(r - L)V, V - g} >= 0 on a dense grid
    x = np.geomspace(p.lo, p.hi, n)
    x = x[(np.abs(x - x1) > 1e-9 * x1) & (np.abs(x - rw.guarantee) > 1e-9)]
    if x2 is not None:
        x = x[np.abs(x - x2) > 1e-9 * x2]
    V = evaluate_value(sol, x)
    dV, d2V = sol.derivative(x, 1), sol.derivative(x, 2)
    gen = -spec.generator_residual(V, dV, d2V, x)            # (r - L)V
    sig = spec.sigma(x)
    size = np.abs(0.5 * sig * sig * d2V) + np.abs(spec.mu(x) * dV) + spec.r * np.abs(V)
    cont = (x > x1) if x2 is None else ((x > x1) & (x < x2))
    rep["continuation_residual_rel"] = float(np.max(np.abs(gen[cont]) / size[cont]))
    rep["min_r_minus_L_V_rel"] = float(np.min(gen / size))
    rep["min_V_minus_g"] = float(np.min(V - rw.value(x)))
    return rep


def solve_geometry(geometry: TransformedGeometry) -> EsoSolution:
    label, info = classify_case(geometry)
    if label == "Unbounded":
        sol = EsoSolution("Unbounded", None, None, None, None, geometry=geometry,
                          stopping_region="empty", optimal_rule="never stop: V = +inf")
        sol.margins.update(info)
        return sol
    sol = solve_one_sided(geometry) if label == "A3" else solve_two_sided(geometry)
    sol.case_label = label
    sol.margins.update(info)
    return sol


def solve_eso(spec: DiffusionSpec, reward: EsoReward, numerics: Numerics = None,
              validate: bool = True) -> EsoSolution:
    """Validation, fundamental pair, geometry, classification and solve.

    If the model fails the theta check but L_inf = +inf the answer is still
    Unbounded: V >= g(k) psi(x)/psi(k) for every k, which tends to +inf
    whenever g/psi does, with or without monotone theta.
    """
    num = numerics or Numerics()
    report = validate_assumptions(spec, transversality=False) if validate else None
    if report is not None and not report.ok:
        # the rejection stands unless the tail ratio proves V = +inf
        try:
            pair = solve_fundamental_pair(spec, numerics=num.replace(strict=False))
            L, _ = tail_slope_ratio(pair, reward)
        except (NumericalFailure, DomainError):
            L = None
        if L != INF:
            report.raise_if_rejected()
        sol = EsoSolution("Unbounded", None, None, None, None, geometry=None,
                          stopping_region="empty", optimal_rule="never stop: V = +inf")
        sol.warnings.append("model fails the theta monotonicity check; "
                            "value is +inf regardless")
        sol.margins["L_inf"] = INF
        return sol
    pair = solve_fundamental_pair(spec, numerics=num)
    geo = build_geometry(pair, reward)
    sol = solve_geometry(geo)
    if report is not None:
        sol.warnings.extend(report.warnings)
    sol.warnings.extend(pair.warnings)
    return sol
