"""The transform y = F(x) = psi(x)/phi(x) and the transformed rewards.

For a reward g, G(y) = (g/phi)(F^{-1}(y)).  Its derivatives are never
differenced numerically; they come from the identities

    G'(F(x))  = W(g, phi)(x) / W(psi, phi),   W(g, phi) = (phi g' - g phi') / S'
    G''(F(x)) = 2 (L - r)g(x) / (sigma^2(x) phi(x) F'(x)^2)

evaluated in x-space.  The same holds for the put reward h and H.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import NumericalFailure, PreconditionError, QualityFailure
from .fundamentals import FundamentalPair, check_convexity
from .model import EsoReward, PutReward

INF = math.inf          # sentinel for x_g = +inf and L_inf = +inf


def _root(f, a, b, xtol_rel=1e-14):
    """Bracketing root in log x (derivative-free, kink safe)."""
    fa, fb = f(a), f(b)
    if fa == 0:
        return a
    if fb == 0:
        return b
    if np.sign(fa) == np.sign(fb):
        raise NumericalFailure("root not bracketed", a=a, b=b, fa=float(fa), fb=float(fb))
    u = brentq(lambda s: f(math.exp(s)), math.log(a), math.log(b),
               xtol=xtol_rel, rtol=4 * np.finfo(float).eps, maxiter=500)
    return math.exp(u)


@dataclass
class TransformedGeometry:
    pair: FundamentalPair
    reward: object
    reward_kind: str                     # "Eso" | "Put"
    kink_y: float
    convexity: dict
    L_inf: Optional[float] = None        # ESO
    x_g: Optional[float] = None          # ESO; INF when (L-r)g > 0 on (l, inf)
    x_theta: Optional[float] = None      # put, when mu(q-) < 0
    x_h: Optional[float] = None          # put argmax of H, in x
    y_h: Optional[float] = None
    y_H: Optional[float] = None
    F_d: Optional[float] = None          # put with barrier
    notes: dict = field(default_factory=dict)

    # ---- reward in x-space
    def g(self, x):
        return self.reward.value(x)

    def g_slope(self, x, side=-1):
        return self.reward.slope(x, side)

    def gen_residual(self, x):
        """(L - r) applied to the reward, away from its kink."""
        return self.reward.generator_residual(self.pair.spec, x)

    # ---- maps
    def F_of(self, x):
        return self.pair.F(x)

    def F_inv(self, y):
        return self.pair.F_inv(y)

    # ---- transformed reward and derivatives, x-parametrized
    def ratio_x(self, x):
        """(g/phi)(x) == G(F(x))."""
        return self.g(x) * np.exp(-self.pair.log_phi(x))

    def slope_x(self, x, side=-1):
        """W(g, phi)(x)/W(psi, phi) == G'(F(x)); side picks the one-sided slope at a kink."""
        p = self.pair
        x = np.asarray(x, dtype=float)
        g, dg = self.g(x), self.g_slope(x, side)
        scale = np.exp(p.log_phi(x) - p.log_dscale(x))
        return scale * (dg - g * p.omega_phi(x) / x) / p.wronskian

    def curvature_x(self, x):
        """2 (L - r)g / (sigma^2 phi F'^2) == G''(F(x))."""
        p = self.pair
        x = np.asarray(x, dtype=float)
        sig = p.spec.sigma(x)
        # phi F'^2 = W^2 S'^2 / phi^3
        lf, ls = p.log_phi(x), p.log_dscale(x)
        with np.errstate(over="ignore"):
            return 2.0 * self.gen_residual(x) * np.exp(3 * lf - 2 * ls) / (sig * sig * p.wronskian ** 2)

    # ---- y-space evaluators (pullback through F^-1)
    def value_y(self, y):
        return self.ratio_x(self.F_inv(y))

    def slope_y(self, y, side=-1):
        return self.slope_x(self.F_inv(y), side)

    def curvature_y(self, y):
        return self.curvature_x(self.F_inv(y))

    # reward-specific aliases
    G_of = H_of = value_y
    dG = dH = slope_y
    d2G = d2H = curvature_y

    @property
    def kink_jump(self):
        """G'(F(k)+) - G'(F(k)-) at the payoff kink k."""
        k = self.reward.guarantee if self.reward_kind == "Eso" else self.reward.strike
        return float(self.slope_x(k, +1) - self.slope_x(k, -1))

    def table(self, n=512):
        """Samples (y, G, dG, d2G) on a log grid inside the domain."""
        p = self.pair
        x = np.geomspace(p.lo, p.hi, n)
        return {"x": x, "y": p.F(x), "value": self.ratio_x(x),
                "slope": self.slope_x(x), "curvature": self.curvature_x(x)}


def _require_convex(pair, which):
    flags = check_convexity(pair)
    if not flags[which]:
        raise PreconditionError(f"{which.split('_')[0]} is not convex on the grid; "
                                "the concave-majorant construction does not apply", flags=flags)
    return flags


def tail_slope_ratio(pair: FundamentalPair, reward: EsoReward, nodes: int = 16):
    """L_inf = lim g'/psi' via geometric-tail (Aitken) extrapolation over the last decade.

    Returns INF when the increments of the ratio do not contract.
    """
    hi = pair.hi
    x = hi * 10.0 ** (-np.arange(nodes - 1, -1, -1) / (nodes - 1))
    if x[0] <= reward.guarantee:
        raise NumericalFailure("domain_hi too small to extrapolate the tail ratio",
                               domain_hi=hi, l=reward.guarantee)
    with np.errstate(over="ignore"):
        R = reward.slope(x, +1) / pair.dpsi(x)
    dR = np.diff(R)
    scale = np.max(np.abs(R))
    tol = 1e-10 * scale
    if not (np.all(dR >= -tol) or np.all(dR <= tol)):
        raise NumericalFailure("tail ratio g'/psi' is not monotone over the last decade",
                               ratios=R.tolist())
    R0, R1, R2 = R[0], R[(nodes - 1) // 2], R[-1]
    d1, d2 = R1 - R0, R2 - R1
    if abs(d2) <= 1e-12 * max(abs(R2), 1e-300):
        return float(max(R2, 0.0)), {"ratios": R.tolist(), "method": "flat"}
    if d2 > 0 and d2 >= d1 * (1.0 - 1e-9):
        return INF, {"ratios": R.tolist(), "method": "growing"}
    rho = d2 / d1
    if not (0 < rho < 1):
        raise NumericalFailure("tail ratio increments are not geometric", rho=float(rho))
    L = R2 + d2 * rho / (1.0 - rho)
    return float(max(L, 0.0)), {"ratios": R.tolist(), "method": "aitken", "rho": float(rho)}


def limit_at_infinity(geometry: TransformedGeometry):
    L, info = tail_slope_ratio(geometry.pair, geometry.reward)
    geometry.notes["L_inf"] = info
    return L


def locate_x_g(geometry: TransformedGeometry):
    """Right end of the set where (L - r)g = rK - theta(x) >= 0 on (l, .)."""
    p, rw = geometry.pair, geometry.reward

    def f(x):
        return float(rw.generator_residual(p.spec, np.array([x]))[0])

    l, hi = rw.guarantee, p.hi
    # (L - r)g just right of the kink
    right_of_l = l * (1 + 1e-12)
    if f(right_of_l) <= 0:
        return l
    if f(hi) >= 0:
        return INF
    x = _root(f, right_of_l, hi)
    # move to the right end of a possible flat zero stretch
    step = x * 1e-12
    while f(x + step) >= 0 and x + step < hi:
        x += step
        step *= 2
    return x


def locate_put_landmarks(geometry: TransformedGeometry):
    p, rw = geometry.pair, geometry.reward
    q, r = rw.strike, p.spec.discount_rate
    lo = p.lo
    if q <= lo:
        raise NumericalFailure("strike below domain_lo", q=q, lo=lo)

    def Qs(x):
        # Q/phi with Q = phi h' - h phi', h = q - x on (0, q)
        return float(-1.0 - (q - x) * p.omega_phi(x) / x)

    def excess(x):
        return float(p.spec.theta(np.array([x]))[0] - r * q)

    # checked first: a negative drift at 0 also breaks the Q bracket below
    if excess(lo) > 0:
        raise PreconditionError("theta - rq > 0 already at domain_lo: H has no concave part. "
                                "This contradicts liminf mu(x) >= 0 at 0",
                                theta_minus_rq=excess(lo))
    if not Qs(lo) > 0:
        raise NumericalFailure("argmax of H not bracketed; lower domain_lo", lo=lo)
    x_h = _root(Qs, lo, q)

    x_theta = None
    x_H = q
    if excess(q * (1 - 1e-12)) > 0:
        x_theta = _root(excess, lo, q * (1 - 1e-12))
        x_H = x_theta
    y_h, y_H = float(p.F(x_h)), float(p.F(x_H))
    if not y_h < y_H:
        raise QualityFailure("landmark order y_h < y_H violated", y_h=y_h, y_H=y_H)
    return {"x_h": x_h, "y_h": y_h, "y_H": y_H, "x_theta": x_theta, "x_H": x_H}


def build_geometry(pair: FundamentalPair, reward) -> TransformedGeometry:
    if isinstance(reward, EsoReward):
        flags = _require_convex(pair, "psi_convex")
        l = reward.guarantee
        if not pair.lo < l < pair.hi:
            raise NumericalFailure("guarantee l outside the domain", l=l)
        geo = TransformedGeometry(pair, reward, "Eso", float(pair.F(l)), flags)
        geo.L_inf = limit_at_infinity(geo)
        geo.x_g = locate_x_g(geo)
        return geo
    if isinstance(reward, PutReward):
        flags = _require_convex(pair, "phi_convex")
        geo = TransformedGeometry(pair, reward, "Put", float(pair.F(reward.strike)), flags)
        if reward.barrier is not None:
            if not reward.barrier < pair.hi:
                raise NumericalFailure("barrier d must lie inside the domain", d=reward.barrier)
            geo.F_d = float(pair.F(reward.barrier))
        lm = locate_put_landmarks(geo)
        geo.x_h, geo.y_h, geo.y_H, geo.x_theta = lm["x_h"], lm["y_h"], lm["y_H"], lm["x_theta"]
        geo.notes["x_H"] = lm["x_H"]
        return geo
    raise TypeError(f"unsupported reward {type(reward).__name__}")
