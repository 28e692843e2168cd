"""American put with an up-and-out barrier d, and the perpetual put.

With h(x) = (q - x)^+ and H = (h/phi) o F^{-1}, the smallest nonnegative
concave majorant of H on [0, F(d)] is H itself up to a tangency z0 and the
chord from (z0, H(z0)) to (F(d), 0) beyond it.  Back in x:

    V(x) = q - x                                                    x <= x0
    V(x) = (q - x0) (phi(x) F(d) - psi(x)) / (phi(x0) F(d) - psi(x0))   x0 < x < d

and V = 0 from d on.  Without a barrier the chord flattens to the level
H(z0) and x0 is the maximizer of H.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, NumericalFailure, QualityFailure
from .fundamentals import Numerics, solve_fundamental_pair
from .model import DiffusionSpec, PutReward, validate_assumptions
from .transform import TransformedGeometry, _root, build_geometry


@dataclass
class BarrierPutSolution:
    x0: float
    z0: float
    has_barrier: bool
    d: Optional[float]
    geometry: TransformedGeometry
    residuals: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def pair(self):
        return self.geometry.pair

    @property
    def strike(self):
        return self.geometry.reward.strike

    @property
    def stopping_region(self):
        return f"(0, {self.x0:.17g}]"

    def _cont_coeffs(self):
        """V = a*psi + b*phi on the continuation region."""
        p, x0, q = self.pair, self.x0, self.strike
        if self.has_barrier:
            Fd = self.geometry.F_d
            den = float(p.phi(x0)) * Fd - float(p.psi(x0))
            return -(q - x0) / den, (q - x0) * Fd / den
        return 0.0, (q - x0) / float(p.phi(x0))

    def value_of(self, x):
        x = np.asarray(x, dtype=float)
        p = self.pair
        if np.any(x < p.lo * (1 - 1e-12)) or np.any(x > p.hi * (1 + 1e-12)):
            raise DomainError("value requested outside the domain", lo=p.lo, hi=p.hi)
        xc = np.clip(x, p.lo, p.hi)
        a, b = self._cont_coeffs()
        with np.errstate(over="ignore", invalid="ignore"):
            cont = a * p.psi(xc) + b * p.phi(xc) if a != 0.0 else b * p.phi(xc)
        out = np.where(x <= self.x0, self.strike - x, cont)
        if self.has_barrier:
            out = np.where(x >= self.d, 0.0, out)
        return out

    def derivative(self, x, order=1):
        x = np.asarray(x, dtype=float)
        p = self.pair
        a, b = self._cont_coeffs()
        if order == 1:
            cont = a * p.dpsi(x) + b * p.dphi(x)
            below = -1.0
        else:
            cont = a * p.d2psi(x) + b * p.d2phi(x)
            below = 0.0
        out = np.where(x <= self.x0, below, cont)
        if self.has_barrier:
            out = np.where(x >= self.d, 0.0, out)
        return out

    def record(self):
        return {"x0": self.x0, "z0": self.z0, "d": self.d, "has_barrier": self.has_barrier,
                "stopping_region": self.stopping_region, "residuals": self.residuals}


def solve_z0(geometry: TransformedGeometry) -> float:
    """Tangency H'(z)(F(d) - z) + H(z) = 0 on [y_h, y_H]; returns z0 (x0 in geometry.notes)."""
    p = geometry.pair
    if geometry.F_d is None:
        raise NumericalFailure("solve_z0 needs a barrier")
    Fd = geometry.F_d
    x_lo, x_hi = geometry.x_h, geometry.notes["x_H"]

    def R(x):
        return float(geometry.slope_x(x, -1) * (Fd - p.F(x)) + geometry.ratio_x(x))

    ra, rb = R(x_lo), R(x_hi * (1 - 1e-14))
    if not (ra > 0 > rb):
        raise NumericalFailure("tangency equation has no sign change on [y_h, y_H]",
                               at_y_h=ra, at_y_H=rb)
    x0 = _root(R, x_lo, x_hi * (1 - 1e-14), xtol_rel=1e-15)
    z0 = float(p.F(x0))
    # scale by the sizes of the terms inside the slope, which cancel near y_h
    h, dh = geometry.g(x0), geometry.g_slope(x0, -1)
    slope_mag = float(np.exp(p.log_phi(x0) - p.log_dscale(x0)) / p.wronskian
                      * (abs(dh) + abs(h * p.omega_phi(x0) / x0)))
    scale = slope_mag * abs(Fd - float(p.F(x0))) + abs(float(geometry.ratio_x(x0)))
    geometry.notes["x0"] = x0
    geometry.notes["tangency_residual"] = abs(R(x0)) / scale
    if geometry.notes["tangency_residual"] > 1e-10:
        raise NumericalFailure("tangency residual above 1e-10",
                               residual=geometry.notes["tangency_residual"])
    return z0


def _check(sol: BarrierPutSolution, n=4001):
    p, q, x0 = sol.pair, sol.strike, sol.x0
    if not (0 < x0 < q):
        raise QualityFailure("x0 outside (0, q)", x0=x0)
    top = sol.d if sol.has_barrier else p.hi
    x = np.geomspace(p.lo, top, n)[:-1]
    V = sol.value_of(x)
    h = np.maximum(q - x, 0.0)
    sol.residuals["majorant_min"] = float(np.min(V - h))
    if sol.residuals["majorant_min"] < -1e-10:
        raise QualityFailure("value below the payoff", worst=sol.residuals["majorant_min"])
    dV = np.diff(V)
    sol.residuals["max_increase"] = float(max(np.max(dV), 0.0))
    if sol.residuals["max_increase"] > 1e-10:
        raise QualityFailure("value not non-increasing in x", worst=sol.residuals["max_increase"])
    # smooth fit from the continuation side
    a, b = sol._cont_coeffs()
    vp = a * float(p.dpsi(x0)) + b * float(p.dphi(x0))
    sol.residuals["smooth_fit"] = abs(vp + 1.0)
    sol.residuals["value_at_x0"] = abs(float(a * p.psi(x0) + b * p.phi(x0)) - (q - x0))
    # variational residuals
    spec = p.spec
    xs = x[np.abs(x - x0) > 1e-9 * x0]
    Vs, d1, d2 = sol.value_of(xs), sol.derivative(xs, 1), sol.derivative(xs, 2)
    gen = -spec.generator_residual(Vs, d1, d2, xs)
    sig = spec.sigma(xs)
    size = np.abs(0.5 * sig * sig * d2) + np.abs(spec.mu(xs) * d1) + spec.r * np.abs(Vs)
    cont = xs > x0
    sol.residuals["continuation_residual_rel"] = float(np.max(np.abs(gen[cont]) / size[cont]))
    sol.residuals["min_r_minus_L_V_stop"] = float(np.min(gen[~cont])) if np.any(~cont) else 0.0


def solve_barrier_put(geometry: TransformedGeometry) -> BarrierPutSolution:
    z0 = solve_z0(geometry)
    rw = geometry.reward
    sol = BarrierPutSolution(geometry.notes["x0"], z0, True, rw.barrier, geometry)
    sol.residuals["tangency"] = geometry.notes["tangency_residual"]
    sol.residuals["slope_at_z0"] = float(geometry.slope_x(sol.x0, -1))
    _check(sol)
    return sol


def solve_perpetual_put(geometry: TransformedGeometry) -> BarrierPutSolution:
    """x0 solves phi(x) + (q - x) phi'(x) = 0, which is the argmax of H."""
    p, q = geometry.pair, geometry.reward.strike

    def f(x):
        return float(1.0 + (q - x) * p.omega_phi(x) / x)

    if not f(p.lo) < 0:
        raise NumericalFailure("perpetual put boundary not bracketed; lower domain_lo", lo=p.lo)
    x0 = _root(f, p.lo, q * (1 - 1e-14), xtol_rel=1e-15)
    sol = BarrierPutSolution(x0, float(p.F(x0)), False, None, geometry)
    sol.residuals["boundary_equation"] = abs(f(x0))
    _check(sol)
    return sol


def solve_put(spec: DiffusionSpec, reward: PutReward, numerics: Numerics = None,
              validate: bool = True) -> BarrierPutSolution:
    """Validation, pair, geometry and the barrier or perpetual solver."""
    num = numerics or Numerics()
    d = reward.barrier
    warnings = []
    if d is not None and d >= spec.domain_hi:
        spec = spec.with_domain(spec.domain_lo, 2.0 * d)
        warnings.append(f"domain_hi raised to 2d = {2.0 * d:.17g} so that F(d) is interior")
    report = None
    if validate:
        report = validate_assumptions(spec, transversality=False)
        report.raise_if_rejected()
        warnings.extend(report.warnings)
    pair = solve_fundamental_pair(spec, numerics=num)
    geo = build_geometry(pair, reward)
    sol = solve_barrier_put(geo) if d is not None else solve_perpetual_put(geo)
    sol.warnings.extend(warnings + list(pair.warnings))
    return sol
