"""Diffusion models and rewards, presets, and assumption checks.

A model is dX = mu(X) dt + sigma(X) dB on (0, inf), discounted at rate r.
All coefficient callables must accept and return numpy arrays.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ValidationError

PRESET_KINDS = ("GBM", "CEV", "CIR", "Custom")


@dataclass(frozen=True)
class Preset:
    kind: str
    params: tuple = ()          # sorted (name, value) pairs

    def __post_init__(self):
        if self.kind not in PRESET_KINDS:
            raise ValidationError(f"unknown preset kind {self.kind!r}")

    def get(self, name, default=None):
        return dict(self.params).get(name, default)

    def as_dict(self):
        return {"kind": self.kind, **dict(self.params)}


def default_domain(x_ref: float = 1.0):
    """Four decades below and three above the payoff scale."""
    x_ref = max(float(x_ref), 1.0)
    return 1e-4 * x_ref, 1e3 * x_ref


@dataclass(frozen=True)
class DiffusionSpec:
    drift: Callable
    volatility: Callable
    discount_rate: float
    domain_lo: float
    domain_hi: float
    preset: Preset = field(default_factory=lambda: Preset("Custom"))

    def __post_init__(self):
        if not (self.discount_rate > 0):
            raise ValidationError("discount rate must be positive")
        if not (self.domain_lo > 0 and self.domain_hi > self.domain_lo):
            raise ValidationError("need 0 < domain_lo < domain_hi",
                                  domain=(self.domain_lo, self.domain_hi))

    @property
    def r(self):
        return self.discount_rate

    @property
    def anchor(self):
        # geometric midpoint of the truncated domain
        return float(np.sqrt(self.domain_lo * self.domain_hi))

    def mu(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.drift(x), dtype=float), x.shape)

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.volatility(x), dtype=float), x.shape)

    def theta(self, x):
        x = np.asarray(x, dtype=float)
        return self.discount_rate * x - self.mu(x)

    def generator_residual(self, u, du, d2u, x):
        """(L - r)u from values of u and its first two derivatives."""
        s = self.sigma(x)
        return 0.5 * s * s * d2u + self.mu(x) * du - self.discount_rate * u

    def with_domain(self, lo, hi):
        return replace(self, domain_lo=float(lo), domain_hi=float(hi))

    def with_rate(self, r):
        return replace(self, discount_rate=float(r))

    def shifted(self, drift_shift: float = 0.0, vol_scale: float = 1.0):
        """Family shift mu(x) + delta*x and sigma(x)*scale; presets stay closed-form."""
        if drift_shift == 0.0 and vol_scale == 1.0:
            return self
        p = self.preset
        if p.kind in ("GBM", "CEV"):
            b = p.get("b") + drift_shift
            v = p.get("v") * vol_scale
            params = dict(p.params, b=b, v=v)
            return make_preset(p.kind, params, self.discount_rate,
                               domain=(self.domain_lo, self.domain_hi))
        mu0, sig0 = self.drift, self.volatility

        def mu(x):
            return np.asarray(mu0(x), dtype=float) + drift_shift * np.asarray(x, dtype=float)

        def sig(x):
            return np.asarray(sig0(x), dtype=float) * vol_scale

        desc = dict(p.params)
        desc["drift_shift"] = desc.get("drift_shift", 0.0) + drift_shift
        desc["vol_scale"] = desc.get("vol_scale", 1.0) * vol_scale
        return replace(self, drift=mu, volatility=sig,
                       preset=Preset("Custom", tuple(sorted(desc.items()))))

    @property
    def is_gbm(self):
        return self.preset.kind == "GBM"


@dataclass(frozen=True)
class EsoReward:
    """g(x) = s + (x - l)^+ with s = l - K."""
    guarantee: float
    strike: float

    def __post_init__(self):
        if not (self.guarantee > self.strike > 0):
            raise ValidationError("ESO reward needs l > K > 0",
                                  l=self.guarantee, K=self.strike)

    @property
    def l(self):
        return self.guarantee

    @property
    def K(self):
        return self.strike

    @property
    def cash(self):
        return self.guarantee - self.strike

    @property
    def scale(self):
        return self.guarantee

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.cash + np.maximum(x - self.guarantee, 0.0)

    def slope(self, x, side=+1):
        """g'(x); at the kink the one-sided derivative selected by side."""
        x = np.asarray(x, dtype=float)
        above = x > self.guarantee if side < 0 else x >= self.guarantee
        return np.where(above, 1.0, 0.0)

    def generator_residual(self, spec: DiffusionSpec, x):
        """(L - r)g away from the kink: -r s below l, rK - theta above."""
        x = np.asarray(x, dtype=float)
        r = spec.discount_rate
        return np.where(x < self.guarantee, -r * self.cash,
                        r * self.strike - spec.theta(x))


@dataclass(frozen=True)
class PutReward:
    """h(x) = (q - x)^+, optionally knocked out at the barrier d."""
    strike: float
    barrier: Optional[float] = None

    def __post_init__(self):
        if not self.strike > 0:
            raise ValidationError("put strike must be positive", q=self.strike)
        if self.barrier is not None and not self.barrier > self.strike:
            raise ValidationError("barrier must exceed strike",
                                  q=self.strike, d=self.barrier)

    @property
    def q(self):
        return self.strike

    @property
    def d(self):
        return self.barrier

    @property
    def scale(self):
        return self.strike

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(self.strike - x, 0.0)

    def slope(self, x, side=+1):
        x = np.asarray(x, dtype=float)
        below = x < self.strike if side > 0 else x <= self.strike
        return np.where(below, -1.0, 0.0)

    def generator_residual(self, spec: DiffusionSpec, x):
        """(L - r)h = theta(x) - rq below q, zero above."""
        x = np.asarray(x, dtype=float)
        return np.where(x < self.strike,
                        spec.theta(x) - spec.discount_rate * self.strike, 0.0)


def make_preset(kind: str, params: dict, r: float, x_ref: float = 1.0,
                domain=None) -> DiffusionSpec:
    """Closed-form coefficient presets.

    GBM(b, v):      mu = b x,        sigma = v x
    CEV(b, v, beta): mu = b x,       sigma = v x^beta   (beta >= 0)
    CIR(a, m, v):   mu = a (m - x),  sigma = v sqrt(x)  (Feller 2am >= v^2)
    """
    lo, hi = domain if domain is not None else default_domain(x_ref)
    if kind == "GBM":
        b, v = float(params["b"]), float(params["v"])
        if not v > 0:
            raise ValidationError("GBM volatility must be positive", v=v)
        mu = _Linear(b)
        sig = _Linear(v)
        pr = {"b": b, "v": v}
    elif kind == "CEV":
        b, v, beta = float(params["b"]), float(params["v"]), float(params["beta"])
        if beta < 0:
            raise ValidationError("CEV elasticity beta must be >= 0", beta=beta)
        if not v > 0:
            raise ValidationError("CEV volatility must be positive", v=v)
        mu = _Linear(b)
        sig = _Power(v, beta)
        pr = {"b": b, "v": v, "beta": beta}
    elif kind == "CIR":
        a, m, v = float(params["a"]), float(params["m"]), float(params["v"])
        if not (a > 0 and m > 0 and v > 0):
            raise ValidationError("CIR parameters must be positive", a=a, m=m, v=v)
        if 2 * a * m < v * v:
            raise ValidationError("CIR violates the Feller condition 2am >= v^2",
                                  lhs=2 * a * m, rhs=v * v)
        mu = _MeanRevert(a, m)
        sig = _Power(v, 0.5)
        pr = {"a": a, "m": m, "v": v}
    else:
        raise ValidationError(f"make_preset does not build {kind!r}; "
                              "supply coefficient callables instead")
    return DiffusionSpec(mu, sig, float(r), float(lo), float(hi),
                         Preset(kind, tuple(sorted(pr.items()))))


# Small callable classes rather than lambdas so specs pickle cleanly.
class _Linear:
    def __init__(self, k):
        self.k = k

    def __call__(self, x):
        return self.k * np.asarray(x, dtype=float)


class _Power:
    def __init__(self, v, p):
        self.v, self.p = v, p

    def __call__(self, x):
        return self.v * np.asarray(x, dtype=float) ** self.p


class _MeanRevert:
    def __init__(self, a, m):
        self.a, self.m = a, m

    def __call__(self, x):
        return self.a * (self.m - np.asarray(x, dtype=float))


@dataclass
class ValidationReport:
    ok: bool
    checks: dict
    warnings: list
    conventions: list

    def raise_if_rejected(self):
        if not self.ok:
            failed = [k for k, c in self.checks.items() if c.get("hard") and not c["passed"]]
            raise ValidationError("model rejected: " + ", ".join(failed),
                                  checks=self.checks)

    def as_dict(self):
        return {"ok": self.ok, "checks": self.checks,
                "warnings": list(self.warnings), "conventions": list(self.conventions)}


def validate_assumptions(spec: DiffusionSpec, grid_size: int = 2048,
                         tolerance: float = 1e-12, transversality: bool = True,
                         t_horizon: Optional[float] = None, seed: int = 0) -> ValidationReport:
    """Grid checks of the standing assumptions.

    Hard: sigma > 0, theta non-decreasing.  Soft: drift near zero not too
    negative; a small simulation of e^{-rt} E[X_t] decaying in t.
    """
    x = np.geomspace(spec.domain_lo, spec.domain_hi, int(grid_size))
    checks, warnings, conventions = {}, [], []

    sig = spec.sigma(x)
    pos = bool(np.all(np.isfinite(sig)) and np.all(sig > 0))
    checks["sigma_positive"] = {"passed": pos, "hard": True,
                                "min_sigma": float(np.nanmin(sig))}

    th = spec.theta(x)
    if not np.all(np.isfinite(th)):
        checks["theta_monotone"] = {"passed": False, "hard": True,
                                    "detail": "non-finite theta on grid"}
    else:
        # x < y pairwise is equivalent to comparing with the running max
        run = np.maximum.accumulate(th)
        slack = run[1:] - th[1:] - tolerance * np.abs(th[1:])
        worst = int(np.argmax(slack))
        checks["theta_monotone"] = {"passed": bool(slack[worst] <= 0), "hard": True,
                                    "max_violation": float(max(slack[worst], 0.0)),
                                    "at_x": float(x[worst + 1])}

    low = x[x <= spec.domain_lo * 10.0]
    mu_min = float(np.min(spec.mu(low)))
    tol_mu = 1e-8 * max(1.0, float(np.max(np.abs(low))))
    ok_mu = mu_min >= -tol_mu
    checks["drift_near_zero"] = {"passed": ok_mu, "hard": False, "min_mu": mu_min}
    if not ok_mu:
        warnings.append(f"drift is negative near 0 (min mu = {mu_min:.6g}); "
                        "the liminf of mu at 0 should be non-negative")

    if transversality and pos:
        info = _transversality_probe(spec, t_horizon, seed)
        checks["transversality"] = {"hard": False, **info}
        if not info["passed"]:
            warnings.append("e^{-rt} E[X_t] does not decay in simulation; "
                            "convexity of psi/phi is not guaranteed")

    kind = spec.preset.kind
    if kind == "CEV":
        beta = spec.preset.get("beta")
        conventions.append(f"CEV volatility convention sigma(x) = v*x^beta, beta={beta:g}")
        if beta < 1:
            warnings.append("CEV with beta < 1: 0 may not be a natural boundary")
    if kind == "CIR":
        warnings.append("CIR: 0 is an entrance boundary, not natural; "
                        "boundary-decay checks are reported as flags")

    ok = all(c["passed"] for c in checks.values() if c.get("hard"))
    return ValidationReport(ok, checks, warnings, conventions)


def _transversality_probe(spec, t_horizon, seed, n_paths=2000):
    r = spec.discount_rate
    T = float(t_horizon) if t_horizon else 5.0 / r
    n_steps = 400
    h = T / n_steps
    x0 = min(max(1.0, spec.domain_lo * 10), spec.domain_hi / 10)
    rng = np.random.Generator(np.random.Philox(seed))
    x = np.full(n_paths, x0)
    marks = {n_steps // 4: None, n_steps // 2: None, n_steps: None}
    for k in range(1, n_steps + 1):
        z = rng.standard_normal(n_paths)
        x = x + spec.mu(x) * h + spec.sigma(x) * np.sqrt(h) * z
        x = np.maximum(x, 0.0)
        if k in marks:
            marks[k] = float(np.exp(-r * k * h) * x.mean() / x0)
    m = [marks[k] for k in sorted(marks)]
    passed = bool(m[-1] < 0.5 and m[-1] <= m[0] + 0.05)
    return {"passed": passed, "horizon": T, "discounted_mean_ratio": m}
