"""Fundamental solutions psi (increasing) and phi (decreasing) of (L - r)u = 0.

Both are normalized to 1 at the anchor x_c = sqrt(domain_lo * domain_hi).
For GBM the pair is x^gamma; otherwise it is integrated numerically.

The numeric path works in t = log x with the log-derivative
omega = x u'/u, which satisfies the Riccati equation

    d omega/dt = omega + A - B omega - omega^2,   A = 2 r x^2/sigma^2,  B = 2 x mu/sigma^2.

psi is swept upward from a floor well below domain_lo and phi downward
from a ceiling well above domain_hi; each direction is the stable one for
its solution, so no growing mode contaminates the arrays.  Independently,
the anchor slopes omega(x_c) are found by bisection shooting (too steep a
slope blows up toward the boundary, too shallow crosses zero) and must
agree with the sweeps.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import BPoly, CubicHermiteSpline, PchipInterpolator

from .errors import DomainError, NumericalFailure, QualityFailure
from .model import DiffusionSpec

LN10 = np.log(10.0)


@dataclass(frozen=True)
class Numerics:
    grid_size: int = 4096
    method: str = "auto"            # auto | closed_form | numeric
    ode_rtol: float = 1e-12
    ode_atol: float = 1e-18
    extra_decades: float = 4.0      # sweep/shoot horizon beyond the domain
    shoot_rtol: float = 1e-13
    wronskian_tol: float = 1e-6
    residual_tol: float = 1e-8
    certify: bool = True            # run the shooting certificate
    strict: bool = True             # quality failures raise instead of warn

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def gbm_exponents(b, v, r):
    """Roots gamma1 < 0 < gamma0 of v^2/2 g^2 + (b - v^2/2) g - r = 0."""
    a = 0.5 * v * v
    bb = b - a
    disc = np.sqrt(bb * bb + 4.0 * a * r)
    # stable forms: avoid cancellation in the smaller-magnitude root
    if bb >= 0:
        g1 = (-bb - disc) / (2 * a)
        g0 = -r / (a * g1)
    else:
        g0 = (-bb + disc) / (2 * a)
        g1 = -r / (a * g0)
    return float(g0), float(g1)


class _PowerBackend:
    """psi = (x/xc)^g0, phi = (x/xc)^g1, S'(x) = (x/xc)^(-k)."""

    def __init__(self, g0, g1, k, tc):
        self.g = (g0, g1)
        self.k = k
        self.tc = tc

    def log_u(self, which, t):
        return self.g[which] * (t - self.tc)

    def omega(self, which, t):
        return np.full_like(t, self.g[which])

    def domega(self, which, t):
        return np.zeros_like(t)

    def log_dscale(self, t):
        return -self.k * (t - self.tc)

    def scale(self, t):
        xc = np.exp(self.tc)
        e = 1.0 - self.k
        if abs(e) < 1e-14:
            return xc * (t - self.tc)
        return xc * np.expm1(e * (t - self.tc)) / e


class _SplineBackend:
    """Quintic Hermite interpolants of log u and omega in t = log x."""

    def __init__(self, tg, logu, om, dom, d2om, logs1, dlogs1, s):
        # which = 0 psi, 1 phi
        self._lu = [BPoly.from_derivatives(tg, np.column_stack([logu[i], om[i], dom[i]]))
                    for i in (0, 1)]
        self._om = [BPoly.from_derivatives(tg, np.column_stack([om[i], dom[i], d2om[i]]))
                    for i in (0, 1)]
        self._dom = [sp.derivative() for sp in self._om]
        self._ls1 = CubicHermiteSpline(tg, logs1, dlogs1)
        with np.errstate(over="ignore", invalid="ignore"):
            ds = np.exp(tg + logs1)
        ok = (np.abs(s) < 1e290) & (ds < 1e290)
        self._s = CubicHermiteSpline(tg[ok], s[ok], ds[ok])
        self._s_range = (tg[ok][0], tg[ok][-1])

    def log_u(self, which, t):
        return self._lu[which](t)

    def omega(self, which, t):
        return self._om[which](t)

    def domega(self, which, t):
        return self._dom[which](t)

    def log_dscale(self, t):
        return self._ls1(t)

    def scale(self, t):
        out = self._s(t)
        a, b = self._s_range
        return np.where(t > b, np.inf, np.where(t < a, -np.inf, out))


@dataclass
class FundamentalPair:
    """Evaluable pair psi, phi with scale function and Wronskian.

    Grid arrays (psi, dpsi, ...) are exposed as properties; all evaluators
    accept arrays and raise DomainError outside [domain_lo, domain_hi].
    """
    spec: DiffusionSpec
    grid: np.ndarray
    anchor: float
    source: str
    wronskian: float
    gammas: tuple = None                      # (gamma0, gamma1) for closed-form GBM
    anchor_slopes: tuple = None               # omega_psi(x_c), omega_phi(x_c)
    shooting: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    _b: object = field(default=None, repr=False)

    # ---- domain handling
    @property
    def lo(self):
        return float(self.grid[0])

    @property
    def hi(self):
        return float(self.grid[-1])

    def _t(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.grid[0], self.grid[-1]
        eps = 1e-12
        if np.any(~(x >= lo * (1 - eps))) or np.any(~(x <= hi * (1 + eps))):
            raise DomainError("argument outside the truncated domain",
                              lo=float(lo), hi=float(hi),
                              bad=float(np.asarray(x).ravel()[
                                  np.argmax((x < lo * (1 - eps)) | ~(x <= hi * (1 + eps)))]))
        return np.log(np.clip(x, lo, hi))

    # ---- pointwise evaluators
    def log_psi(self, x):
        return self._b.log_u(0, self._t(x))

    def log_phi(self, x):
        return self._b.log_u(1, self._t(x))

    def omega_psi(self, x):
        return self._b.omega(0, self._t(x))

    def omega_phi(self, x):
        return self._b.omega(1, self._t(x))

    def psi(self, x):
        return np.exp(self.log_psi(x))

    def phi(self, x):
        return np.exp(self.log_phi(x))

    def _d1(self, which, x):
        t = self._t(x)
        return np.exp(self._b.log_u(which, t) - t) * self._b.omega(which, t)

    def _d2(self, which, x):
        t = self._t(x)
        w = self._b.omega(which, t)
        return np.exp(self._b.log_u(which, t) - 2 * t) * (self._b.domega(which, t) + w * w - w)

    def dpsi(self, x):
        return self._d1(0, x)

    def dphi(self, x):
        return self._d1(1, x)

    def d2psi(self, x):
        return self._d2(0, x)

    def d2phi(self, x):
        return self._d2(1, x)

    def dscale(self, x):
        """S'(x), normalized so S'(x_c) = 1."""
        return np.exp(self._b.log_dscale(self._t(x)))

    def log_dscale(self, x):
        return self._b.log_dscale(self._t(x))

    def scale_at(self, x):
        return self._b.scale(self._t(x))

    def log_F(self, x):
        t = self._t(x)
        return self._b.log_u(0, t) - self._b.log_u(1, t)

    def F(self, x):
        return np.exp(self.log_F(x))

    def dF(self, x):
        t = self._t(x)
        lf = self._b.log_u(0, t) - self._b.log_u(1, t)
        return np.exp(lf - t) * (self._b.omega(0, t) - self._b.omega(1, t))

    def F_inv(self, y):
        """Inverse of F by monotone interpolation in log space plus Newton polish."""
        y = np.asarray(y, dtype=float)
        ly = np.log(y)
        if self.gammas is not None:
            g0, g1 = self.gammas
            t = np.log(self.anchor) + ly / (g0 - g1)
        else:
            t = self._lf_inv(ly)
            for _ in range(3):
                tt = np.clip(t, np.log(self.lo), np.log(self.hi))
                f = self._b.log_u(0, tt) - self._b.log_u(1, tt) - ly
                dfdt = self._b.omega(0, tt) - self._b.omega(1, tt)
                t = tt - f / dfdt
        x = np.exp(t)
        lo, hi = self.lo, self.hi
        if np.any(x < lo * (1 - 1e-10)) or np.any(x > hi * (1 + 1e-10)):
            raise DomainError("y outside F(domain)", y_lo=float(self.F(lo)), y_hi=float(self.F(hi)))
        return np.clip(x, lo, hi)

    def wronskian_at(self, x):
        """[phi psi' - psi phi'] / S' evaluated pointwise."""
        t = self._t(x)
        lp, lf = self._b.log_u(0, t), self._b.log_u(1, t)
        dw = self._b.omega(0, t) - self._b.omega(1, t)
        return np.exp(lp + lf - t - self._b.log_dscale(t)) * dw

    # ---- grid arrays
    @property
    def psi_grid(self):
        return self.psi(self.grid)

    @property
    def phi_grid(self):
        return self.phi(self.grid)

    @property
    def dpsi_grid(self):
        return self.dpsi(self.grid)

    @property
    def dphi_grid(self):
        return self.dphi(self.grid)

    @property
    def d2psi_grid(self):
        return self.d2psi(self.grid)

    @property
    def d2phi_grid(self):
        return self.d2phi(self.grid)

    @property
    def scale_grid(self):
        return self.scale_at(self.grid)

    def table(self):
        """Columns x, psi, phi, dpsi, dphi, scale."""
        g = self.grid
        return {"x": g, "psi": self.psi(g), "phi": self.phi(g), "dpsi": self.dpsi(g),
                "dphi": self.dphi(g), "scale": self.scale_at(g)}

    def gamma_estimates(self):
        """Exponents as seen by this pair: exact for closed form, anchor slopes otherwise."""
        if self.gammas is not None:
            return self.gammas
        if self.shooting.get("psi_slope") is not None:
            return self.shooting["psi_slope"], self.shooting["phi_slope"]
        return self.anchor_slopes


# ---------------------------------------------------------------- numerics

def _riccati_coeffs(spec, t):
    x = np.exp(t)
    # call the coefficient functions directly: this is the hot path
    s2 = np.asarray(spec.volatility(x), dtype=float) ** 2
    mu = np.asarray(spec.drift(x), dtype=float)
    return 2.0 * x * x * spec.discount_rate / s2, 2.0 * x * mu / s2


def _riccati_rhs(spec):
    def rhs(t, y):
        A, B = _riccati_coeffs(spec, t)
        w = y[0]
        return [w + A - B * w - w * w, w]
    return rhs


def _quasi_static_root(spec, t, sign):
    A, B = _riccati_coeffs(spec, np.asarray(t, dtype=float))
    return float((1.0 - B + sign * np.sqrt((B - 1.0) ** 2 + 4.0 * A)) / 2.0)


def _extension(spec, t_edge, num):
    """Length in t to integrate past a domain edge.

    Enough for the parasitic mode to decay by e^-40 at the local rate
    |omega_+ - omega_-|, capped at extra_decades; strongly damped models
    (large A) need far less, and a long stiff stretch would only cost time.
    """
    A, B = _riccati_coeffs(spec, np.asarray(t_edge, dtype=float))
    rate = float(np.sqrt((B - 1.0) ** 2 + 4.0 * A))
    cap = num.extra_decades * LN10
    return min(cap, max(0.25, 40.0 / rate)) if rate > 0 else cap


def _sweep(spec, t_start, t_eval, sign, num):
    """Integrate [omega, log u] from t_start through t_eval (stable direction)."""
    w0 = _quasi_static_root(spec, t_start, sign)
    t_end = t_eval[-1] if sign > 0 else t_eval[0]
    te = t_eval if sign > 0 else t_eval[::-1]
    sol = solve_ivp(_riccati_rhs(spec), (t_start, t_end), [w0, 0.0], method="DOP853",
                    t_eval=te, rtol=num.ode_rtol, atol=num.ode_atol)
    if not sol.success or sol.y.shape[1] != len(te) or not np.all(np.isfinite(sol.y)):
        raise NumericalFailure("fundamental-solution sweep did not complete",
                               direction="up" if sign > 0 else "down", detail=sol.message)
    om, lu = sol.y
    if sign < 0:
        om, lu = om[::-1], lu[::-1]
    return om, lu


def _log_dscale(spec, tc, t_eval, num):
    """log S'(x) on t_eval, anchored S'(x_c) = 1: inner integral of -2mu/sigma^2."""
    def rhs(t, y):
        A, B = _riccati_coeffs(spec, t)
        return [-B]

    out = np.empty_like(t_eval)
    up = t_eval >= tc
    for mask, t_end in ((up, t_eval[-1]), (~up, t_eval[0])):
        te = t_eval[mask]
        if te.size == 0:
            continue
        if mask is not up:
            te = te[::-1]
        sol = solve_ivp(rhs, (tc, t_end), [0.0], method="DOP853", t_eval=te,
                        rtol=num.ode_rtol, atol=num.ode_atol)
        if not sol.success or sol.y.shape[1] != te.size:
            raise NumericalFailure("scale-function quadrature did not converge",
                                   detail=sol.message)
        out[mask] = sol.y[0] if mask is up else sol.y[0][::-1]
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


def _scale_from_log_dscale(spec, t, logs1, tc):
    """S = int_{t_c} exp(s + log S'(s)) ds, cell by cell with Gauss-Legendre
    on the Hermite interpolant of log S'.  Overflow saturates to +-inf."""
    _, B = _riccati_coeffs(spec, t)
    L = t + logs1
    spl = CubicHermiteSpline(t, L, 1.0 - B)
    h = np.diff(t)
    mid = 0.5 * (t[1:] + t[:-1])
    nodes = mid[:, None] + 0.5 * h[:, None] * _GL_NODES[None, :]
    ic = int(np.searchsorted(t, tc))
    if ic >= t.size or t[ic] != tc:
        raise NumericalFailure("anchor is not a node of the scale grid")
    with np.errstate(over="ignore", invalid="ignore"):
        # scale each cell by its left value to keep the exponent small
        cell = 0.5 * h * (np.exp(spl(nodes) - L[:-1, None]) @ _GL_WEIGHTS)
        contrib = cell * np.exp(L[:-1])
        S = np.zeros_like(t)
        S[ic + 1:] = np.cumsum(contrib[ic:])
        S[:ic] = -np.cumsum(contrib[:ic][::-1])[::-1]
    return S


def scale_function(spec: DiffusionSpec, grid, numerics: Numerics = None):
    """S(x) = int_c^x exp(-int_c^y 2mu/sigma^2 dz) dy with c = x_c.

    The inner integral is carried by an adaptive integrator in log x; the
    outer one by Gauss-Legendre cells on a refined grid containing the
    requested points.  Values beyond the float range come back as +-inf.
    """
    num = numerics or Numerics()
    grid = np.asarray(grid, dtype=float)
    tq = np.log(grid)
    tc = np.log(spec.anchor)
    lo, hi = min(tq.min(), tc), max(tq.max(), tc)
    fine = np.union1d(np.union1d(np.linspace(lo, hi, 4097), tq), [tc])
    logs1 = _log_dscale(spec, tc, fine, num)
    S = _scale_from_log_dscale(spec, fine, logs1, tc)
    fin = S[np.isfinite(S)]
    if np.any(np.diff(fin) <= 0):
        raise NumericalFailure("scale function not strictly increasing on the grid")
    return S[np.searchsorted(fine, tq)]


def _classify_slopes(spec, w0, tc, t_end, num, sign):
    """Integrate many trial anchor slopes at once toward t_end.

    Uses the angle alpha = arctan(omega), whose equation is smooth and
    bounded.  Passing |alpha| = pi/2 means u hits zero ('steep'); passing
    alpha = 0 means u' vanishes and u turns back up ('flat').  Both
    crossings are one-way in the integration direction, so the final angle
    classifies the trajectory.  Returns +1 steep, -1 flat, 0 neither.
    """
    a0 = np.arctan(np.asarray(w0, dtype=float))

    def rhs(t, a):
        A, B = _riccati_coeffs(spec, np.full_like(a, t))
        c, s_ = np.cos(a), np.sin(a)
        return (1.0 - B) * s_ * c + A * c * c - s_ * s_

    sol = solve_ivp(rhs, (tc, t_end), a0, method="DOP853",
                    rtol=num.ode_rtol, atol=num.ode_atol)
    if not sol.success:
        raise NumericalFailure("shooting integration failed", detail=sol.message)
    a = sign * sol.y[:, -1]
    return np.where(a > 0.5 * np.pi, 1, np.where(a < 0, -1, 0))


def shoot_anchor_slope(spec: DiffusionSpec, which: str, num: Numerics = None,
                       fan: int = 32):
    """Bisection-type shooting on omega(x_c) for the solution that decays
    toward its boundary.

    which='psi' integrates toward the lower boundary (slope positive),
    which='phi' toward the upper boundary (slope negative).  Each pass
    classifies `fan` slopes inside the bracket, shrinking it by ~fan.
    """
    num = num or Numerics()
    tc = np.log(spec.anchor)
    if which == "psi":
        t0 = np.log(spec.domain_lo)
        t_end, sign = t0 - _extension(spec, t0, num), +1.0
    else:
        t0 = np.log(spec.domain_hi)
        t_end, sign = t0 + _extension(spec, t0, num), -1.0
    ladder = sign * 2.0 ** np.arange(-4, 30)
    cls = _classify_slopes(spec, ladder, tc, t_end, num, sign)
    steep = np.nonzero(cls == 1)[0]
    if steep.size == 0:
        raise NumericalFailure(f"shooting for {which} did not bracket the slope",
                               largest_trial=float(ladder[-1]))
    k = int(steep[0])
    inner = 0.0 if k == 0 else float(ladder[k - 1])
    outer = float(ladder[k])
    passes, status = 0, "bracketed"
    while abs(outer - inner) > num.shoot_rtol * max(abs(inner), abs(outer)):
        trial = np.linspace(inner, outer, fan + 2)[1:-1]
        c = _classify_slopes(spec, trial, tc, t_end, num, sign)
        passes += 1
        lo_side = trial[c == -1]
        hi_side = trial[c == 1]
        new_inner = lo_side[np.argmax(np.abs(lo_side))] if lo_side.size else inner
        new_outer = hi_side[np.argmin(np.abs(hi_side))] if hi_side.size else outer
        if new_inner == inner and new_outer == outer:
            status = "undecided"
            break
        inner, outer = float(new_inner), float(new_outer)
        if passes > 60:
            break
    return {"slope": 0.5 * (inner + outer), "width": abs(outer - inner),
            "passes": passes, "status": status}


def solve_fundamental_pair(spec: DiffusionSpec, grid_size: int = None,
                           numerics: Numerics = None) -> FundamentalPair:
    num = numerics or Numerics()
    if grid_size is not None:
        num = num.replace(grid_size=int(grid_size))
    lo, hi = spec.domain_lo, spec.domain_hi
    xc = spec.anchor
    tc = np.log(xc)
    grid = np.geomspace(lo, hi, int(num.grid_size))
    method = num.method
    if method == "auto":
        method = "closed_form" if spec.is_gbm else "numeric"
    if method == "closed_form" and not spec.is_gbm:
        raise NumericalFailure("closed-form pair is available for GBM only")

    if method == "closed_form":
        b, v = spec.preset.get("b"), spec.preset.get("v")
        g0, g1 = gbm_exponents(b, v, spec.discount_rate)
        k = 2.0 * b / (v * v)
        backend = _PowerBackend(g0, g1, k, tc)
        pair = FundamentalPair(spec, grid, xc, "ClosedFormGBM", (g0 - g1) / xc,
                               gammas=(g0, g1), anchor_slopes=(g0, g1), _b=backend)
    else:
        pair = _numeric_pair(spec, grid, tc, num)
    _finalize(pair, num)
    return pair


def _numeric_pair(spec, grid, tc, num):
    tg = np.log(grid)
    # include the anchor so normalization is exact
    te = np.union1d(tg, [tc])
    ic = int(np.searchsorted(te, tc))
    om_p, lu_p = _sweep(spec, tg[0] - _extension(spec, tg[0], num), te, +1, num)
    om_f, lu_f = _sweep(spec, tg[-1] + _extension(spec, tg[-1], num), te, -1, num)
    lu_p = lu_p - lu_p[ic]
    lu_f = lu_f - lu_f[ic]
    A, B = _riccati_coeffs(spec, te)
    # dA/dt, dB/dt by central differences for the second omega derivative
    hd = 1e-5
    Ap, Bp = _riccati_coeffs(spec, te + hd)
    Am, Bm = _riccati_coeffs(spec, te - hd)
    At, Bt = (Ap - Am) / (2 * hd), (Bp - Bm) / (2 * hd)
    dom, d2om = [], []
    for w in (om_p, om_f):
        dw = w + A - B * w - w * w
        dom.append(dw)
        d2om.append((1.0 - B - 2.0 * w) * dw + At - Bt * w)
    dom_p, dom_f = dom
    logs1 = _log_dscale(spec, tc, te, num)
    s = _scale_from_log_dscale(spec, te, logs1, tc)
    backend = _SplineBackend(te, (lu_p, lu_f), (om_p, om_f), (dom_p, dom_f), d2om,
                             logs1, -B, s)
    wp, wf = float(om_p[ic]), float(om_f[ic])
    xc = float(np.exp(tc))
    pair = FundamentalPair(spec, grid, xc, "NumericShooting", (wp - wf) / xc,
                           anchor_slopes=(wp, wf), _b=backend)
    lf = lu_p - lu_f
    pair._lf_inv = PchipInterpolator(lf, te, extrapolate=True)

    if num.certify:
        sp = shoot_anchor_slope(spec, "psi", num)
        sf = shoot_anchor_slope(spec, "phi", num)
        pair.shooting = {"psi_slope": sp["slope"], "phi_slope": sf["slope"],
                         "psi": sp, "phi": sf}
        for name, shot, swept in (("psi", sp, wp), ("phi", sf, wf)):
            gap = abs(shot["slope"] - swept) / max(1.0, abs(swept))
            pair.quality[f"{name}_anchor_gap"] = gap
            if shot["width"] > 1e-7 * max(1.0, abs(swept)):
                # no decaying solution singled out: the boundary is not natural
                pair.warnings.append(f"{name}: shooting inconclusive (bracket width "
                                     f"{shot['width']:.3g}); boundary may not be natural")
                pair.flags[f"{name}_shooting_conclusive"] = False
            elif gap > 1e-7:
                _quality_issue(pair, num, f"{name}: shooting slope {shot['slope']:.12g} disagrees "
                                          f"with sweep {swept:.12g}")
    return pair


def _quality_issue(pair, num, msg):
    if num.strict:
        raise QualityFailure(msg, quality=pair.quality)
    pair.warnings.append(msg)


def _finalize(pair: FundamentalPair, num: Numerics):
    g = pair.grid
    # positivity is structural (log representation); check finiteness and monotonicity
    lp, lf = pair.log_psi(g), pair.log_phi(g)
    if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(lf))):
        raise QualityFailure("fundamental solutions not finite and positive on grid")
    if not (np.all(np.diff(lp) > 0) and np.all(np.diff(lf) < 0)):
        raise QualityFailure("fundamental solutions not strictly monotone on grid")
    with np.errstate(over="ignore", under="ignore"):
        psi, phi = np.exp(lp), np.exp(lf)

    w = pair.wronskian_at(g)
    if not np.all(np.isfinite(w)) or not np.all(w > 0):
        raise QualityFailure("Wronskian not finite and positive on grid")
    spread = float((w.max() - w.min()) / abs(w.mean()))
    pair.quality["wronskian_spread"] = spread
    if not spread <= num.wronskian_tol:
        _quality_issue(pair, num, f"Wronskian relative spread {spread:.3g} above tolerance")

    # ODE residual at midpoints between nodes.  In log-derivative form
    # (L - r)u = sigma^2 u/(2x^2) * (omega' - omega - A + B omega + omega^2),
    # normalized by the sizes of the individual terms.
    xm = np.sqrt(g[1:-1] * g[2:])
    tm = np.log(xm)
    A, B = _riccati_coeffs(pair.spec, tm)
    worst = 0.0
    for which in (0, 1):
        w = pair._b.omega(which, tm)
        dw = pair._b.domega(which, tm)
        res = dw - (w + A - B * w - w * w)
        terms = np.abs(dw) + np.abs(w) + np.abs(A) + np.abs(B * w) + w * w
        worst = max(worst, float(np.max(np.abs(res) / terms)))
    pair.quality["ode_residual"] = worst
    if not worst <= num.residual_tol:
        _quality_issue(pair, num, f"ODE residual {worst:.3g} above tolerance")

    flags = {
        "psi_decays_at_lo": bool(psi[0] < 1e-3),
        "phi_grows_at_lo": bool(phi[0] > 1e2),
        "phi_decays_at_hi": bool(phi[-1] < 1e-2),
    }
    pair.flags.update(flags)
    for k, ok in flags.items():
        if not ok:
            pair.warnings.append(f"boundary behaviour flag {k} not satisfied on the truncated domain")


def hitting_laplace(pair: FundamentalPair, x, kappa):
    """E_x[exp(-r tau_kappa)] = psi(x)/psi(kappa) below kappa, phi ratio above."""
    x = np.asarray(x, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    below = x <= kappa
    up = pair.log_psi(x) - pair.log_psi(kappa)
    down = pair.log_phi(x) - pair.log_phi(kappa)
    out = np.exp(np.where(below, up, down))
    return np.where(x == kappa, 1.0, np.minimum(out, 1.0))


def check_convexity(pair: FundamentalPair, rtol: float = 1e-7):
    """Sign test of u'' on the grid.

    u'' = u/x^2 (omega' + omega^2 - omega), so convexity is the sign of the
    bracket, compared against the size of its terms.  Chord-slope second
    differences are not used: where u is nearly flat they are dominated by
    rounding in u itself.
    """
    t = np.log(pair.grid)
    out = {}
    for name, which in (("psi_convex", 0), ("phi_convex", 1)):
        w = pair._b.omega(which, t)
        dw = pair._b.domega(which, t)
        eta = dw + w * w - w
        tol = rtol * (np.abs(dw) + w * w + np.abs(w))
        out[name] = bool(np.all(eta >= -tol))
    return out


def decompose_solution(pair: FundamentalPair, alpha: float, beta: float,
                       span: float = 2.0, n: int = 801, numerics: Numerics = None):
    """Integrate (L - r)u = 0 from u(x_c) = alpha, u'(x_c) = beta and express
    u as C1 psi + C2 phi.

    The solution is integrated over [x_c 10^-span, x_c 10^span] in both
    directions with the linear ODE; returns (C1, C2, relative sup residual).
    """
    num = numerics or Numerics()
    spec = pair.spec
    xc = pair.anchor
    lo = max(pair.lo, xc * 10.0 ** -span)
    hi = min(pair.hi, xc * 10.0 ** span)

    def rhs(t, y):
        # y = [u, x u'] in t = log x
        x = np.exp(t)
        s2 = spec.sigma(x) ** 2
        u, v = y
        d2 = 2.0 * (spec.r * u - spec.mu(x) * v / x) / s2       # u''
        return [v, v + x * x * d2]

    tc = np.log(xc)
    xs, us = [], []
    for t_end in (np.log(lo), np.log(hi)):
        te = np.linspace(tc, t_end, n // 2 + 1)
        sol = solve_ivp(rhs, (tc, t_end), [alpha, xc * beta], method="DOP853",
                        t_eval=te, rtol=num.ode_rtol, atol=num.ode_atol)
        xs.append(np.exp(sol.t))
        us.append(sol.y[0])
    x = np.concatenate([xs[0][::-1], xs[1][1:]])
    u = np.concatenate([us[0][::-1], us[1][1:]])
    # C1 = W(u, phi)/W(psi, phi) at x_c, C2 = u(x_c) - C1 (psi = phi = 1 there)
    wu = (pair.phi(xc) * beta - alpha * pair.dphi(xc)) / pair.dscale(xc)
    c1 = float(wu / pair.wronskian)
    c2 = float(alpha - c1)
    fit = c1 * pair.psi(x) + c2 * pair.phi(x)
    resid = float(np.max(np.abs(u - fit)) / np.max(np.abs(u)))
    return c1, c2, resid
