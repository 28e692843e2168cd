"""Monte Carlo oracle for threshold stopping rules and hitting-time transforms.

Paths are advanced on a time grid whose step grows like e^{rt}: discounting
shrinks the weight of late crossings at the same rate, so the absolute
discretization error per unit of discounted payoff stays roughly flat while
the step count stays near 1/(r dt).  Within each step the running minimum
and maximum are drawn from the Brownian bridge between the endpoints, so
level crossings between grid times are not missed; the crossing time is
recorded at the step midpoint.

Randomness is split into fixed-size blocks, each with its own Philox stream
keyed by (seed, block index).  Blocks are simulated in any order on any
number of threads and reduced in block order, so results are bit-identical
for every thread count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError

SCHEMES = ("ExactGBM", "EulerMaruyama")
BLOCK_PAIRS = 8192          # antithetic pairs per RNG block


@dataclass(frozen=True)
class PathConfig:
    n_paths: int = 20000
    dt: float = 1e-2
    t_max: Optional[float] = None        # None: ln(1e4)/r, so e^{-r t_max} = 1e-4
    seed: int = 0
    scheme: str = "ExactGBM"
    dt_max: float = math.inf
    threads: int = 1

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise ConfigError("n_paths must be at least 1", n_paths=self.n_paths)
        if not self.dt > 0:
            raise ConfigError("dt must be positive", dt=self.dt)
        if self.t_max is not None and not self.dt <= self.t_max:
            raise ConfigError("need dt <= t_max", dt=self.dt, t_max=self.t_max)
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}", allowed=SCHEMES)
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigError("seed must be a 64-bit unsigned integer", seed=self.seed)

    def horizon(self, r):
        return self.t_max if self.t_max is not None else math.log(1e4) / r

    @property
    def n_pairs(self):
        return (int(self.n_paths) + 1) // 2


@dataclass
class McEstimate:
    mean: float
    stderr: float
    n_paths: int
    truncation_fraction: float
    seed: int
    truncation_bound: float = 0.0       # bound on the discounted mass lost at t_max

    def z_score(self, reference):
        if self.stderr == 0.0:
            return 0.0 if self.mean == reference else math.copysign(math.inf, self.mean - reference)
        return (self.mean - reference) / self.stderr

    def as_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
                "truncation_fraction": self.truncation_fraction, "seed": self.seed,
                "truncation_bound": self.truncation_bound}


def time_grid(dt, r, t_max, dt_max=math.inf):
    ts = [0.0]
    while ts[-1] < t_max:
        h = min(dt * math.exp(r * ts[-1]), dt_max)
        ts.append(min(ts[-1] + h, t_max))
    return np.array(ts)


class _Stepper:
    """One step of the state plus the bridge extremes, in the scheme's working coordinate."""

    def __init__(self, spec, scheme):
        if scheme == "ExactGBM":
            if not spec.is_gbm:
                raise ConfigError("ExactGBM scheme requires the GBM preset",
                                  preset=spec.preset.kind)
            b, v = spec.preset.get("b"), spec.preset.get("v")
            self.forward, self.back = np.log, np.exp
            self._nu, self._v = b - 0.5 * v * v, v
            self.exact = True
        else:
            self.forward = self.back = lambda a: a
            self.spec = spec
            self.exact = False

    def coeffs(self, w, h):
        if self.exact:
            return self._nu * h, self._v * math.sqrt(h)
        x = np.maximum(w, 0.0)
        return self.spec.mu(x) * h, self.spec.sigma(x) * math.sqrt(h)

    def step(self, w0, h, z, e_lo, e_hi):
        """e_lo, e_hi are standard exponentials (-log of uniforms) for the bridge extremes."""
        drift, sd = self.coeffs(w0, h)
        w1 = w0 + drift + sd * z
        if not self.exact:
            w1 = np.maximum(w1, 0.0)
        d2 = (w1 - w0) ** 2
        var = sd * sd
        lo = 0.5 * (w0 + w1 - np.sqrt(d2 + 2.0 * var * e_lo))
        hi = 0.5 * (w0 + w1 + np.sqrt(d2 + 2.0 * var * e_hi))
        return w1, lo, hi


def _hit_times(stepper, x0, down, up, ts, seed, block, n_pairs):
    """First-passage times to every level in down (from above) and up (from below).

    Rows 0..m-1 and m..2m-1 are antithetic partners.  Returns (Td, Tu) with inf
    for levels not reached by ts[-1].
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))
    n = 2 * n_pairs
    ld = stepper.forward(np.asarray(down, dtype=float))
    lu = stepper.forward(np.asarray(up, dtype=float))
    nd, nu = ld.size, lu.size
    w = np.full(n, float(stepper.forward(np.float64(x0))))
    Td = np.full((n, nd), np.inf)
    Tu = np.full((n, nu), np.inf)
    # idn: levels ld[idn:] are already hit; iup: levels lu[:iup] are already hit
    idn = np.searchsorted(ld, w, "left")
    iup = np.searchsorted(lu, w, "right")
    for j in range(nd):
        Td[idn <= j, j] = 0.0
    for j in range(nu):
        Tu[iup > j, j] = 0.0
    alive_d = idn > 0 if nd else np.ones(n, bool)
    alive_u = iup < nu if nu else np.ones(n, bool)
    active = np.nonzero(alive_d & alive_u)[0]
    for k in range(len(ts) - 1):
        if active.size == 0:
            break
        h = ts[k + 1] - ts[k]
        z = rng.standard_normal(n_pairs)
        e = rng.standard_exponential((2, n_pairs))
        # antithetic partners share the bridge draws and flip the normal
        pi = active % n_pairs
        zz = np.where(active < n_pairs, z[pi], -z[pi])
        w1, lo, hi = stepper.step(w[active], h, zz, e[0, pi], e[1, pi])
        w[active] = w1
        thit = ts[k] + 0.5 * h
        if nd:
            nid = np.searchsorted(ld, lo, "left")
            ch = nid < idn[active]
            if ch.any():
                p, a = active[ch], nid[ch]
                o = idn[p]
                for j in range(int((o - a).max())):
                    c = a + j
                    ok = c < o
                    Td[p[ok], c[ok]] = thit
                idn[p] = a
        if nu:
            niu = np.searchsorted(lu, hi, "right")
            ch = niu > iup[active]
            if ch.any():
                p, a = active[ch], niu[ch]
                o = iup[p]
                for j in range(int((a - o).max())):
                    c = o + j
                    ok = c < a
                    Tu[p[ok], c[ok]] = thit
                iup[p] = a
        keep = np.ones(active.size, bool)
        if nd:
            keep &= idn[active] > 0
        if nu:
            keep &= iup[active] < nu
        active = active[keep]
    return Td, Tu


def _blocks(cfg):
    n = cfg.n_pairs
    full, rest = divmod(n, BLOCK_PAIRS)
    return [BLOCK_PAIRS] * full + ([rest] if rest else [])


def _run(spec, cfg, x0, down, up, reducer):
    """Simulate all blocks and return the per-block reducer outputs in block order."""
    stepper = _Stepper(spec, cfg.scheme)
    r = spec.discount_rate
    ts = time_grid(cfg.dt, r, cfg.horizon(r), cfg.dt_max)
    sizes = _blocks(cfg)

    def one(b):
        Td, Tu = _hit_times(stepper, x0, down, up, ts, int(cfg.seed), b, sizes[b])
        return reducer(Td, Tu, sizes[b])

    if cfg.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=int(cfg.threads)) as ex:
            return list(ex.map(one, range(len(sizes))))
    return [one(b) for b in range(len(sizes))]


def _pair_moments(pay, m):
    """Sums of antithetic pair means and their squares, plus the pair count."""
    y = 0.5 * (pay[:m] + pay[m:])
    return np.sum(y, axis=0), np.sum(y * y, axis=0)


def _combine(parts, n_pairs):
    s1 = np.zeros_like(parts[0][0])
    s2 = np.zeros_like(parts[0][1])
    trunc = 0
    for a, b, t in parts:                 # fixed block order
        s1 = s1 + a
        s2 = s2 + b
        trunc += t
    mean = s1 / n_pairs
    if n_pairs > 1:
        var = np.maximum(s2 - n_pairs * mean * mean, 0.0) / (n_pairs - 1)
    else:
        var = np.zeros_like(mean)
    return mean, np.sqrt(var / n_pairs), trunc


def _rule_levels(rule):
    lower = rule.get("lower")
    upper = rule.get("upper")
    barrier = rule.get("barrier")
    return lower, upper, barrier


def _check_in_domain(spec, *levels):
    for v in levels:
        if v is not None and not (spec.domain_lo <= v <= spec.domain_hi):
            raise DomainError("level outside the model domain", level=v,
                              domain=(spec.domain_lo, spec.domain_hi))


def evaluate_threshold_strategy(spec, reward, rule: dict, x0: float, cfg: PathConfig) -> McEstimate:
    """E[e^{-r tau} g(X_tau)] for tau = first exit below rule['lower'] or above rule['upper'].

    Hitting rule['barrier'] first pays zero, as does surviving to t_max.
    """
    lower, upper, barrier = _rule_levels(rule)
    _check_in_domain(spec, lower, upper, barrier, x0)
    r = spec.discount_rate
    tmax = cfg.horizon(r)
    sup_pay = float(np.max(reward.value(np.array([v for v in (lower, upper, x0) if v is not None]))))
    bound = math.exp(-r * tmax) * sup_pay
    _Stepper(spec, cfg.scheme)              # scheme check before any shortcut
    n = 2 * cfg.n_pairs
    if barrier is not None and x0 >= barrier:
        return McEstimate(0.0, 0.0, n, 0.0, int(cfg.seed), 0.0)
    if (lower is not None and x0 <= lower) or (upper is not None and x0 >= upper):
        return McEstimate(float(reward.value(np.float64(x0))), 0.0, n, 0.0, int(cfg.seed), 0.0)
    res = brute_force_thresholds(spec, reward, x0,
                                 {"lower": [lower] if lower is not None else [],
                                  "upper": [upper] if upper is not None else None,
                                  "barrier": barrier}, cfg)
    mean = float(np.ravel(res.mean)[0])
    se = float(np.ravel(res.stderr)[0])
    return McEstimate(mean, se, n, res.truncation_fraction, int(cfg.seed), bound)


@dataclass
class LatticeResult:
    lower: np.ndarray
    upper: Optional[np.ndarray]
    barrier: Optional[float]
    mean: np.ndarray                    # shape (n_lower, n_upper) or (n_lower,)
    stderr: np.ndarray
    n_paths: int
    truncation_fraction: float
    seed: int
    best_index: tuple = ()
    best_rule: dict = field(default_factory=dict)

    @property
    def best_value(self):
        return float(self.mean[self.best_index])

    @property
    def best_stderr(self):
        return float(self.stderr[self.best_index])

    def rows(self):
        """Flat (lower, upper, mean, stderr) rows in lattice order."""
        out = []
        for i, a in enumerate(self.lower):
            if self.upper is None:
                out.append((float(a), None, float(self.mean[i]), float(self.stderr[i])))
            else:
                for j, b in enumerate(self.upper):
                    out.append((float(a), float(b), float(self.mean[i, j]), float(self.stderr[i, j])))
        return out


def brute_force_thresholds(spec, reward, x0: float, grid: dict, cfg: PathConfig) -> LatticeResult:
    """Evaluates every (lower, upper) rule of the lattice on the same paths.

    grid = {"lower": levels, "upper": levels or None, "barrier": level or None}.
    An empty lower list means no lower threshold.
    """
    lower = np.sort(np.asarray(grid.get("lower", []), dtype=float))
    upper = grid.get("upper")
    upper = None if upper is None else np.sort(np.asarray(upper, dtype=float))
    barrier = grid.get("barrier")
    _check_in_domain(spec, x0, barrier, *lower.tolist(), *(upper.tolist() if upper is not None else []))
    r = spec.discount_rate
    g0 = float(reward.value(np.float64(x0)))
    gl = reward.value(lower) if lower.size else np.zeros(0)
    gu = reward.value(upper) if upper is not None else np.zeros(0)
    ups = upper if upper is not None else np.zeros(0)
    if barrier is not None:
        ups_all = np.append(ups, barrier)
        order = np.argsort(ups_all, kind="stable")
        ups_sorted = ups_all[order]
    else:
        order = np.arange(ups.size)
        ups_sorted = ups
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)

    def reducer(Td, Tu, m):
        Tu = Tu[:, inv]                                  # back to (upper..., barrier)
        n = Td.shape[0]
        Tb = Tu[:, -1] if barrier is not None else np.full(n, np.inf)
        if barrier is not None:
            x0_dead = x0 >= barrier
        else:
            x0_dead = False
        A = Td if lower.size else np.full((n, 1), np.inf)
        galt = gl if lower.size else np.zeros(1)
        # stopping at t = 0 pays g(x0), not g(level)
        pl = np.where(A == 0.0, g0, galt[None, :]) * np.exp(-r * A)
        if upper is None:
            hitA = (A < Tb[:, None])
            pay = np.where(hitA & np.isfinite(A), pl, 0.0)
            alive = ~np.isfinite(A).any(axis=1) & ~np.isfinite(Tb) if lower.size else ~np.isfinite(Tb)
            pay = pay if lower.size else pay[:, :1]
        else:
            B = Tu[:, :upper.size]
            pu = np.where(B == 0.0, g0, gu[None, :]) * np.exp(-r * B)
            b_ok = (B < Tb[:, None]) & np.isfinite(B)
            s1 = np.empty((A.shape[1], upper.size))
            s2 = np.empty_like(s1)
            # one lower level at a time keeps memory at O(n * n_upper)
            for i in range(A.shape[1]):
                a = A[:, i:i + 1]
                first_a = (a < B) & (a < Tb[:, None])
                pay_i = np.where(first_a, pl[:, i:i + 1], np.where(b_ok, pu, 0.0))
                if x0_dead:
                    pay_i = np.zeros_like(pay_i)
                s1[i], s2[i] = _pair_moments(pay_i, m)
            alive = ~(np.isfinite(A).any(axis=1) | np.isfinite(B).any(axis=1) | np.isfinite(Tb))
            return s1, s2, int(np.count_nonzero(alive))
        if x0_dead:
            pay = np.zeros_like(pay)
        s1, s2 = _pair_moments(pay, m)
        return s1, s2, int(np.count_nonzero(alive))

    parts = _run(spec, cfg, x0, lower, ups_sorted, reducer)
    mean, se, trunc = _combine(parts, cfg.n_pairs)
    n = 2 * cfg.n_pairs
    if upper is None and lower.size == 0:
        mean, se = mean[:1], se[:1]
    res = LatticeResult(lower, upper, barrier, mean, se, n, trunc / n, int(cfg.seed))
    res.best_index = tuple(int(i) for i in np.unravel_index(int(np.argmax(mean)), mean.shape))
    res.best_rule = {"lower": float(lower[res.best_index[0]]) if lower.size else None,
                     "upper": float(upper[res.best_index[1]]) if upper is not None else None,
                     "barrier": barrier}
    return res


def estimate_hitting_laplace(spec, x: float, kappa: float, cfg: PathConfig) -> McEstimate:
    """E[e^{-r tau_kappa} 1{tau_kappa <= t_max}]; biased low by at most e^{-r t_max}."""
    _check_in_domain(spec, x, kappa)
    stepper = _Stepper(spec, cfg.scheme)
    r = spec.discount_rate
    tmax = cfg.horizon(r)
    n = 2 * cfg.n_pairs
    bound = math.exp(-r * tmax)
    if x == kappa:
        return McEstimate(1.0, 0.0, n, 0.0, int(cfg.seed), 0.0)
    down, up = ([kappa], []) if kappa < x else ([], [kappa])

    def reducer(Td, Tu, m):
        T = Td[:, 0] if down else Tu[:, 0]
        pay = np.exp(-r * T)[:, None]
        s1, s2 = _pair_moments(pay, m)
        return s1, s2, int(np.count_nonzero(~np.isfinite(T)))

    del stepper
    parts = _run(spec, cfg, x, down, up, reducer)
    mean, se, trunc = _combine(parts, cfg.n_pairs)
    return McEstimate(float(mean[0]), float(se[0]), n, trunc / n, int(cfg.seed), bound)
