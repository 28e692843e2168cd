"""Parameter ladders and monotonicity verdicts for the comparison principles.

Each (problem, parameter) pair maps to a fixed list of expected monotone
directions.  A verdict passes when no consecutive step moves against its
direction by more than SWEEP_SLACK.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .barrier import solve_put
from .errors import ConfigError, OptStopError
from .eso import solve_eso
from .fundamentals import Numerics, check_convexity
from .model import DiffusionSpec, EsoReward, PutReward

SWEEP_SLACK = 1e-9
N_PROBES = 9
PROBLEMS = ("Eso", "BarrierPut", "PerpetualPut")

# (observable, direction): +1 non-decreasing, -1 non-increasing along the ladder
PRINCIPLES = {
    ("Eso", "r"): [("x1", +1), ("x2", -1)],
    ("Eso", "K"): [("x1", -1), ("x2", +1)],
    ("Eso", "l"): [("x1", +1), ("x2", +1)],
    ("Eso", "drift"): [("V", +1), ("x1", -1), ("x2", +1)],
    ("Eso", "volatility"): [("V", +1), ("x1", -1), ("x2", +1)],
    ("BarrierPut", "d"): [("x0", -1)],
    ("BarrierPut", "r"): [("x0", +1)],
    ("BarrierPut", "q"): [("x0", +1)],
    ("BarrierPut", "drift"): [("V", -1), ("x0", +1)],
    ("BarrierPut", "volatility"): [("V", +1), ("x0", -1)],
    ("PerpetualPut", "r"): [("x0", +1)],
    ("PerpetualPut", "q"): [("x0", +1)],
    ("PerpetualPut", "drift"): [("V", -1), ("x0", +1)],
    ("PerpetualPut", "volatility"): [("V", +1), ("x0", -1)],
}

# proved only for the standard put: reported, never asserted
EXPERIMENTS = {("BarrierPut", "volatility")}


@dataclass
class SweepBase:
    spec: DiffusionSpec
    reward: object
    numerics: Numerics = field(default_factory=Numerics)


@dataclass
class SweepReport:
    problem: str
    parameter: str
    ladder: list
    observables: list
    verdicts: dict
    probes: list
    skipped: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return all(v["status"] != "fail" for v in self.verdicts.values())

    @property
    def applicable(self):
        return [k for k, v in self.verdicts.items() if v["status"] in ("pass", "fail")]

    def as_dict(self):
        return {"problem": self.problem, "parameter": self.parameter, "ladder": self.ladder,
                "probes": self.probes, "observables": self.observables,
                "verdicts": self.verdicts, "skipped": self.skipped, "warnings": self.warnings}

    def rows(self):
        """Flat (rung, observable, value) records in ladder order."""
        out = []
        for k, rec in enumerate(self.observables):
            if rec["status"] != "ok":
                continue
            for name in ("x1", "x2", "x0"):
                if rec.get(name) is not None:
                    out.append((k, name, rec[name]))
            for j, v in enumerate(rec.get("V", [])):
                out.append((k, f"V[{j}]", v))
        return out


def _rung(problem, parameter, base: SweepBase, value):
    spec, rw = base.spec, base.reward
    if parameter == "r":
        spec = spec.with_rate(value)
    elif parameter == "drift":
        spec = spec.shifted(drift_shift=value)
    elif parameter == "volatility":
        spec = spec.shifted(vol_scale=value)
    elif parameter == "K" and problem == "Eso":
        rw = EsoReward(rw.guarantee, value)
    elif parameter == "l" and problem == "Eso":
        rw = EsoReward(value, rw.strike)
    elif parameter == "q" and problem != "Eso":
        rw = PutReward(value, rw.barrier)
    elif parameter == "d" and problem == "BarrierPut":
        rw = PutReward(rw.strike, value)
    else:
        raise ConfigError(f"parameter {parameter!r} is not defined for {problem}")
    return spec, rw


def _solve(problem, spec, rw, numerics):
    if problem == "Eso":
        sol = solve_eso(spec, rw, numerics)
        if sol.case_label == "Unbounded":
            raise OptStopError("rung is Unbounded")
        return sol, {"x1": sol.x1, "x2": sol.x2, "case": sol.case_label}
    sol = solve_put(spec, rw, numerics)
    return sol, {"x0": sol.x0}


def _probes(problem, sol):
    if problem == "Eso":
        hi = sol.x2 if sol.x2 is not None else 10 * sol.reward.guarantee
        a, b = sol.x1, hi
    else:
        b = sol.d if sol.has_barrier else 10 * sol.strike
        a = sol.x0
    # open interval: skip the endpoints
    return np.geomspace(a, b, N_PROBES + 2)[1:-1]


def _monotone(series, direction):
    """Largest step against the expected direction (0 when monotone)."""
    s = np.asarray(series, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 2:
        return 0.0
    steps = np.diff(s, axis=0) * direction
    return float(max(0.0, -np.min(steps)))


def run_sweep(problem: str, parameter: str, ladder, base: SweepBase, threads: int = 1,
              probes=None) -> SweepReport:
    if problem not in PROBLEMS:
        raise ConfigError(f"unknown problem {problem!r}", allowed=PROBLEMS)
    key = (problem, parameter)
    if key not in PRINCIPLES:
        raise ConfigError(f"no comparison principle for {problem} over {parameter!r}")
    ladder = [float(v) for v in ladder]
    if len(ladder) < 2 or np.any(np.diff(ladder) <= 0):
        raise ConfigError("ladder must be strictly increasing with at least two rungs",
                          ladder=ladder)

    def work(v):
        try:
            spec, rw = _rung(problem, parameter, base, v)
            sol, rec = _solve(problem, spec, rw, base.numerics)
        except ConfigError:
            raise
        except OptStopError as exc:
            return None, {"value": v, "status": "skipped", "reason": f"{type(exc).__name__}: {exc}"}
        rec.update({"value": v, "status": "ok"})
        return sol, rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, ladder))
        # map preserves ladder order
    else:
        results = [work(v) for v in ladder]

    valid = [(s, r) for s, r in results if s is not None]
    skipped = [r for s, r in results if s is None]
    report = SweepReport(problem, parameter, ladder, [r for _, r in results], {}, [],
                         skipped=skipped)
    if skipped:
        report.warnings.append(f"{len(skipped)} rung(s) failed and were skipped")
    if not valid:
        for obs, _ in PRINCIPLES[key]:
            report.verdicts[obs] = {"status": "inapplicable", "monotone_pass": None,
                                    "max_violation": None, "reason": "no valid rungs"}
        return report
    pr = np.asarray(probes, dtype=float) if probes is not None else _probes(problem, valid[0][0])
    report.probes = pr.tolist()
    for sol, rec in valid:
        rec["V"] = [float(v) for v in sol.value_of(pr)]

    conditional = problem == "Eso" and parameter == "volatility"
    convex_ok = True
    if conditional:
        flags = [check_convexity(s.pair) for s, _ in valid]
        convex_ok = all(f["psi_convex"] and f["phi_convex"] for f in flags)
    for obs, direction in PRINCIPLES[key]:
        series = [r[obs] for _, r in valid]
        if any(v is None for v in series):
            report.verdicts[obs] = {"status": "inapplicable", "monotone_pass": None,
                                    "max_violation": None, "direction": direction,
                                    "reason": "observable absent on some rung"}
            continue
        viol = _monotone(series, direction)
        verdict = {"direction": direction, "max_violation": viol,
                   "monotone_pass": viol <= SWEEP_SLACK, "n_rungs": len(valid)}
        if len(valid) < 2:
            verdict["status"], verdict["reason"] = "inapplicable", "fewer than two valid rungs"
        elif key in EXPERIMENTS:
            verdict["status"] = "experiment"
        elif conditional and not convex_ok:
            verdict["status"], verdict["reason"] = "inapplicable", "psi or phi not convex on some rung"
        else:
            verdict["status"] = "pass" if verdict["monotone_pass"] else "fail"
        report.verdicts[obs] = verdict
    return report
