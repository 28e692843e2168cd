"""Command line entry point: optstop {solve,verify,sweep,dump-fundamentals}.

Config is one JSON document:

    {
      "schema": 1,
      "model": {"preset": "GBM", "params": {"b": 0.02, "v": 0.3}, "r": 0.05},
      "problem": {"eso": {"l": 1.2, "K": 1.0}},
      "numerics": {"grid_size": 4096, "domain_lo": 1e-4, "domain_hi": 1e3},
      "mc": {"n_paths": 20000, "seed": 1, "scheme": "ExactGBM"},
      "sweep": {"parameter": "r", "ladder": [0.03, 0.04, 0.05]},
      "output": {"directory": "out"}
    }

A custom model gives expressions instead of a preset:
    "model": {"drift": "0.02*x", "volatility": "0.3*x", "r": 0.05}

Exit codes: 0 success, 1 verification or verdict failure, 2 config or
validation rejection, 3 numerical failure, 4 unbounded value.
"""

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .barrier import solve_put
from .errors import ConfigError, OptStopError, PreconditionError, ValidationError
from .eso import smooth_fit_report, solve_eso
from .expr import Expression
from .fundamentals import Numerics, check_convexity, solve_fundamental_pair
from .model import DiffusionSpec, EsoReward, Preset, PutReward, default_domain, make_preset
from .montecarlo import PathConfig, brute_force_thresholds, evaluate_threshold_strategy
from .serialize import write_csv, write_json
from .sweep import SweepBase, run_sweep
from .transform import INF, build_geometry

EXIT_OK, EXIT_FAIL, EXIT_REJECT, EXIT_NUMERIC, EXIT_UNBOUNDED = 0, 1, 2, 3, 4
SCHEMA = 1
PROBLEM_KEYS = {"eso": "Eso", "barrier_put": "BarrierPut", "perpetual_put": "PerpetualPut"}
NUMERIC_KEYS = {f.name for f in dataclasses.fields(Numerics)}
UNBOUNDED_MSG = ("value function is +∞: g/psi grows without bound (L_inf = +inf), "
                 "as for GBM with mu > r; no stopping rule is optimal")


@dataclass
class JobConfig:
    problem: str
    spec: DiffusionSpec
    reward: object
    numerics: Numerics
    mc: Optional[dict] = None
    path_cfg: Optional[PathConfig] = None
    sweeps: list = field(default_factory=list)
    out_dir: str = "out"
    formats: tuple = ("json", "csv")
    threads: int = 1


# ------------------------------------------------------------------ config

def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"missing {where}.{key}")
    return d[key]


def _known(d, allowed, where):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(extra)}")


def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be a number", value=v)
    return float(v)


def parse_config(doc: dict, seed=None, threads=None, out=None) -> JobConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _known(doc, ("schema", "model", "problem", "numerics", "mc", "sweep", "output"), "config")
    if doc.get("schema") != SCHEMA:
        raise ConfigError(f"config schema must be {SCHEMA}", schema=doc.get("schema"))

    prob = _require(doc, "problem", "config")
    if not isinstance(prob, dict) or len(prob) != 1:
        raise ConfigError("problem must hold exactly one of eso, barrier_put, perpetual_put")
    (pkey, pbody), = prob.items()
    if pkey not in PROBLEM_KEYS:
        raise ConfigError(f"unknown problem {pkey!r}", allowed=sorted(PROBLEM_KEYS))
    problem = PROBLEM_KEYS[pkey]
    try:
        if problem == "Eso":
            _known(pbody, ("l", "K"), "problem.eso")
            reward = EsoReward(_num(_require(pbody, "l", "problem.eso"), "l"),
                               _num(_require(pbody, "K", "problem.eso"), "K"))
            x_ref = reward.guarantee
        elif problem == "BarrierPut":
            _known(pbody, ("q", "d"), "problem.barrier_put")
            reward = PutReward(_num(_require(pbody, "q", "problem.barrier_put"), "q"),
                               _num(_require(pbody, "d", "problem.barrier_put"), "d"))
            x_ref = reward.strike
        else:
            _known(pbody, ("q",), "problem.perpetual_put")
            reward = PutReward(_num(_require(pbody, "q", "problem.perpetual_put"), "q"))
            x_ref = reward.strike
    except ValidationError as exc:
        raise ConfigError(f"invalid problem section: {exc}") from None

    nsec = dict(doc.get("numerics") or {})
    _known(nsec, NUMERIC_KEYS | {"domain_lo", "domain_hi"}, "numerics")
    lo, hi = default_domain(x_ref)
    lo = _num(nsec.pop("domain_lo", lo), "numerics.domain_lo")
    hi = _num(nsec.pop("domain_hi", hi), "numerics.domain_hi")
    try:
        numerics = Numerics(**nsec)
    except TypeError as exc:
        raise ConfigError(f"bad numerics section: {exc}") from None
    if numerics.method not in ("auto", "closed_form", "numeric"):
        raise ConfigError("numerics.method must be auto, closed_form or numeric")

    msec = _require(doc, "model", "config")
    _known(msec, ("preset", "params", "r", "drift", "volatility"), "model")
    r = _num(_require(msec, "r", "model"), "model.r")
    kind = msec.get("preset", "Custom")
    try:
        if kind == "Custom":
            drift = Expression(_require(msec, "drift", "model"))
            vol = Expression(_require(msec, "volatility", "model"))
            desc = (("drift", drift.source), ("volatility", vol.source))
            spec = DiffusionSpec(drift, vol, r, lo, hi, Preset("Custom", desc))
        else:
            if "drift" in msec or "volatility" in msec:
                raise ConfigError("give either a preset or drift/volatility expressions")
            spec = make_preset(kind, dict(_require(msec, "params", "model")), r, domain=(lo, hi))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad model section: {exc}") from None

    job = JobConfig(problem, spec, reward, numerics)

    if doc.get("mc") is not None:
        mc = dict(doc["mc"])
        _known(mc, ("n_paths", "dt", "t_max", "seed", "scheme", "dt_max", "starts",
                    "perturb_x1", "lattice"), "mc")
        if seed is not None:
            mc["seed"] = seed
        kw = {k: mc[k] for k in ("n_paths", "dt", "t_max", "seed", "scheme", "dt_max") if k in mc}
        kw["threads"] = int(threads) if threads else 1
        job.path_cfg = PathConfig(**kw)
        if job.path_cfg.scheme == "ExactGBM" and not spec.is_gbm:
            raise ConfigError("mc.scheme ExactGBM requires the GBM preset",
                              preset=spec.preset.kind)
        lat = mc.get("lattice")
        if lat is not None and lat is not False:
            _known(lat, ("n_lower", "n_upper", "n_paths", "start"), "mc.lattice")
        job.mc = mc

    sw = doc.get("sweep")
    if sw is not None:
        items = sw if isinstance(sw, list) else [sw]
        for it in items:
            _known(it, ("parameter", "ladder", "probes"), "sweep")
            ladder = [_num(v, "sweep.ladder") for v in _require(it, "ladder", "sweep")]
            if len(ladder) < 2 or any(b <= a for a, b in zip(ladder, ladder[1:])):
                raise ConfigError("sweep ladder must be strictly increasing", ladder=ladder)
            job.sweeps.append({"parameter": _require(it, "parameter", "sweep"), "ladder": ladder,
                               "probes": it.get("probes")})

    osec = doc.get("output") or {}
    _known(osec, ("directory", "formats"), "output")
    job.out_dir = out or osec.get("directory", "out")
    job.formats = tuple(osec.get("formats", ("json", "csv")))
    job.threads = int(threads) if threads else 1
    return job


def load_config(path, **kw) -> JobConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return parse_config(doc, **kw)


# ------------------------------------------------------------------ helpers

def _log(level, event, **kw):
    rec = {"level": level, "event": event}
    rec.update(kw)
    print(json.dumps(rec, default=str, sort_keys=False), file=sys.stderr)


def _error_exit(exc):
    kind = type(exc).__name__
    diag = getattr(exc, "diagnostics", {})
    if isinstance(exc, (ConfigError, ValidationError, PreconditionError)):
        code = EXIT_REJECT
    else:
        code = EXIT_NUMERIC
    _log("error", "failed", error=kind, message=str(exc), diagnostics=diag, exit=code)
    return code


def _model_record(job):
    return {"preset": job.spec.preset.as_dict(), "r": job.spec.discount_rate,
            "domain": [job.spec.domain_lo, job.spec.domain_hi]}


def _solve(job):
    if job.problem == "Eso":
        return solve_eso(job.spec, job.reward, job.numerics)
    return solve_put(job.spec, job.reward, job.numerics)


def _value_rows(job, sol, n=401):
    p = sol.pair
    top = sol.d if job.problem == "BarrierPut" else p.hi
    x = np.geomspace(p.lo, top, n)
    V = sol.value_of(x)
    g = job.reward.value(x)
    if job.problem == "Eso":
        stop = (x <= sol.x1) | ((x >= sol.x2) if sol.x2 is not None else False)
    else:
        stop = x <= sol.x0
        if job.problem == "BarrierPut":
            stop = stop | (x >= sol.d)
    region = np.where(stop, "stop", "continue")
    return list(zip(x.tolist(), V.tolist(), g.tolist(), region.tolist()))


def _residuals(job, sol):
    p = sol.pair
    if job.problem == "Eso":
        rep = dict(sol.residuals)
        rep.update(smooth_fit_report(sol))
    else:
        rep = dict(sol.residuals)
    return {"schema": SCHEMA, "solver": rep, "fundamentals": p.quality,
            "flags": p.flags, "convexity": check_convexity(p)}


def _solution_record(job, sol):
    rec = {"schema": SCHEMA, "problem": job.problem, "model": _model_record(job)}
    rec["solution"] = sol.record()
    rec["warnings"] = list(sol.warnings)
    return rec


def _unbounded(job, sol):
    _log("warning", "unbounded", message=UNBOUNDED_MSG, L_inf="inf")
    os.makedirs(job.out_dir, exist_ok=True)
    rec = {"schema": SCHEMA, "problem": job.problem, "model": _model_record(job),
           "solution": {"case": "Unbounded", "value": math.inf, "message": UNBOUNDED_MSG},
           "warnings": list(sol.warnings)}
    write_json(os.path.join(job.out_dir, "solution.json"), rec)
    print(UNBOUNDED_MSG)
    return EXIT_UNBOUNDED


# ------------------------------------------------------------------ commands

def cmd_solve(job: JobConfig) -> int:
    try:
        sol = _solve(job)
        if job.problem == "Eso" and sol.case_label == "Unbounded":
            return _unbounded(job, sol)
        os.makedirs(job.out_dir, exist_ok=True)
        write_json(os.path.join(job.out_dir, "solution.json"), _solution_record(job, sol))
        hdr = ["x", "V", "g" if job.problem == "Eso" else "payoff", "region"]
        write_csv(os.path.join(job.out_dir, "value.csv"), hdr, _value_rows(job, sol))
        write_json(os.path.join(job.out_dir, "residuals.json"), _residuals(job, sol))
    except OptStopError as exc:
        return _error_exit(exc)
    for w in sol.warnings:
        _log("warning", "solver", message=w)
    _log("info", "solved", problem=job.problem, out=job.out_dir)
    return EXIT_OK


def _verify_plan(job, sol, perturb):
    """Probe starts and the stopping rule to simulate at each."""
    p = sol.pair
    if job.problem == "Eso":
        l = job.reward.guarantee
        lower = sol.x1 * (1.0 + perturb)
        if sol.x2 is not None:
            rule, kind = {"lower": lower, "upper": sol.x2}, "two_sided"
            a, b = sol.x1, sol.x2
        else:
            # no optimal rule exists: stopping at a high level M gives a lower bound
            M = min(100.0 * l, p.hi)
            rule, kind = {"lower": lower, "upper": M}, "lower_bound"
            a, b = sol.x1, 10.0 * l
        starts = np.geomspace(a, b, 7)[1:-1]
    else:
        q = job.reward.strike
        rule = {"lower": sol.x0 * (1.0 + perturb)}
        kind = "two_sided"
        if sol.has_barrier:
            rule["barrier"] = sol.d
            b = sol.d
        else:
            b = 3.0 * q
        starts = np.geomspace(sol.x0, b, 6)[1:-1]
    if job.mc.get("starts") is not None:
        starts = np.asarray([float(s) for s in job.mc["starts"]])
    return rule, kind, starts


def _lattice(job, sol, cfg):
    lat = job.mc.get("lattice")
    if lat is None or lat is False:
        return None, []
    nl, nu = int(lat.get("n_lower", 40)), int(lat.get("n_upper", 40))
    lcfg = dataclasses.replace(cfg, n_paths=int(lat.get("n_paths", cfg.n_paths)))
    geo = sol.geometry
    if job.problem == "Eso":
        l = job.reward.guarantee
        lower = np.linspace(l / nl, l, nl)
        lo_up = geo.x_g if geo.x_g != INF else l
        upper = np.linspace(lo_up, 10.0 * l, nu)
        start = lat.get("start") or (math.sqrt(geo.x_g * sol.x2) if sol.x2 else 2.0 * l)
        grid = {"lower": lower, "upper": upper}
        target = (sol.x1, sol.x2)
    else:
        q = job.reward.strike
        lower = np.linspace(q / nl, q, nl)
        grid = {"lower": lower, "upper": None, "barrier": sol.d}
        start = lat.get("start") or (math.sqrt(q * sol.d) if sol.has_barrier else 1.5 * q)
        target = (sol.x0,)
    res = brute_force_thresholds(job.spec, job.reward, start, grid, lcfg)
    V0 = float(sol.value_of(start))
    se = np.where(res.stderr > 0, res.stderr, np.inf)
    zdom = float(np.max((res.mean - V0) / se))
    cells = [abs(int(np.abs(ax - t).argmin()) - int(i))
             for ax, t, i in zip([lower] + ([upper] if job.problem == "Eso" else []),
                                 target, res.best_index)]
    summary = {"start": start, "analytic_V": V0, "best_rule": res.best_rule,
               "best_value": res.best_value, "best_stderr": res.best_stderr,
               "argmax_cell_distance": cells, "argmax_within_one_cell": max(cells) <= 1,
               "dominance_z_max": zdom, "dominance_pass": zdom <= 3.0,
               "n_paths": res.n_paths}
    return summary, res.rows()


def cmd_verify(job: JobConfig) -> int:
    if job.mc is None:
        return _error_exit(ConfigError("verify needs an mc section"))
    cfg = job.path_cfg
    perturb = float(job.mc.get("perturb_x1", 0.0))
    try:
        sol = _solve(job)
        if job.problem == "Eso" and sol.case_label == "Unbounded":
            return _unbounded(job, sol)
        rule, kind, starts = _verify_plan(job, sol, perturb)
        rows = []
        for x in starts:
            est = evaluate_threshold_strategy(job.spec, job.reward, rule, float(x), cfg)
            V = float(sol.value_of(x))
            z = est.z_score(V)
            ok = (z <= 3.0) if kind == "lower_bound" else (abs(z) <= 3.0)
            rows.append({"x": float(x), "analytic_V": V, "mc_mean": est.mean,
                         "stderr": est.stderr, "z": z, "kind": kind, "pass": ok,
                         "truncation_fraction": est.truncation_fraction})
        lat, lat_rows = _lattice(job, sol, cfg)
    except OptStopError as exc:
        return _error_exit(exc)
    passed = all(r["pass"] for r in rows) and (lat is None or lat["dominance_pass"])
    os.makedirs(job.out_dir, exist_ok=True)
    rec = {"schema": SCHEMA, "problem": job.problem, "model": _model_record(job),
           "solution": sol.record(), "rule": rule, "perturb_x1": perturb,
           "mc": {"n_paths": cfg.n_paths, "dt": cfg.dt, "t_max": cfg.horizon(job.spec.r),
                  "seed": cfg.seed, "scheme": cfg.scheme},
           "rows": rows, "lattice": lat, "pass": passed}
    write_json(os.path.join(job.out_dir, "verify.json"), rec)
    write_csv(os.path.join(job.out_dir, "verify.csv"),
              ["x", "analytic_V", "mc_mean", "stderr", "z", "kind"],
              [(r["x"], r["analytic_V"], r["mc_mean"], r["stderr"], r["z"], r["kind"]) for r in rows])
    if lat is not None:
        write_csv(os.path.join(job.out_dir, "lattice.csv"),
                  ["lower", "upper", "mean", "stderr"], lat_rows)
    _log("info" if passed else "error", "verified", passed=passed,
         max_abs_z=max(abs(r["z"]) for r in rows) if rows else 0.0)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_sweep(job: JobConfig) -> int:
    if not job.sweeps:
        return _error_exit(ConfigError("sweep needs a sweep section"))
    base = SweepBase(job.spec, job.reward, job.numerics)
    reports = []
    try:
        for sw in job.sweeps:
            reports.append(run_sweep(job.problem, sw["parameter"], sw["ladder"], base,
                                     threads=job.threads, probes=sw["probes"]))
    except OptStopError as exc:
        return _error_exit(exc)
    os.makedirs(job.out_dir, exist_ok=True)
    ok = all(r.ok for r in reports)
    applicable = sum(len(r.applicable) for r in reports)
    write_json(os.path.join(job.out_dir, "sweep.json"),
               {"schema": SCHEMA, "problem": job.problem, "pass": ok,
                "reports": [r.as_dict() for r in reports]})
    rows = []
    for r in reports:
        rows.extend((r.parameter, k, obs, v) for k, obs, v in r.rows())
    write_csv(os.path.join(job.out_dir, "sweep.csv"), ["parameter", "rung", "observable", "value"], rows)
    for r in reports:
        for w in r.warnings:
            _log("warning", "sweep", parameter=r.parameter, message=w)
        for name, v in r.verdicts.items():
            _log("info" if v["status"] != "fail" else "error", "verdict",
                 parameter=r.parameter, observable=name, status=v["status"],
                 max_violation=v["max_violation"])
    if applicable == 0:
        _log("warning", "sweep", message="no applicable verdicts; nothing was asserted")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_fundamentals(job: JobConfig) -> int:
    try:
        pair = solve_fundamental_pair(job.spec, numerics=job.numerics)
        os.makedirs(job.out_dir, exist_ok=True)
        t = pair.table()
        cols = ["x", "psi", "phi", "dpsi", "dphi", "scale"]
        write_csv(os.path.join(job.out_dir, "fundamentals.csv"), cols,
                  zip(*[np.asarray(t[c]).tolist() for c in cols]))
        meta = {"schema": SCHEMA, "model": _model_record(job), "source": pair.source,
                "anchor": pair.anchor, "wronskian": pair.wronskian,
                "gammas": pair.gamma_estimates(), "shooting": pair.shooting,
                "quality": pair.quality, "flags": pair.flags,
                "convexity": check_convexity(pair), "warnings": pair.warnings}
        write_json(os.path.join(job.out_dir, "fundamentals.json"), meta)
        try:
            geo = build_geometry(pair, job.reward)
        except PreconditionError as exc:
            _log("warning", "geometry", message=str(exc))
        else:
            g = geo.table()
            write_csv(os.path.join(job.out_dir, "geometry.csv"),
                      ["x", "y", "value", "slope", "curvature"],
                      zip(*[np.asarray(g[c]).tolist()
                            for c in ("x", "y", "value", "slope", "curvature")]))
    except OptStopError as exc:
        return _error_exit(exc)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "sweep": cmd_sweep,
            "dump-fundamentals": cmd_dump_fundamentals}


def build_parser():
    ap = argparse.ArgumentParser(prog="optstop", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"optstop {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, help="Monte Carlo seed (overrides config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = load_config(args.config, seed=args.seed, threads=args.threads, out=args.out)
    except OptStopError as exc:
        return _error_exit(exc)
    return COMMANDS[args.command](job)


if __name__ == "__main__":
    sys.exit(main())
