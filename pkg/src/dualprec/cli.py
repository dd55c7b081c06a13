"""Command-line front end: instance generation, solving with KKT
certification, theorem-verification ensembles, and conversion-path
benchmarking.

Exit codes: 0 success, 2 usage or validation error, 3 convergence
failure, 4 theorem-bound violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import designer, duality, model, objective, solver
from .errors import (ConvergenceError, DualPrecError, InfeasibleTransformError,
                     SingularTransformError, ValidationError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_CONVERGENCE = 3
EXIT_BOUND_VIOLATION = 4

#: Default theorem bounds enforced by `verify`.
DEFAULT_BOUNDS = {"psi_asymmetry": 1e-8, "pq_gap": 1e-6, "mse_gap": 1e-8}

#: Seed-stream tags so channels and precoders never share a stream.
PRECODER_TAG = 1

BENCH_FIELDS = ["trial", "seed", "iters", "smse_final", "pq_max_gap",
                "t_legacy_us", "t_shortcut_us"]


@dataclass
class TrialRecord:
    trial: int
    seed: int
    psi_asymmetry: float | None
    pq_gap: float | None
    mse_gap: float | None
    sum_power_dl: float | None
    max_residual: float | None
    converged: bool
    error: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


@dataclass
class BenchRecord:
    trial: int
    seed: int
    iters: int
    smse_final: float
    pq_max_gap: float
    t_legacy_us: float
    t_shortcut_us: float

    @classmethod
    def from_dict(cls, d: dict) -> "BenchRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def _fmt(x) -> str:
    """CSV cell: floats at 17 significant digits for exact round-trips."""
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _emit(payload, out_path):
    text = json.dumps(payload, indent=1)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _emit_csv(rows, fields, out_path):
    def write(fh):
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])

    if out_path:
        with open(out_path, "w", newline="") as f:
            write(f)
    else:
        write(sys.stdout)


def _parse_int_list(s: str) -> tuple:
    return tuple(int(tok) for tok in re.split(r"[,;:]", s.strip()) if tok)


def parse_dims(spec: str) -> model.SystemDims:
    """Flattened dims spec: M,K followed by K antenna counts and K stream
    counts.  Quotes and brackets are tolerated, so 4,2,"2,2","2,2" works.
    """
    toks = [t for t in re.split(r"[,;:]", re.sub(r"[\[\]\"' ]", "", spec)) if t]
    vals = [int(t) for t in toks]
    if len(vals) < 2:
        raise ValidationError("dims: need at least M,K")
    M, K = vals[0], vals[1]
    if len(vals) != 2 + 2 * K:
        raise ValidationError(
            f"dims: expected {2 + 2 * K} values for K={K} (M,K,N_1..N_K,"
            f"L_1..L_K), got {len(vals)}")
    return model.SystemDims(M=M, K=K, N=tuple(vals[2:2 + K]),
                            L=tuple(vals[2 + K:2 + 2 * K]))


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _solver_config(ns, file_cfg: dict) -> solver.SolverConfig:
    kw = dict(file_cfg.get("solver", {}))
    if getattr(ns, "kkt_tol", None) is not None:
        kw["kkt_tol"] = ns.kkt_tol
    if getattr(ns, "max_iters", None) is not None:
        kw["max_iters"] = ns.max_iters
    return solver.SolverConfig(**kw)


def _design_config(ns, file_cfg: dict, scfg, default_path) -> designer.DesignConfig:
    kw = dict(file_cfg.get("design", {}))
    kw.setdefault("path", default_path)
    if getattr(ns, "path", None) is not None:
        kw["path"] = ns.path
    if getattr(ns, "max_outer_iters", None) is not None:
        kw["max_outer_iters"] = ns.max_outer_iters
    if getattr(ns, "init", None) is not None:
        kw["init_mode"] = ns.init
    kw["solver"] = scfg
    return designer.DesignConfig(**kw)


def _certificate_dict(cert: solver.KktCertificate) -> dict:
    return {
        "mu_sum": cert.mu_sum,
        "mu": [float(x) for x in cert.mu],
        "stationarity_residual": cert.stationarity_residual,
        "primal_sum_violation": cert.primal_sum_violation,
        "primal_nonneg_violation": cert.primal_nonneg_violation,
        "slackness_residual": cert.slackness_residual,
    }


def certificate_from_dict(d: dict) -> solver.KktCertificate:
    return solver.KktCertificate(
        mu_sum=d["mu_sum"], mu=np.array(d["mu"], dtype=float),
        stationarity_residual=d["stationarity_residual"],
        primal_sum_violation=d["primal_sum_violation"],
        primal_nonneg_violation=d["primal_nonneg_violation"],
        slackness_residual=d["slackness_residual"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(ns) -> int:
    try:
        N = _parse_int_list(ns.N)
        L = _parse_int_list(ns.L)
    except ValueError:
        print("gen: N and L must be comma-separated integers", file=sys.stderr)
        return EXIT_USAGE
    dims = model.SystemDims(M=ns.M, K=ns.K, N=N, L=L)
    bad = dims.violations()
    if ns.sigma2 <= 0:
        bad.append("sigma2: must be > 0")
    if ns.pmax <= 0:
        bad.append("p_max: must be > 0")
    if bad:
        for b in bad:
            print(f"gen: {b}", file=sys.stderr)
        return EXIT_USAGE
    ch = model.gen_channel(dims, ns.sigma2, ns.pmax, seed=ns.seed)
    out = ns.out or "instance.json"
    model.save_instance(ch, out)
    print(f"{out} sha256:{_sha256(out)}")
    return EXIT_OK


def cmd_solve(ns) -> int:
    file_cfg = _load_config(ns.config)
    try:
        scfg = _solver_config(ns, file_cfg)
    except (ValidationError, TypeError) as e:
        print(f"solve: {e}", file=sys.stderr)
        return EXIT_USAGE
    if ns.format == "csv":
        print("solve: only JSON reports are supported", file=sys.stderr)
        return EXIT_USAGE
    ch = model.load_instance(ns.instance)
    bad = model.validate(ch)
    if bad:
        for b in bad:
            print(f"solve: {b}", file=sys.stderr)
        return EXIT_USAGE
    pseed = ns.precoder_seed
    if pseed is None:
        pseed = ch.seed if ch.seed is not None else 0
    up = model.random_unit_precoders(ch.dims, model.VIRTUAL_UPLINK,
                                     seed=[pseed, PRECODER_TAG])
    eff = model.build_effective_channel(ch, up)
    converged = True
    try:
        q, cert = solver.solve_power(eff, ch.sigma2, ch.p_max, scfg)
    except ConvergenceError as e:
        q, cert, converged = e.best_q, e.certificate, False
    state = objective.make_state(eff, q, ch.sigma2)
    rep = objective.mmse_report_uplink(state)
    payload = {
        "command": "solve",
        "instance": str(ns.instance),
        "precoder_seed": pseed,
        "kkt_tol": scfg.kkt_tol,
        "converged": converged,
        "q": [float(x) for x in q],
        "objective_trace_jinv": float(np.trace(state.J_inv).real),
        "smse": objective.sum_mse_uplink(state),
        "per_stream_mse": [float(x) for x in rep.per_stream],
        "certificate": _certificate_dict(cert),
    }
    _emit(payload, ns.out)
    return EXIT_OK if converged else EXIT_NO_CONVERGENCE


def _verify_trial(trial, seed, dims, sigma2, pmax, scfg, negative) -> dict:
    rec = {"trial": trial, "seed": seed, "psi_asymmetry": None,
           "pq_gap": None, "mse_gap": None, "sum_power_dl": None,
           "max_residual": None, "converged": True, "error": None}
    try:
        ch = model.gen_channel(dims, sigma2, pmax, seed=seed)
        up = model.random_unit_precoders(dims, model.VIRTUAL_UPLINK,
                                         seed=[seed, PRECODER_TAG])
        eff = model.build_effective_channel(ch, up)
        if negative:
            # skip solving; measure the coupling asymmetry at uniform power
            q = np.full(dims.L_tot, pmax / dims.L_tot)
            state = objective.make_state(eff, q, sigma2)
            rec_ul = objective.mmse_receivers_uplink(state)
            rep_ul = objective.mmse_report_uplink(state)
            dd = duality.build_duality_data(eff, sigma2, q, rec_ul,
                                            rep_ul.per_stream)
            rec["psi_asymmetry"] = duality.psi_asymmetry(dd.Psi)
            return rec
        q, cert = solver.solve_power(eff, sigma2, pmax, scfg)
        rep = duality.verify_theorem(ch, up, q, scfg)
        rec.update(psi_asymmetry=rep.psi_asymmetry, pq_gap=rep.pq_gap,
                   mse_gap=rep.mse_gap, sum_power_dl=rep.sum_power_dl,
                   max_residual=cert.max_residual)
    except ConvergenceError as e:
        rec["converged"] = False
        rec["error"] = "ConvergenceError"
        if e.certificate is not None:
            rec["max_residual"] = e.certificate.max_residual
    except (SingularTransformError, InfeasibleTransformError) as e:
        rec["error"] = type(e).__name__
    return rec


def cmd_verify(ns) -> int:
    file_cfg = _load_config(ns.config)
    ens = file_cfg.get("ensemble", {})
    trials = ns.trials if ns.trials is not None else int(ens.get("trials", 100))
    seed_base = ns.seed_base if ns.seed_base is not None \
        else int(ens.get("seed_base", 1))
    dims_spec = ns.dims if ns.dims is not None else ens.get("dims", "4,2,2,2,2,2")
    try:
        scfg = _solver_config(ns, file_cfg)
        dims = parse_dims(dims_spec)
        if trials < 1:
            raise ValidationError("trials: must be >= 1")
        bad = dims.violations()
        if bad:
            raise ValidationError("; ".join(bad))
    except (ValidationError, TypeError, ValueError) as e:
        print(f"verify: {e}", file=sys.stderr)
        return EXIT_USAGE

    bounds = dict(DEFAULT_BOUNDS)
    if ns.max_psi_asym is not None:
        bounds["psi_asymmetry"] = ns.max_psi_asym
    if ns.max_pq_gap is not None:
        bounds["pq_gap"] = ns.max_pq_gap
    if ns.max_mse_gap is not None:
        bounds["mse_gap"] = ns.max_mse_gap

    def run(t):
        return _verify_trial(t, seed_base + t, dims, ns.sigma2, ns.pmax,
                             scfg, ns.negative_control)

    if ns.threads and ns.threads > 1:
        with ThreadPoolExecutor(max_workers=ns.threads) as ex:
            records = list(ex.map(run, range(trials)))
    else:
        records = [run(t) for t in range(trials)]

    psis = [r["psi_asymmetry"] for r in records if r["psi_asymmetry"] is not None]
    summary = {
        "trials": trials,
        "failures": sum(1 for r in records if r["error"] is not None),
        "median_psi_asymmetry": float(np.median(psis)) if psis else None,
        "max_psi_asymmetry": float(np.max(psis)) if psis else None,
    }
    ok = summary["failures"] == 0
    if not ns.negative_control:
        for key, kmax in (("pq_gap", "max_pq_gap"), ("mse_gap", "max_mse_gap")):
            vals = [r[key] for r in records if r[key] is not None]
            summary[kmax] = float(np.max(vals)) if vals else None
        for key in ("psi_asymmetry", "pq_gap", "mse_gap"):
            mx = summary[f"max_{key}"]
            if mx is None or mx > bounds[key]:
                ok = False
        summary["bounds"] = bounds
        summary["bounds_ok"] = ok

    payload = {"command": "verify",
               "dims": {"M": dims.M, "K": dims.K, "N": list(dims.N),
                        "L": list(dims.L)},
               "sigma2": ns.sigma2, "p_max": ns.pmax,
               "seed_base": seed_base,
               "negative_control": ns.negative_control,
               "per_trial": records, "summary": summary}
    if ns.format == "csv":
        fields = list(records[0].keys())
        _emit_csv(records, fields, ns.out)
    else:
        _emit(payload, ns.out)
    for k, v in summary.items():
        print(f"{k} = {v}", file=sys.stderr)
    if ns.negative_control:
        return EXIT_OK if summary["failures"] == 0 else EXIT_BOUND_VIOLATION
    return EXIT_OK if ok else EXIT_BOUND_VIOLATION


def cmd_bench(ns) -> int:
    file_cfg = _load_config(ns.config)
    ens = file_cfg.get("ensemble", {})
    trials = ns.trials if ns.trials is not None else int(ens.get("trials", 100))
    seed_base = ns.seed_base if ns.seed_base is not None \
        else int(ens.get("seed_base", 1))
    dims_spec = ns.dims if ns.dims is not None else ens.get("dims", "4,2,2,2,2,2")
    try:
        scfg = _solver_config(ns, file_cfg)
        dims = parse_dims(dims_spec)
    except (ValidationError, TypeError, ValueError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_USAGE

    rows, failures = [], []

    def run(t):
        seed = seed_base + t
        ch = model.gen_channel(dims, ns.sigma2, ns.pmax, seed=seed)
        cfg = designer.DesignConfig(path=designer.BOTH, seed=seed, solver=scfg)
        cp = designer.compare_paths(ch, cfg)
        return {"trial": t, "seed": seed, "iters": cp.iters,
                "smse_final": cp.smse_final,
                "pq_max_gap": cp.max_power_discrepancy,
                "t_legacy_us": cp.t_legacy_median * 1e6,
                "t_shortcut_us": cp.t_shortcut_median * 1e6}

    for t in range(trials):
        try:
            rows.append(run(t))
        except DualPrecError as e:  # record and continue
            failures.append({"trial": t, "seed": seed_base + t,
                             "error": type(e).__name__})
    if ns.format == "json":
        _emit(rows, ns.out)
    else:  # CSV is the bench default
        _emit_csv(rows, BENCH_FIELDS, ns.out)
    agg_leg = sum(r["t_legacy_us"] for r in rows)
    agg_sc = sum(r["t_shortcut_us"] for r in rows)
    print(f"trials = {len(rows)}  failures = {len(failures)}", file=sys.stderr)
    print(f"aggregate t_legacy_us = {agg_leg:.3f}  "
          f"aggregate t_shortcut_us = {agg_sc:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_design(ns) -> int:
    file_cfg = _load_config(ns.config)
    try:
        scfg = _solver_config(ns, file_cfg)
        dcfg = _design_config(ns, file_cfg, scfg, designer.SIMPLIFIED)
    except (ValidationError, TypeError) as e:
        print(f"design: {e}", file=sys.stderr)
        return EXIT_USAGE
    ch = model.load_instance(ns.instance)
    bad = model.validate(ch)
    if bad:
        for b in bad:
            print(f"design: {b}", file=sys.stderr)
        return EXIT_USAGE
    converged = True
    try:
        res = designer.design(ch, dcfg)
    except ConvergenceError as e:
        res, converged = e.partial, False
    if ns.format == "csv":
        rows = [{"iteration": i, "smse": s}
                for i, s in enumerate(res.smse_trace)]
        _emit_csv(rows, ["iteration", "smse"], ns.out)
    else:
        payload = {
            "command": "design",
            "instance": str(ns.instance),
            "path": res.path_used,
            "converged": converged,
            "iters": res.iters,
            "smse_trace": [float(s) for s in res.smse_trace],
            "q": [float(x) for x in res.uplink.powers],
            "p": [float(x) for x in res.downlink.powers],
            "transform_time_s": res.transform_time,
            "shortcut_time_s": res.shortcut_time,
        }
        _emit(payload, ns.out)
    return EXIT_OK if converged else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=["json", "csv"], default=None)
    p.add_argument("--seed-base", type=int, default=None, dest="seed_base")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dualprec",
        description="Minimum sum-MSE precoding via the virtual uplink, with "
                    "duality certification")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a problem instance")
    _add_common(g)
    g.add_argument("--M", type=int, required=True)
    g.add_argument("--K", type=int, required=True)
    g.add_argument("--N", required=True, help="comma list, one per user")
    g.add_argument("--L", required=True, help="comma list, one per user")
    g.add_argument("--sigma2", type=float, default=1.0)
    g.add_argument("--pmax", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve one instance and certify")
    _add_common(s)
    s.add_argument("instance")
    s.add_argument("--precoder-seed", type=int, default=None,
                   dest="precoder_seed")
    s.add_argument("--kkt-tol", type=float, default=None, dest="kkt_tol")
    s.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("verify", help="theorem-verification ensemble")
    _add_common(v)
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--dims", default=None,
                   help='flattened spec, e.g. 4,2,"2,2","2,2"')
    v.add_argument("--sigma2", type=float, default=1.0)
    v.add_argument("--pmax", type=float, default=10.0)
    v.add_argument("--kkt-tol", type=float, default=None, dest="kkt_tol")
    v.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    v.add_argument("--negative-control", action="store_true",
                   dest="negative_control",
                   help="skip solving; measure asymmetry at uniform q")
    v.add_argument("--max-psi-asym", type=float, default=None,
                   dest="max_psi_asym")
    v.add_argument("--max-pq-gap", type=float, default=None, dest="max_pq_gap")
    v.add_argument("--max-mse-gap", type=float, default=None,
                   dest="max_mse_gap")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="legacy vs shortcut conversion benchmark")
    _add_common(b)
    b.add_argument("--trials", type=int, default=None)
    b.add_argument("--dims", default=None)
    b.add_argument("--sigma2", type=float, default=1.0)
    b.add_argument("--pmax", type=float, default=10.0)
    b.add_argument("--kkt-tol", type=float, default=None, dest="kkt_tol")
    b.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("design", help="alternating precoder design")
    _add_common(d)
    d.add_argument("instance")
    d.add_argument("--path", choices=[designer.LEGACY, designer.SIMPLIFIED,
                                      designer.BOTH], default=None)
    d.add_argument("--init", choices=["random_unit", "channel_svd"],
                   default=None)
    d.add_argument("--max-outer-iters", type=int, default=None,
                   dest="max_outer_iters")
    d.add_argument("--kkt-tol", type=float, default=None, dest="kkt_tol")
    d.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    d.set_defaults(func=cmd_design)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except FileNotFoundError as e:
        print(f"{ns.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, json.JSONDecodeError) as e:
        print(f"{ns.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
