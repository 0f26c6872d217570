"""Command line interface.

    mfslq solve    PROBLEM [--dt DT] [--out DIR] [--plot]
    mfslq simulate PROBLEM (--solution FILE | --open-loop [--control CSV])
                   [--paths N] [--seed S] [--format csv|bin|json] [--export-paths N] [--out DIR] [--plot]
    mfslq verify   PROBLEM SOLUTION [--checks LIST] [--paths N] [--seed S] [--out DIR]
    mfslq oracle   PROBLEM --steps K [--dt DT] [--out DIR] [--plot]

PROBLEM is a TOML problem file (grammar in mfslq.problemfile) or one of the
bundled names cp_lq1, cp_j1, mf1. Exit codes: 0 ok, 2 input error,
3 solver failure, 4 verification failure. Errors are printed to stderr as
one JSON object. Every output file starts with the run manifest.
MFSLQ_THREADS caps the number of Monte Carlo workers.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .bsde import solve_phi_deterministic, assemble_offset_M, write_phi_csv
from .errors import InputError, MFSLQError, DiscretizationMismatch
from .io import read_table, write_json, write_paths_bin, write_paths_csv, write_table, to_jsonable
from .meanfield import MeanFieldPair, MfslqSolution, Multipliers, solve_mfslq
from .model import TimeGrid, validate_problem
from .problemfile import SHIPPED, annotate, read_problem, shipped_problem
from .riccati import assemble_gains, solve_riccati_deterministic, write_riccati_csv
from .simulate import (DEFAULT_SEED, ControlPath, FeedbackLaw, NoiseBundle, estimate_mean_trajectory,
                       evaluate_cost, monte_carlo, simulate_state)
from .verify import ALL_CHECKS, MAX_SCENARIOS, ORACLE_LADDER, ScenarioTree, compare_with_oracle, dp_oracle, run_checks

EXIT = {"input": 2, "solver": 3, "verification": 4}


class VerificationFailure(Exception):
    pass


def _resolve(path):
    if not os.path.exists(path) and path.lower().replace("-", "_") in SHIPPED:
        return shipped_problem(path)
    return path


def _load(args, dt=None):
    path = _resolve(args.problem)
    spec, sha = read_problem(path)
    if dt is not None:
        if not dt > 0:
            raise InputError(f"--dt must be positive, got {dt}")
        steps = max(1, int(round(spec.grid.T / dt)))
        spec = replace(spec, grid=TimeGrid(spec.grid.T, steps))
    try:
        prob = validate_problem(spec)
    except MFSLQError as e:
        with open(path, encoding="utf-8") as fh:
            raise annotate(e, fh.read())
    return prob, sha, path


def _manifest(args, command, sha, path, n_paths=None, seed=None):
    return {"command": command, "input": path, "seed": seed, "n_paths": n_paths,
            "dt_override": getattr(args, "dt", None), "output_dir": args.out, "version": __version__,
            "input_sha256": sha}


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------- solution files

def solution_body(sol: MfslqSolution):
    prob = sol.prob
    diag = {k: v for k, v in sol.diagnostics.items() if k != "operator_sizes"}
    return {
        "n": prob.n, "m": prob.m, "T": prob.grid.T, "n_steps": prob.N,
        "J": sol.J, "P0": sol.ric.P[0], "valid": sol.valid,
        "t": prob.grid.nodes, "gain": sol.gain, "offset": sol.offset,
        "a": sol.a, "b": sol.b, "lam": sol.lam, "gam": sol.gam,
        "mean_state": sol.mean_state, "mean_control": sol.mean_control,
        "multiplier_rank": sol.multipliers.rank, "diagnostics": diag,
    }


def load_solution(path, prob, sha):
    """Rebuild a solution from its JSON file. P and phi are recomputed from
    the problem; gain, offset and means are taken from the file as written."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read solution file {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"solution file {path} is not valid JSON: {e.msg} (line {e.lineno}, column {e.colno})") from None
    man = doc.get("manifest", {})
    if man.get("input_sha256") not in (None, sha):
        raise InputError("solution was produced for a different problem file (input hash mismatch)",
                         expected=sha, found=man.get("input_sha256"))
    try:
        steps = int(doc["n_steps"])
        if steps != prob.N:
            prob = prob.with_grid(steps)
        arr = {k: np.asarray(doc[k], dtype=float) for k in
               ("gain", "offset", "a", "b", "lam", "gam", "mean_state", "mean_control")}
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"solution file {path} is missing or has a malformed field: {e}") from None
    N1, n, m = prob.N + 1, prob.n, prob.m
    want = {"gain": (N1, m, n), "offset": (N1, m), "a": (N1, n), "b": (N1, m), "lam": (N1, n),
            "gam": (N1, m), "mean_state": (N1, n), "mean_control": (N1, m)}
    for k, shp in want.items():
        if arr[k].shape != shp:
            raise InputError(f"solution field {k}: expected shape {shp}, found {arr[k].shape}")
    ric = solve_riccati_deterministic(prob)
    gains = assemble_gains(prob, ric)
    phi = solve_phi_deterministic(prob, gains, arr["a"], arr["b"], arr["lam"], arr["gam"])
    M = assemble_offset_M(prob, gains, ric, phi)
    mult = Multipliers(arr["lam"], arr["gam"], float("nan"), int(doc.get("multiplier_rank", -1)), float("nan"), True)
    return MfslqSolution(prob=prob, ric=ric, gains=gains, phi=phi,
                         pair=MeanFieldPair(arr["a"], arr["b"], {}), multipliers=mult,
                         gain=arr["gain"], offset=arr["offset"], M=M, mean_state=arr["mean_state"],
                         mean_control=arr["mean_control"], J=float(doc.get("J", float("nan"))),
                         diagnostics=dict(doc.get("diagnostics", {})))


# ---------------------------------------------------------------- commands

def cmd_solve(args):
    prob, sha, path = _load(args, args.dt)
    sol = solve_mfslq(prob)
    out = _outdir(args)
    man = _manifest(args, "solve", sha, path)
    write_json(os.path.join(out, "solution.json"), man, solution_body(sol))
    t = prob.grid.nodes
    write_riccati_csv(os.path.join(out, "riccati.csv"), sol.ric, sol.gains, man)
    n, m = prob.n, prob.m
    cols = ["t"] + [f"K_{i}{j}" for i in range(m) for j in range(n)] + [f"k_{i}" for i in range(m)]
    write_table(os.path.join(out, "gain.csv"), cols,
                np.hstack([t[:, None], sol.gain.reshape(len(t), -1), sol.offset]), man)
    cols = (["t"] + [f"a_{i}" for i in range(n)] + [f"b_{j}" for j in range(m)]
            + [f"lam_{i}" for i in range(n)] + [f"gam_{j}" for j in range(m)])
    write_table(os.path.join(out, "means.csv"), cols, np.hstack([t[:, None], sol.a, sol.b, sol.lam, sol.gam]), man)
    write_phi_csv(os.path.join(out, "phi.csv"), sol.phi, man)
    if args.plot:
        from .plotting import plot_solution
        plot_solution(out, t, sol.ric.P, sol.gain, sol.offset, sol.a, sol.b)
    print(f"J = {sol.J:.10g}   P(0) = {np.array2string(sol.ric.P[0], precision=10)}")
    print(f"constraint residuals: state {sol.diagnostics['constraint_residual_state']:.2e}, "
          f"control {sol.diagnostics['constraint_residual_control']:.2e}")
    print(f"wrote {out}/solution.json, gain.csv, riccati.csv, means.csv, phi.csv")
    return 0


def _open_loop_control(args, prob):
    N1 = prob.N + 1
    if args.control is None:
        return np.zeros((N1, prob.m))
    _, cols, data = read_table(args.control)
    if data.ndim != 2 or data.shape[0] != N1 or data.shape[1] != prob.m + 1:
        raise InputError(f"control file must have {N1} rows of (t, u_1..u_{prob.m}), found shape {data.shape}")
    if np.abs(data[:, 0] - prob.grid.nodes).max() > 1e-9:
        raise InputError("control file times do not match the problem grid")
    return data[:, 1:]


def cmd_simulate(args):
    prob, sha, path = _load(args, args.dt)
    if args.paths < 1:
        raise InputError("--paths must be >= 1")
    if (args.solution is None) == (not args.open_loop):
        raise InputError("give exactly one of --solution FILE or --open-loop")
    noise = NoiseBundle(prob.grid, prob.spec.jumps, args.paths, args.seed)
    n_exp = min(args.export_paths, args.paths)
    if args.solution is not None:
        sol = load_solution(args.solution, prob, sha)
        prob = sol.prob
        noise = NoiseBundle(prob.grid, prob.spec.jumps, args.paths, args.seed)
        control = ControlPath.feedback(sol.feedback_law())
        st = monte_carlo(prob, control, noise)
        cost, mean_x, se_x, mean_u, se_u = st.cost, st.mean_state, st.se_state, st.mean_control, st.se_control
        exported = simulate_state(prob, control, noise, start=0, stop=n_exp)
    else:
        u = _open_loop_control(args, prob)
        if prob.has_mean_field:
            pb = simulate_state(prob, ControlPath.open_loop(u), noise)      # sample-mean closure
            cost = evaluate_cost(prob, pb)
            mean_x, se_x = estimate_mean_trajectory(pb)
            mean_u, se_u = estimate_mean_trajectory(replace(pb, X=pb.u))
            exported = replace(pb, X=pb.X[:n_exp], u=pb.u[:n_exp])
        else:
            st = monte_carlo(prob, ControlPath.open_loop(u), noise)
            cost, mean_x, se_x, mean_u, se_u = st.cost, st.mean_state, st.se_state, st.mean_control, st.se_control
            exported = simulate_state(prob, ControlPath.open_loop(u), noise, start=0, stop=n_exp)
    out = _outdir(args)
    man = _manifest(args, "simulate", sha, path, n_paths=args.paths, seed=args.seed)
    man["exported_paths"] = n_exp
    t = prob.grid.nodes
    fname = os.path.join(out, f"paths.{args.format}")
    if args.format == "csv":
        write_paths_csv(fname, t, exported.X, exported.u, man)
    elif args.format == "bin":
        write_paths_bin(fname, t, exported.X, exported.u, man)
    else:
        write_json(fname, man, {"t": t, "X": exported.X, "u": exported.u})
    n, m = prob.n, prob.m
    cols = (["t"] + [f"mean_x{i + 1}" for i in range(n)] + [f"se_x{i + 1}" for i in range(n)]
            + [f"mean_u{j + 1}" for j in range(m)] + [f"se_u{j + 1}" for j in range(m)])
    write_table(os.path.join(out, "summary.csv"), cols, np.hstack([t[:, None], mean_x, se_x, mean_u, se_u]), man)
    write_json(os.path.join(out, "summary.json"), man,
               {"cost": cost.value, "cost_se": cost.std_error, "n_paths": cost.n_paths})
    if args.plot:
        from .plotting import plot_paths
        plot_paths(out, t, exported.X, mean_x, se_x)
    print(f"cost = {cost.value:.10g} +- {cost.std_error:.3g} (SE, {cost.n_paths} paths)")
    return 0


def _parse_checks(text):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if items == ["none"]:
        return ()
    if "all" in items:
        return ALL_CHECKS
    bad = [s for s in items if s not in ALL_CHECKS]
    if bad or not items:
        raise InputError(f"unknown check(s) {bad}; choose from {', '.join(ALL_CHECKS)}, all, none")
    return tuple(items)


def cmd_verify(args):
    checks = _parse_checks(args.checks)
    prob, sha, path = _load(args)
    sol = load_solution(args.solution, prob, sha)
    out = _outdir(args)
    man = _manifest(args, "verify", sha, path, n_paths=args.paths, seed=args.seed)
    man["checks"] = list(checks)
    man["solution"] = args.solution
    if not checks:
        write_json(os.path.join(out, "verification.json"), man, {})
        print("no checks selected")
        return 0
    kw = {}
    if args.paths is not None:
        kw = dict(n_paths=min(args.paths, 2000), perturbation_paths=args.paths, dual_paths=args.paths,
                  constraint_paths=args.paths)
    rep = run_checks(sol.prob, sol, checks=checks, seed=args.seed, **kw)
    write_json(os.path.join(out, "verification.json"), man, rep.to_dict())
    for line in rep.summary_lines():
        print(line)
    if not rep.passed:
        failed = [k for k, c in rep.checks.items() if not c.passed]
        raise VerificationFailure(f"checks failed: {', '.join(failed)}")
    return 0


def _solver_steps(levels, dt, T):
    L = math.lcm(*levels)
    if dt is not None:
        Ns = max(1, int(round(T / dt)))
        bad = [k for k in levels if Ns % k]
        if bad:
            raise DiscretizationMismatch(f"solver grid ({Ns} steps) does not refine tree levels {bad}",
                                         solver_steps=Ns)
        return Ns
    return L * math.ceil(1000 / L)


def cmd_oracle(args):
    prob, sha, path = _load(args)
    k = args.steps
    ScenarioTree(prob, k)                                     # size guard first
    br = 4 if prob.K else 2
    levels = sorted({l for l in ORACLE_LADDER if br ** l <= MAX_SCENARIOS} | {k})
    Ns = _solver_steps(levels, args.dt, prob.grid.T)
    sol = solve_mfslq(prob.with_grid(Ns), keep_operators=False)
    orc = dp_oracle(prob, k)
    cmp_ = compare_with_oracle(sol.prob, sol, ladder=levels, oracle=orc)
    out = _outdir(args)
    man = _manifest(args, "oracle", sha, path)
    man["steps"] = k
    man["solver_steps"] = Ns
    write_json(os.path.join(out, "oracle.json"), man,
               {"cost": orc.cost, "tree": orc.tree, "condition_estimate": orc.condition,
                "n_variables": orc.n_variables, "controls": orc.controls, "states": orc.states})
    for lv in cmp_["levels"]:
        lv.pop("oracle_runtime", None)
    dom = all(l["oracle_cost"] <= l["feedback_cost"] + 1e-12 * max(1.0, abs(l["feedback_cost"]))
              for l in cmp_["levels"])
    body = {"requested_steps": k, "solver_steps": Ns, "solver_J": sol.J, "levels": cmp_["levels"],
            "dt_trend": {"dt": [l["dt"] for l in cmp_["levels"]], "gap": [l["gap"] for l in cmp_["levels"]],
                         "gap_ratios": cmp_["gap_ratios"]},
            "oracle_dominates": dom, "positive_gaps": cmp_["positive"], "ladder_passed": cmp_["passed"],
            "thresholds": cmp_["thresholds"]}
    write_json(os.path.join(out, "comparison.json"), man, body)
    cols = ["n_steps", "dt", "oracle_cost", "feedback_cost", "gap", "relative_gap"]
    write_table(os.path.join(out, "comparison.csv"), cols, [[l[c] for c in cols] for l in cmp_["levels"]], man)
    if args.plot:
        from .plotting import plot_oracle
        plot_oracle(out, cmp_["levels"])
    print(f"oracle cost ({k} steps, {orc.tree['scenarios']} scenarios) = {orc.cost:.10g}")
    for l in cmp_["levels"]:
        print(f"  steps {l['n_steps']:>3}  oracle {l['oracle_cost']:.8f}  feedback {l['feedback_cost']:.8f}"
              f"  gap {l['gap']:.3e}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="mfslq", description="Mean-field stochastic LQ control with jumps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out):
        sp.add_argument("problem", help="problem file (TOML) or bundled name: " + ", ".join(SHIPPED))
        sp.add_argument("--out", default=out, help=f"output directory (default: {out})")

    s = sub.add_parser("solve", help="solve the problem and write the feedback law")
    common(s, "out-solve")
    s.add_argument("--dt", type=float, default=None, help="override the step size")
    s.add_argument("--plot", action="store_true", help="also write PNG figures (needs matplotlib)")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="Monte Carlo simulation under a solution or an open-loop control")
    common(s, "out-simulate")
    s.add_argument("--solution", default=None, help="solution.json written by 'solve'")
    s.add_argument("--open-loop", action="store_true", help="simulate an open-loop control")
    s.add_argument("--control", default=None, help="CSV (t, u_1..u_m) on the grid; default u = 0")
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--dt", type=float, default=None, help="override the step size (open loop only)")
    s.add_argument("--format", choices=("csv", "bin", "json"), default="csv")
    s.add_argument("--export-paths", type=int, default=100, help="number of paths written to disk")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", help="run the verification battery on a solution")
    common(s, "out-verify")
    s.add_argument("solution")
    s.add_argument("--checks", default="all",
                   help="comma list of " + ", ".join(ALL_CHECKS) + "; or all / none")
    s.add_argument("--paths", type=int, default=None, help="Monte Carlo paths for every check")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("oracle", help="scenario-tree oracle and comparison with the feedback law")
    common(s, "out-oracle")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--dt", type=float, default=None, help="solver step size (must refine every tree level)")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_oracle)
    return p


def _report(err, code):
    info = err.to_dict() if isinstance(err, MFSLQError) else {"error": type(err).__name__, "message": str(err)}
    print(json.dumps(to_jsonable(info)), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as e:
        return _report(e, EXIT["verification"])
    except MFSLQError as e:
        return _report(e, EXIT.get(e.category, 3))
    except OSError as e:
        return _report(e, EXIT["input"])
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as e:
        return _report(e, EXIT["solver"])


if __name__ == "__main__":
    sys.exit(main())
