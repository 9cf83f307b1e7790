"""Command-line front end.

Every flag can also be set through an environment variable named
``BLOCKALLOC_<FLAG>`` (upper case, dashes as underscores), e.g.
``BLOCKALLOC_SEED=7`` or ``BLOCKALLOC_MAX_ITERS=200``. Explicit flags win.

Exit codes: 0 success, 1 infeasible instance, 2 input error,
3 joint solver did not converge (result still written), 4 oracle disagreement.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import oracle
from .crunch import crunch_solve
from .jbba import JbbaOptions, jbba_solve
from .matching import bottleneck_via_search, max_cardinality_matching, min_weight_perfect_matching
from .model import (
    Assignment, CostMatrix, InfeasibleInstanceError, Instance, InstanceError, build_cost_matrix, comm_latency,
)
from .sim import DEFAULT_SEED, SCHEMES, SWEEPS, CampaignConfig, random_instance, run_campaign

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4
ENV_PREFIX = "BLOCKALLOC_"


class InputError(Exception):
    pass


def _env(name, default=None, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise InputError(f"{ENV_PREFIX}{name.upper()}: cannot parse {raw!r}") from None


def _flag(raw) -> bool:
    return str(raw).strip().lower() in ("1", "true", "yes", "on")


def _load_json(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _load_instance(path) -> Instance:
    data = _load_json(path)
    try:
        return Instance.from_dict(data)
    except InstanceError as exc:
        raise InputError(f"{path}: {exc}") from None


def _emit(text: str, output) -> None:
    if output:
        with open(output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _breakdown(cm: CostMatrix, devices, bandwidth):
    rows = []
    for l, k in enumerate(devices):
        comp = float(cm.comp_latency[k, l])
        comm = comm_latency(cm.payload_bits, float(bandwidth[k]), float(cm.spectral_eff[k]))
        rows.append({"device": int(k), "depth": l + 1, "comp_s": comp, "comm_s": comm,
                     "total_s": comp + comm, "bandwidth_hz": float(bandwidth[k])})
    return rows


def _verify(cm: CostMatrix, devices, latency, bandwidth) -> str:
    """Independent re-check of constraints and of the reported latency."""
    problems = oracle.validate_assignment(Assignment(tuple(devices)), cm.block_memory, cm.memory_budget)
    recomputed = max(row["total_s"] for row in _breakdown(cm, devices, bandwidth))
    if abs(recomputed - latency) > 1e-9 * max(1.0, abs(latency)):
        problems.append(f"latency mismatch: reported {latency}, recomputed {recomputed}")
    if float(np.sum(bandwidth)) > cm.total_bandwidth * (1 + 1e-9):
        problems.append("bandwidth budget exceeded")
    return "OK" if not problems else "; ".join(problems)


def cmd_solve_ba(args) -> int:
    inst = _load_instance(args.input)
    cm = build_cost_matrix(inst)
    sol = crunch_solve(cm)
    devs = sol.assignment.devices
    bw = np.zeros(cm.shape[0])
    bw[list(devs)] = cm.total_bandwidth / cm.shape[1]
    out = {
        "T_opt": sol.latency,
        "assignment": [{"device": int(k), "depth": l + 1} for l, k in enumerate(devs)],
        "per_device": _breakdown(cm, devs, bw),
    }
    if args.verify:
        out["verify"] = _verify(cm, devs, sol.latency, bw)
    _emit(json.dumps(out, indent=2) + "\n", args.output)
    return EXIT_OK if out.get("verify", "OK") == "OK" else EXIT_CHECK_FAILED


def cmd_solve_jbba(args) -> int:
    inst = _load_instance(args.input)
    cm = build_cost_matrix(inst)
    opts = JbbaOptions(max_iters=args.max_iters, tol=args.tol, step0=args.step0)
    sol = jbba_solve(cm, opts)
    devs = sol.assignment.devices
    out = {
        "T": sol.latency,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "assignment": [{"device": int(k), "depth": l + 1} for l, k in enumerate(devs)],
        "bandwidth_hz": [float(b) for b in sol.bandwidth],
        "per_device": _breakdown(cm, devs, sol.bandwidth),
    }
    if args.verify:
        out["verify"] = _verify(cm, devs, sol.latency, sol.bandwidth)
    _emit(json.dumps(out, indent=2) + "\n", args.output)
    if args.trace:
        sol.write_trace(args.trace)
    if out.get("verify", "OK") != "OK":
        return EXIT_CHECK_FAILED
    return EXIT_OK if sol.converged else EXIT_NOT_CONVERGED


def _campaign_config(args) -> CampaignConfig:
    data = _load_json(args.input) if args.input else {}
    try:
        cfg = CampaignConfig.from_dict(data)
        over = {}
        if args.seed is not None:
            over["rng_seed"] = args.seed
        if args.rounds is not None:
            over["rounds"] = args.rounds
        if args.schemes:
            over["schemes"] = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
        if args.max_iters is not None:
            over["jbba_max_iters"] = args.max_iters
        if args.tol is not None:
            over["jbba_tol"] = args.tol
        return replace(cfg, **over)
    except InstanceError as exc:
        raise InputError(str(exc)) from None


def _sweep_values(raw):
    if not raw:
        return None
    try:
        return [float(v) for v in raw.split(",")]
    except ValueError:
        raise InputError(f"--values: cannot parse {raw!r}") from None


def cmd_simulate(args) -> int:
    cfg = _campaign_config(args)
    report = run_campaign(cfg, sweep=args.sweep, values=_sweep_values(args.values), jobs=args.jobs)
    _emit(report.to_csv(), args.output)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _campaign_config(args)
    report = run_campaign(cfg, jobs=args.jobs)
    _emit(report.to_csv(), args.output)
    return EXIT_OK


def _feasible_instance(rng, kmax, lmax):
    while True:
        K = int(rng.integers(1, kmax + 1))
        L = int(rng.integers(1, min(K, lmax) + 1))
        cm = build_cost_matrix(random_instance(rng, K, L))
        if max_cardinality_matching(cm.admissible) == L:
            return cm


def _check_bottleneck(rng, opts) -> bool:
    cm = _feasible_instance(rng, 8, 6)
    t_ref, _ = oracle.brute_bottleneck(cm)
    sol = crunch_solve(cm)
    t_search, _ = bottleneck_via_search(cm)
    valid = not oracle.validate_assignment(sol.assignment, cm.block_memory, cm.memory_budget)
    return valid and sol.latency == t_ref == t_search


def _check_matching(rng, opts) -> bool:
    K = int(rng.integers(1, 9))
    L = int(rng.integers(1, min(K, 6) + 1))
    w = rng.uniform(-1.0, 1.0, size=(K, L))
    w[rng.random((K, L)) < 0.2] = np.inf
    try:
        ref, _ = oracle.brute_min_sum(w)
    except InfeasibleInstanceError:
        try:
            min_weight_perfect_matching(w)
        except InfeasibleInstanceError:
            return True
        return False
    got = min_weight_perfect_matching(w).total
    return abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def _check_jbba(rng, opts) -> bool:
    cm = _feasible_instance(rng, 6, 4)
    ref = oracle.brute_jbba(cm)[0]
    return jbba_solve(cm, opts).latency <= ref * 1.02


SUITES = {"bottleneck": _check_bottleneck, "matching": _check_matching, "jbba": _check_jbba}


def cmd_oracle_check(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    opts = JbbaOptions(max_iters=args.max_iters, tol=args.tol)
    rng = np.random.default_rng(DEFAULT_SEED if args.seed is None else args.seed)
    agree = 0
    per = {n: 0 for n in names}
    for _ in range(args.instances):
        ok = True
        for n in names:
            hit = SUITES[n](rng, opts)
            per[n] += hit
            ok &= hit
        agree += ok
    lines = [f"{n}: {per[n]}/{args.instances} agree" for n in names]
    lines.append(f"{agree}/{args.instances} agree")
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK if agree == args.instances else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    rng = np.random.default_rng(DEFAULT_SEED if args.seed is None else args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["K", "L", "crunch_ms", "search_ms", "speedup"])
    speedups = []
    for _ in range(args.instances):
        cm = build_cost_matrix(random_instance(rng, args.k, args.l))
        t0 = time.perf_counter()
        t_crunch = crunch_solve(cm).latency
        t1 = time.perf_counter()
        t_search, _ = bottleneck_via_search(cm)
        t2 = time.perf_counter()
        if t_crunch != t_search:
            print(f"bench: solvers disagree ({t_crunch} vs {t_search})", file=sys.stderr)
            return EXIT_CHECK_FAILED
        c_ms, s_ms = 1e3 * (t1 - t0), 1e3 * (t2 - t1)
        speedups.append(s_ms / c_ms)
        w.writerow([args.k, args.l, f"{c_ms:.3f}", f"{s_ms:.3f}", f"{s_ms / c_ms:.2f}"])
    _emit(buf.getvalue(), args.output)
    print(f"median speedup {np.median(speedups):.1f}x over {args.instances} instances", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockalloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_input=True):
        sp.add_argument("--input", required=needs_input and _env("input") is None,
                        default=_env("input"), help="instance or config JSON")
        sp.add_argument("--output", default=_env("output"), help="write here instead of stdout")
        sp.add_argument("--seed", type=int, default=_env("seed", None, int),
                        help=f"random seed (default {DEFAULT_SEED}, or the config's)")
        sp.add_argument("--verify", action="store_true", default=_flag(_env("verify", "0")))

    def solver_opts(sp, max_iters):
        sp.add_argument("--max-iters", type=int, default=_env("max_iters", max_iters, int))
        sp.add_argument("--tol", type=float, default=_env("tol", 1e-4 if max_iters else None, float))

    def campaign(sp):
        sp.add_argument("--jobs", type=int, default=_env("jobs", os.cpu_count() or 1, int))
        sp.add_argument("--rounds", type=int, default=_env("rounds", None, int))
        sp.add_argument("--schemes", default=_env("schemes"),
                        help=f"comma list from {','.join(SCHEMES)}")

    sp = sub.add_parser("solve-ba", help="min-max block assignment, equal bandwidth")
    common(sp)
    sp.set_defaults(func=cmd_solve_ba)

    sp = sub.add_parser("solve-jbba", help="joint block and bandwidth allocation")
    common(sp)
    solver_opts(sp, 5000)
    sp.add_argument("--step0", type=float, default=_env("step0", None, float))
    sp.add_argument("--trace", default=_env("trace"), help="per-iteration CSV log")
    sp.set_defaults(func=cmd_solve_jbba)

    sp = sub.add_parser("simulate", help="Monte-Carlo campaign, optionally swept")
    common(sp, needs_input=False)
    solver_opts(sp, None)
    campaign(sp)
    sp.add_argument("--sweep", choices=sorted(SWEEPS), default=_env("sweep"))
    sp.add_argument("--values", default=_env("values"), help="comma list overriding the sweep grid")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="all schemes on one configuration")
    common(sp, needs_input=False)
    solver_opts(sp, None)
    campaign(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("oracle-check", help="cross-check solvers against brute force")
    common(sp, needs_input=False)
    solver_opts(sp, 5000)
    sp.add_argument("--suite", choices=[*SUITES, "all"], default=_env("suite", "all"))
    sp.add_argument("--instances", type=int, default=_env("instances", 100, int))
    sp.set_defaults(func=cmd_oracle_check)

    sp = sub.add_parser("bench", help="CRUNCH vs linear-search timing")
    common(sp, needs_input=False)
    sp.add_argument("--k", type=int, default=_env("k", 200, int))
    sp.add_argument("--l", type=int, default=_env("l", 100, int))
    sp.add_argument("--instances", type=int, default=_env("instances", 20, int))
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleInstanceError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
