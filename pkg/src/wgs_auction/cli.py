"""Command-line front end.

Exit codes: 0 certified success, 1 certified failure, 2 usage error,
3 nonexistence or cap-breach report.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import auction_exchange as ax
from . import auction_sr as asr
from . import nsw as nswmod
from .fnp import FNP_LOG
from .market_model import (
    EquilibriumReport,
    ExchangeInstance,
    NSWInstance,
    SRInstance,
    load_instance,
    save_json,
)
from . import verify as vf

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NOEQ = 0, 1, 2, 3

log = logging.getLogger("wgs_auction")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    command: str
    instance: str | None = None
    eps: float | None = None
    fnp: str = "auto"
    init: str | None = None
    price_cap: float | None = None
    dummy_eta: float | None = None
    seed: int | None = None
    out: str | None = None
    trace: str | None = None

    def __post_init__(self):
        if self.eps is not None and not 0 < self.eps <= 0.25:
            raise UsageError(f"--eps must lie in (0, 0.25], got {self.eps}")


def _setup_logging() -> None:
    level = os.environ.get("WGS_AUCTION_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load(path: str, kind: str | None = None):
    try:
        inst = load_instance(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read instance {path}: {exc}") from exc
    if kind is not None and inst.kind != kind:
        raise UsageError(f"{path} holds a {inst.kind!r} instance, expected {kind!r}")
    return inst


def _with_eps(inst, eps):
    return inst if eps is None else dataclasses.replace(inst, eps=eps)


def _write_report(obj: dict, path: str | None, timing: bool) -> None:
    if path is None:
        return
    if not timing and "wall_time" in obj:
        # keep report files byte-identical across runs
        obj = dict(obj, wall_time=0.0)
    save_json(obj, path)


def _print_cert(cert: vf.Certificate) -> None:
    print("certificate:", "PASS" if cert else "FAIL")
    for k, v in cert.residuals.items():
        print(f"  {k} = {v:.3e}")
    for f in cert.failures:
        print("  failure:", f)


# commands ------------------------------------------------------------------------

def cmd_solve_exchange(args) -> int:
    cfg = RunConfig("solve-exchange", args.instance, args.eps, args.fnp, dummy_eta=args.dummy_eta,
                    out=args.out, trace=args.trace)
    inst = _with_eps(_load(args.instance, "exchange"), cfg.eps)
    run_inst = inst
    if cfg.dummy_eta is not None:
        # the run is certified at eps(1+eta), so that is the accuracy the precondition must meet
        try:
            run_inst = ax.add_dummy_agent(inst, cfg.dummy_eta, accuracy=inst.eps * (1 + cfg.dummy_eta))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    with ExitStack() as stack:
        trace = stack.enter_context(open(cfg.trace, "w")) if cfg.trace else None
        try:
            report = ax.run_exchange_auction(run_inst, cfg.fnp, max_exponent=args.max_exponent,
                                             debug=args.debug, trace=trace)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    acc = 4 * inst.eps
    if cfg.dummy_eta is not None:
        report = ax.strip_dummy(report, inst)
        acc = 4 * inst.eps * (1 + cfg.dummy_eta)
    _write_report(report.to_json(), cfg.out, args.timing)
    print(f"status: {report.status}  iterations: {report.iterations}  max rounds: {max(report.rounds, default=0)}")
    print("prices:", np.array2string(report.prices.values(), precision=6))
    if report.status != "ok":
        print(report.message)
        return EXIT_NOEQ
    cert = vf.check_approx_equilibrium(inst, report, acc)
    _print_cert(cert)
    return EXIT_OK if cert else EXIT_FAIL


def cmd_solve_sr(args) -> int:
    cfg = RunConfig("solve-sr", args.instance, args.eps, args.fnp, init=args.init, price_cap=args.price_cap,
                    out=args.out, trace=args.trace)
    inst = _with_eps(_load(args.instance, "sr"), cfg.eps)
    with ExitStack() as stack:
        trace = stack.enter_context(open(cfg.trace, "w")) if cfg.trace else None
        try:
            report = asr.run_sr_auction(inst, cfg.fnp, price_cap=cfg.price_cap, debug=args.debug,
                                        trace=trace, init_mode=cfg.init)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    _write_report(report.to_json(), cfg.out, args.timing)
    print(f"status: {report.status}  iterations: {report.iterations}  max rounds: {max(report.rounds, default=0)}")
    print("prices:", np.array2string(report.prices.values(), precision=6))
    if report.status != "ok":
        print(report.message)
        return EXIT_NOEQ
    cert = vf.check_approx_sr(inst, report, 4 * inst.eps, weak_clearing=report.stats.get("weak_clearing", False))
    _print_cert(cert)
    return EXIT_OK if cert else EXIT_FAIL


def cmd_solve_nsw(args) -> int:
    cfg = RunConfig("solve-nsw", args.instance, args.eps, args.fnp, out=args.out)
    inst = _load(args.instance, "nsw")
    try:
        res = nswmod.solve_nsw(inst, cfg.eps, cfg.fnp, debug=args.debug)
    except nswmod.NoEquilibriumError as exc:
        print(str(exc))
        return EXIT_NOEQ
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = res.to_json()
    print("allocation:", res.allocation.counts.tolist())
    print(f"NSW = {res.value:.6g}  upper bound = {res.upper_bound:.6g}")
    code = EXIT_OK
    if args.certify_bruteforce:
        opt, best = nswmod.brute_force_nsw(inst)
        ok = res.value * 2.404 >= opt - 1e-9 and opt <= res.upper_bound + 1e-6
        out["bruteforce"] = {"opt": opt, "allocation": best.tolist(), "certified": ok}
        print(f"OPT = {opt:.6g}  ratio = {opt / res.value if res.value > 0 else float('inf'):.4f}  "
              f"certificate: {'PASS' if ok else 'FAIL'}")
        code = EXIT_OK if ok else EXIT_FAIL
    if not args.timing and out.get("auction"):
        out["auction"]["wall_time"] = 0.0
    _write_report(out, cfg.out, True)
    return code


def cmd_verify(args) -> int:
    if args.eps is not None and not args.eps > 0:
        raise UsageError(f"--eps must be positive, got {args.eps}")
    inst = _load(args.instance)
    try:
        with open(args.report) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read report {args.report}: {exc}") from exc
    if obj.get("kind") == "nsw":
        counts = np.asarray(obj["allocation"], dtype=np.int64)
        try:
            val = nswmod.nsw_value(counts, inst)
        except ValueError as exc:
            print("certificate: FAIL ", exc)
            return EXIT_FAIL
        ok = abs(val - obj["nsw"]) <= 1e-9 * max(1.0, val)
        print(f"NSW = {val:.6g} (reported {obj['nsw']:.6g})  certificate: {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_FAIL
    report = EquilibriumReport.from_json(obj)
    eps = args.eps if args.eps is not None else 4 * inst.eps
    if report.status != "ok":
        print(f"report status {report.status}: {report.message}")
        return EXIT_NOEQ
    if isinstance(inst, ExchangeInstance):
        cert = vf.check_approx_equilibrium(inst, report, eps)
    elif isinstance(inst, SRInstance):
        cert = vf.check_approx_sr(inst, report, eps, weak_clearing=args.weak_clearing)
    else:
        raise UsageError("unsupported instance kind for verify")
    _print_cert(cert)
    return EXIT_OK if cert else EXIT_FAIL


def cmd_properties(args) -> int:
    if args.family not in vf.FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose from {sorted(vf.FAMILIES)}")
    rep = vf.property_suite(args.family, args.trials, args.seed)
    print(f"family {rep.family}: {rep.trials} trials, {rep.violations} violations")
    for k, v in rep.counts.items():
        print(f"  {k}: {v}" + (" (informational)" if k in vf.INFORMATIONAL else ""))
    for ex in rep.counterexamples[:5]:
        print("  counterexample:", json.dumps(ex)[:200])
    return EXIT_OK if rep.violations == 0 else EXIT_FAIL


def cmd_oracle(args) -> int:
    if args.which == "nsw-bruteforce":
        inst = _load(args.instance, "nsw")
        try:
            opt, best = nswmod.brute_force_nsw(inst)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        print(json.dumps({"opt": opt, "allocation": best.tolist()}))
        return EXIT_OK
    inst = _load(args.instance, "sr")
    try:
        p, x, resid = vf.brute_force_fisher_eq(inst)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"prices": p.tolist(), "allocation": x.tolist(), "residual": resid}))
    return EXIT_OK


BENCH_FIELDS = ["instance", "kind", "n", "m", "eps", "status", "iterations", "max_rounds", "round_cap",
                "steps", "outbid_calls", "outbid_passes", "wall_time", "error"]


def bench_rows(paths, eps_list, fnp: str = "auto"):
    """One row per (instance, eps); failures are recorded and the batch goes on."""
    for path in paths:
        for eps in eps_list:
            row = {"instance": Path(path).name, "eps": eps, "error": ""}
            try:
                inst = _with_eps(load_instance(path), eps)
                row.update(kind=inst.kind, n=inst.n, m=inst.m)
                if isinstance(inst, ExchangeInstance):
                    rep = ax.run_exchange_auction(inst, fnp)
                elif isinstance(inst, SRInstance):
                    rep = asr.run_sr_auction(inst, fnp)
                elif isinstance(inst, NSWInstance):
                    rep = nswmod.solve_sr_with_dummy(inst, eps, fnp).report
                else:
                    raise ValueError(f"unsupported kind {inst.kind}")
                row.update(status=rep.status, iterations=rep.iterations, max_rounds=max(rep.rounds, default=0),
                           round_cap=rep.stats["round_cap"], steps=rep.stats["steps"],
                           outbid_calls=rep.stats["outbid_calls"], outbid_passes=rep.stats["outbid_passes"],
                           wall_time=f"{rep.wall_time:.4f}")
            except Exception as exc:  # noqa: BLE001 - bench keeps going
                row.update(status="error", error=str(exc)[:200])
            yield row


def cmd_bench(args) -> int:
    src = Path(args.directory)
    if not src.is_dir():
        raise UsageError(f"{src} is not a directory")
    paths = sorted(str(p) for p in src.glob("*.json"))
    eps_list = [float(e) for e in args.eps.split(",")]
    for e in eps_list:
        RunConfig("bench", eps=e)
    with ExitStack() as stack:
        fh = stack.enter_context(open(args.out, "w", newline="")) if args.out else sys.stdout
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for row in bench_rows(paths, eps_list, args.fnp):
            w.writerow(row)
    return EXIT_OK


def cmd_fnp_debug(args) -> int:
    """Run a solver with contract checks on and dump every FNP call."""
    inst = _with_eps(_load(args.instance), RunConfig("fnp-debug", eps=args.eps).eps)
    FNP_LOG.reset()
    with ExitStack() as stack:
        FNP_LOG.sink = stack.enter_context(open(args.out, "w")) if args.out else sys.stdout
        try:
            if isinstance(inst, ExchangeInstance):
                ax.run_exchange_auction(inst, args.fnp, debug=True)
            elif isinstance(inst, SRInstance):
                asr.run_sr_auction(inst, args.fnp, debug=True)
            else:
                nswmod.solve_sr_with_dummy(inst, inst.eps, args.fnp, debug=True)
        finally:
            FNP_LOG.sink = None
    print(f"{FNP_LOG.total} calls, {len(FNP_LOG.violations)} contract violations", file=sys.stderr)
    return EXIT_OK if not FNP_LOG.violations else EXIT_FAIL


def replay(inst, trace_lines, fnp_choice: str = "auto"):
    """Drive a fresh state through the recorded agent sequence.

    Returns (state, mismatches): every step's potential, surplus and
    exponents are compared with the record.
    """
    if isinstance(inst, ExchangeInstance):
        state = ax.init_state(inst, fnp_choice)
        do_step = ax.step
    elif isinstance(inst, SRInstance):
        state = asr.init_sr(inst, fnp_choice)
        do_step = asr.step
    else:
        raise ValueError("replay needs an exchange or SR instance")
    mismatches = []
    for k, line in enumerate(trace_lines):
        rec = json.loads(line)
        if rec["iteration"] != state.iteration:
            if isinstance(inst, ExchangeInstance):
                ax.recompute_budgets(state)
            state.iteration = rec["iteration"]
        state.round = rec["round"]
        do_step(state, rec["agent"])
        got = (state.potential(), float(state.s.sum()), state.p.exponent.tolist())
        want = (rec["phi"], rec["surplus"], rec["exponents"])
        if not (np.isclose(got[0], want[0], rtol=1e-12, atol=1e-12)
                and np.isclose(got[1], want[1], rtol=1e-12, atol=1e-12) and got[2] == want[2]):
            mismatches.append(k)
    return state, mismatches


def cmd_replay(args) -> int:
    inst = _with_eps(_load(args.instance), RunConfig("replay", eps=args.eps).eps)
    with open(args.trace) as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        state, bad = replay(inst, lines, args.fnp)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"replayed {len(lines)} steps; exponents {state.p.exponent.tolist()}; mismatches {len(bad)}")
    if args.out:
        save_json({"exponents": state.p.exponent.tolist(), "allocation": state.c.tolist(),
                   "surplus": float(state.s.sum()), "mismatches": bad}, args.out)
    return EXIT_OK if not bad else EXIT_FAIL


# parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wgs-auction", description="Ascending-price auctions for WGS markets.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, fnp_choices=("auto", "elasticity", "linear", "cobb-douglas", "gale", "basplc")):
        p.add_argument("--eps", type=float, default=None, help="accuracy in (0, 0.25]; defaults to the instance's")
        p.add_argument("--fnp", default="auto", choices=fnp_choices)
        p.add_argument("--out", default=None)
        p.add_argument("--debug", action="store_true", help="check invariants and FNP contracts after every step")
        p.add_argument("--timing", action="store_true", help="keep wall times in the written report")

    p = sub.add_parser("solve-exchange", help="approximate exchange equilibrium")
    p.add_argument("instance")
    common(p)
    p.add_argument("--dummy-eta", type=float, default=None)
    p.add_argument("--max-exponent", type=int, default=None)
    p.add_argument("--trace", default=None, help="JSON-lines step trace")
    p.set_defaults(func=cmd_solve_exchange)

    p = sub.add_parser("solve-sr", help="approximate spending-restricted Fisher equilibrium")
    p.add_argument("instance")
    common(p)
    p.add_argument("--init", choices=("given", "uniform"), default=None)
    p.add_argument("--price-cap", type=float, default=None)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_solve_sr)

    p = sub.add_parser("solve-nsw", help="Nash social welfare allocation with its upper bound")
    p.add_argument("instance")
    common(p)
    p.add_argument("--certify-bruteforce", action="store_true")
    p.set_defaults(func=cmd_solve_nsw)

    p = sub.add_parser("verify", help="check a report against an instance")
    p.add_argument("instance")
    p.add_argument("report")
    p.add_argument("--eps", type=float, default=None, help="certification accuracy (default 4x the instance eps)")
    p.add_argument("--weak-clearing", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("properties", help="randomized demand-family property checks")
    p.add_argument("--family", required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_properties)

    p = sub.add_parser("oracle", help="reference solvers")
    p.add_argument("which", choices=("nsw-bruteforce", "fisher"))
    p.add_argument("instance")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="CSV of run statistics over a directory of instances")
    p.add_argument("directory")
    p.add_argument("--eps", default="0.2,0.1,0.05", help="comma separated list")
    p.add_argument("--fnp", default="auto")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fnp-debug", help="dump every FNP call of a checked run as JSON lines")
    p.add_argument("instance")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--fnp", default="auto")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fnp_debug)

    p = sub.add_parser("replay", help="re-run a trace and compare every step")
    p.add_argument("instance")
    p.add_argument("trace")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--fnp", default="auto")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
