"""Acceptance criteria 1-11.

Each test stores (passed, detail) in ``conftest.ACCEPTANCE`` before
asserting, so the terminal summary prints one line per criterion even when
an assertion fails.
"""

import csv
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from helpers import exchange_battery, fnp_fuzz, linear_fisher_battery, nsw_battery, sr_battery
from wgs_auction.auction_exchange import (
    InvariantError,
    add_dummy_agent,
    dummy_price_ratio_bound,
    run_exchange_auction,
    strip_dummy,
)
from wgs_auction.auction_sr import run_sr_auction
from wgs_auction.cli import main
from wgs_auction.fnp import FNP_LOG
from wgs_auction.market_model import SRInstance, instance_to_json, load_instance, save_json
from wgs_auction.nsw import brute_force_nsw, solve_nsw
from wgs_auction.verify import (
    brute_force_fisher_eq,
    check_approx_equilibrium,
    check_approx_sr,
    property_suite,
    random_exchange_instance,
)

from pathlib import Path

DEMOS = Path(__file__).resolve().parent.parent / "demos" / "instances"

# Eisenberg-Gale prices of linear_fisher_battery(), computed once with the
# cvxpy oracle and frozen here
EG_PRICES = [
    [1.6213463216759072, 1.8454273752785968, 0.8774082911842201],
    [1.623186568390373, 1.8436330346925909, 1.4448040130750526],
    [1.0674000357002051, 1.1266159224046925],
    [0.9414883212491014, 1.5234709502606634],
    [2.8317197820072164, 3.4778963813171337],
]

# exhaustive optimum of nsw_battery()
NSW_OPT = [
    5.8830835229506855, 4.8664358897431805, 7.863044343033232, 5.292582073554615, 5.6669185909939435,
    5.080890506269819, 1.7932340957730082, 5.260484515441638, 2.770290238805632, 5.147180076269531,
    5.991891142450851, 3.566619956659464, 18.296951892337898, 6.50996319920016, 8.081499680818297,
    6.962900735797556, 7.014693417571059, 3.2019955024132036, 4.603870417172123, 4.277960318065723,
]


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)


# shared runs -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def exchange_runs():
    runs = []
    t0 = time.perf_counter()
    for inst in exchange_battery():
        try:
            rep = run_exchange_auction(inst, debug=True)
            err = None
        except InvariantError as exc:
            rep, err = None, str(exc)
        runs.append((inst, rep, err))
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sr_runs():
    runs = []
    for inst in sr_battery():
        for mode in ("given", "uniform"):
            try:
                rep = run_sr_auction(inst, debug=True, init_mode=mode)
                err = None
            except InvariantError as exc:
                rep, err = None, str(exc)
            runs.append((inst, mode, rep, err))
    return runs


# 1-4 ---------------------------------------------------------------------------------------

def test_criterion_1_four_eps_equilibrium(exchange_runs):
    runs, elapsed = exchange_runs
    failed = []
    for k, (inst, rep, err) in enumerate(runs):
        if err or rep.status != "ok" or not check_approx_equilibrium(inst, rep, 4 * inst.eps):
            failed.append(k)
    ok = not failed and elapsed < 60
    record(1, ok, f"{len(runs) - len(failed)}/{len(runs)} exchange runs certify at 4 eps in {elapsed:.1f} s")
    assert ok, failed


def test_criterion_2_rounds_bound(exchange_runs):
    runs, _ = exchange_runs
    worst = max(rep.stats["max_rounds"] / rep.stats["round_cap"] for _, rep, err in runs if rep is not None)
    bad = [k for k, (_, rep, _) in enumerate(runs) if rep is None or rep.stats["max_rounds"] > rep.stats["round_cap"]]
    record(2, not bad, f"{len(bad)} violations; largest rounds / ceil(2/eps) = {worst:.2f}")
    assert not bad


def test_criterion_3_minimum_price(exchange_runs):
    runs, _ = exchange_runs
    top = max(rep.stats["max_min_exponent"] for _, rep, _ in runs if rep is not None)
    ok = top <= 1 and all(rep is not None for _, rep, _ in runs)
    record(3, ok, f"largest min-exponent seen after any step: {top}")
    assert ok


def test_criterion_4_invariants(exchange_runs, sr_runs):
    runs, _ = exchange_runs
    errors = [err for _, _, err in runs if err] + [err for *_, err in sr_runs if err]
    drift = max([rep.stats.get("max_surplus_drift", 0.0) for _, rep, _ in runs if rep is not None]
                + [rep.stats.get("max_surplus_drift", 0.0) for *_, rep, _ in sr_runs if rep is not None])
    steps = sum(rep.stats["steps"] for _, rep, _ in runs if rep is not None)
    steps += sum(rep.stats["steps"] for *_, rep, _ in sr_runs if rep is not None)
    ok = not errors and drift <= 1e-9
    record(4, ok, f"{steps} checked steps, {len(errors)} violations, max surplus drift {drift:.1e}")
    assert ok, errors[:3]


# 5 -------------------------------------------------------------------------------------------

def test_oracle_prices_reproduce():
    for inst, want in zip(linear_fisher_battery(), EG_PRICES):
        p, _, res = brute_force_fisher_eq(inst)
        assert res <= 1e-6
        assert p == pytest.approx(want, rel=1e-6)


def test_criterion_5_oracle_agreement():
    t0 = time.perf_counter()
    worst = 1.0
    bad = []
    for k, (inst, want) in enumerate(zip(linear_fisher_battery(), EG_PRICES)):
        rep = run_sr_auction(inst, debug=True, init_mode="given")
        ratio = rep.prices.values() / np.asarray(want)
        dev = float(max(ratio.max(), 1 / ratio.min()))
        worst = max(worst, dev)
        if rep.status != "ok" or dev > 1 + 5 * inst.eps:
            bad.append(k)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10
    record(5, ok, f"worst price factor {worst:.4f} (limit {1 + 5 * 0.02:.2f}) in {elapsed:.1f} s")
    assert ok, bad


# 6 ---------------------------------------------------------------------------------------

def test_criterion_6_properties():
    counts, drops = {}, {}
    for fam in ("linear", "ces", "cobb_douglas", "conic", "basplc"):
        rep = property_suite(fam, trials=1000, seed=2024)
        counts[fam], drops[fam] = rep.violations, rep.spending_drops
    ok = not any(counts.values())
    record(6, ok, "violations per 1000 trials: " + ", ".join(f"{k} {v}" for k, v in counts.items())
           + f"; gale spending drops (not counted) basplc {drops['basplc']}")
    assert ok, counts


# 7 ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fnp_log(exchange_runs, sr_runs):
    # solver runs above went through the checked path; add gale-routed
    # auctions and direct fuzzing per routine
    rng = np.random.default_rng(77)
    for _ in range(6):
        inst = random_exchange_instance(rng, 0.1, n_max=4, m_max=4, families=("ces", "cobb_douglas"))
        run_exchange_auction(inst, fnp_choice="gale", debug=True)
    fuzz_bad = []
    for k, routine in enumerate(("linear", "cobb-douglas", "elasticity", "gale", "basplc")):
        fuzz_bad += fnp_fuzz(routine, 2000, seed=300 + k)
    return FNP_LOG, fuzz_bad


def test_criterion_7_fnp_contracts(fnp_log):
    log, fuzz_bad = fnp_log
    total = log.total
    ratios = dict(log.max_steps_ratio)
    ok = (total >= 10_000 and not log.violations and not fuzz_bad
          and ratios.get("basplc", 0) <= 1 and ratios.get("elasticity", 0) <= 1)
    per = ", ".join(f"{k} {v}" for k, v in sorted(log.calls.items()))
    literal = log.over_pooled == 0
    detail = (f"{total} calls ({per}); {len(log.violations)} contract violations; "
              f"basplc steps <= segments; elasticity bumps <= m ceil(f); gale residual <= 1e-6; "
              f"literal ceil(m f) bump bound {'held' if literal else f'FAILS on {log.over_pooled} calls'} "
              f"(unattainable for fractional f, see ledger)")
    record(7, ok and literal, detail)
    assert ok, log.violations[:3] + fuzz_bad[:3]


@pytest.mark.xfail(strict=True, reason="ceil(m f) is below the m ceil(f) bumps an empty-handed agent needs "
                                       "when f is fractional")
def test_criterion_7_literal_elasticity_bound(fnp_log):
    log, _ = fnp_log
    assert log.over_pooled == 0


# 8 -------------------------------------------------------------------------------------------

def test_criterion_8_sr_certification(sr_runs, capsys):
    given = weak = 0
    bad = []
    for k, (inst, mode, rep, err) in enumerate(sr_runs):
        if err or rep.status != "ok":
            bad.append((k, mode, err or rep.status))
            continue
        cert = check_approx_sr(inst, rep, 4 * inst.eps, weak_clearing=mode == "uniform")
        if not cert:
            bad.append((k, mode, cert.failures))
        elif mode == "given":
            given += 1
        else:
            weak += 1
    noeq = load_instance(DEMOS / "cobbdouglas-noeq.json")
    breach = run_sr_auction(noeq).status == "cap_breach"
    code = main(["solve-sr", str(DEMOS / "cobbdouglas-noeq.json"), "--eps", "0.1"])
    capsys.readouterr()
    n = len(sr_runs) // 2
    ok = not bad and breach and code == 3
    record(8, ok, f"given {given}/{n} exact, uniform {weak}/{n} weak clearing; "
                  f"Cobb-Douglas instance cap breach {breach}, exit code {code}")
    assert ok, bad[:3]


# 9 ---------------------------------------------------------------------------------------------

def test_nsw_oracle_reproduces():
    for inst, want in zip(nsw_battery(), NSW_OPT):
        assert brute_force_nsw(inst)[0] == pytest.approx(want, rel=1e-12)


def test_criterion_9_nsw_factor():
    t0 = time.perf_counter()
    worst_ratio, bad = 1.0, []
    for k, (inst, opt) in enumerate(zip(nsw_battery(), NSW_OPT)):
        res = solve_nsw(inst)
        ratio = opt / res.value if res.value > 0 else (1.0 if opt == 0 else math.inf)
        worst_ratio = max(worst_ratio, ratio)
        if ratio > 2.404 or opt > res.upper_bound + 1e-6:
            bad.append(k)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 120
    record(9, ok, f"worst OPT/NSW {worst_ratio:.4f} (limit 2.404), OPT <= bound on all 20, {elapsed:.1f} s")
    assert ok, bad


# 10 ---------------------------------------------------------------------------------------------

def test_criterion_10_dummy_agent():
    rng = np.random.default_rng(2718)
    eta, eps = 1.0, 0.05
    worst, bad = 0.0, []
    for k in range(5):
        inst = random_exchange_instance(rng, eps, n_max=5, m_max=3)
        aug = add_dummy_agent(inst, eta, accuracy=eps * (1 + eta))
        rep = run_exchange_auction(aug, debug=True)
        p = rep.prices.values()
        bound = dummy_price_ratio_bound(inst, eta, eps)
        worst = max(worst, (p.max() / p.min()) / bound)
        out = strip_dummy(rep, inst)
        if p.max() / p.min() > bound or not check_approx_equilibrium(inst, out, 4 * eps * (1 + eta)):
            bad.append(k)
    record(10, not bad, f"largest price ratio / bound {worst:.3f}; stripped reports certify at 4 eps(1+eta)")
    assert not bad


# 11 ---------------------------------------------------------------------------------------------

def test_criterion_11_step_trend(tmp_path):
    src = tmp_path / "bench"
    src.mkdir()
    for k, inst in enumerate(exchange_battery(10)):
        save_json(instance_to_json(inst), src / f"ex{k:02d}.json")
    out = tmp_path / "bench.csv"
    assert main(["bench", str(src), "--eps", "0.2,0.1,0.05", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    totals = {}
    for r in rows:
        assert r["status"] == "ok", r
        assert int(r["max_rounds"]) <= int(r["round_cap"])
        totals[float(r["eps"])] = totals.get(float(r["eps"]), 0) + int(r["outbid_passes"])
    seq = [totals[e] for e in (0.2, 0.1, 0.05)]
    ok = seq[0] < seq[1] < seq[2]
    record(11, ok, f"outbid passes at eps 0.2/0.1/0.05: {seq[0]}/{seq[1]}/{seq[2]}")
    assert ok
