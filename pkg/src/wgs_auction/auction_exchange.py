"""Ascending-price auction for exchange markets.

Every agent starts owning nothing; all goods are unsold at price 1. Agents
with positive surplus take turns: each calls FindNewPrices, then outbids
low-price holders for whatever extra it wants at the high price (1+eps)p.
When a good has neither unsold nor low-price units left, its price rises by
a factor (1+eps) and the iteration ends. The auction stops once the total
surplus is at most 3 eps p.e, which certifies a 4 eps-approximate
equilibrium.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .demand import CobbDouglas, dominating_bundle
from .fnp import FNP_LOG, call_fnp, check_fnp_contract, select_fnp
from .market_model import (
    EquilibriumReport,
    ExchangeInstance,
    IndividualPrice,
    PriceVector,
    max_exponent_default,
    validate_instance,
)


class InvariantError(AssertionError):
    pass


@dataclass
class AuctionState:
    inst: ExchangeInstance
    eps: float
    p: PriceVector
    pind: np.ndarray  # (n, m) individual price values
    pcap: np.ndarray  # (n, m) at-cap flags, authoritative for H_i
    c: np.ndarray  # (n, m) owned bundles
    w: np.ndarray  # unsold
    l: np.ndarray  # sold at the low price
    h: np.ndarray  # sold at the high price
    b: np.ndarray
    s: np.ndarray
    routines: list
    iteration: int = 0
    round: int = 0
    outbid_calls: int = 0
    outbid_passes: int = 0
    steps: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.c.shape[1]

    @property
    def supply(self) -> np.ndarray:
        return self.inst.supply

    def individual(self, i: int) -> IndividualPrice:
        return IndividualPrice(self.pind[i].copy(), self.pcap[i].copy())

    def paid(self) -> np.ndarray:
        """Per-unit price each agent pays for each good it owns."""
        return np.where(self.pcap, self.p.caps()[None, :], self.p.values()[None, :])

    def potential(self) -> float:
        return float(np.sum(np.where(self.pcap, self.c, 0.0) * self.p.caps()[None, :]))


def init_state(inst: ExchangeInstance, fnp_choice: str = "auto") -> AuctionState:
    n, m = inst.n, inst.m
    p = PriceVector.ones(m, inst.eps)
    e = inst.supply
    b = inst.endowments @ p.values()
    return AuctionState(
        inst=inst,
        eps=inst.eps,
        p=p,
        pind=np.tile(p.values(), (n, 1)),
        pcap=np.zeros((n, m), dtype=bool),
        c=np.zeros((n, m)),
        w=e.copy(),
        l=np.zeros(m),
        h=np.zeros(m),
        b=b.copy(),
        s=b.copy(),
        routines=[select_fnp(spec, fnp_choice) for spec in inst.demands],
    )


def _money_tol(state) -> float:
    return 1e-9 * max(1.0, float(np.dot(state.p.values(), state.supply)))


def recompute_budgets(state: AuctionState) -> None:
    """Budgets from current prices; surpluses rebuilt from holdings."""
    b_new = state.inst.endowments @ state.p.values()
    tracked = state.s + (b_new - state.b)
    state.b = b_new
    fresh = b_new - np.sum(state.c * state.paid(), axis=1)
    drift = float(np.max(np.abs(tracked - fresh), initial=0.0))
    state.stats["max_surplus_drift"] = max(state.stats.get("max_surplus_drift", 0.0), drift)
    if drift > _money_tol(state):
        raise InvariantError(f"surplus drift {drift:.3e}")
    state.s = fresh


def _snap_tol(state, j: int) -> float:
    return 1e-12 * state.supply[j]


def outbid(state: AuctionState, i: int, j: int, t: float, order=None) -> float:
    """Agent i takes up to t of good j: unsold units first, then low-price holders."""
    if not state.pcap[i, j]:
        raise InvariantError("outbid called without the cap flag")
    state.outbid_calls += 1
    if t <= 0:
        return 0.0
    pj, qj = state.p.value(j), state.p.cap(j)
    snap = _snap_tol(state, j)
    moved = 0.0
    if state.w[j] > 0:
        tau = min(state.w[j], t)
        if state.w[j] - tau <= snap:
            tau = state.w[j]
        state.w[j] = 0.0 if tau == state.w[j] else state.w[j] - tau
        state.c[i, j] += tau
        state.h[j] += tau
        state.s[i] -= tau * qj
        t -= tau
        moved += tau
    victims = range(state.n) if order is None else order
    for k in victims:
        if t <= 0 or state.l[j] <= 0:
            break
        if k == i or state.pcap[k, j] or state.c[k, j] <= 0:
            continue
        state.outbid_passes += 1
        tau = min(state.c[k, j], t)
        if state.c[k, j] - tau <= snap:
            tau = state.c[k, j]
        state.c[k, j] -= tau
        if state.c[k, j] <= snap:
            state.c[k, j] = 0.0
        state.c[i, j] += tau
        state.s[k] += tau * pj
        state.s[i] -= tau * qj
        state.l[j] -= tau
        state.h[j] += tau
        t -= tau
        moved += tau
    _settle_low(state, j)
    return moved


def _settle_low(state: AuctionState, j: int) -> None:
    # float residue in l_j must not block a price increase
    if state.l[j] <= _snap_tol(state, j):
        low = ~state.pcap[:, j]
        state.l[j] = float(np.sum(state.c[low, j]))


def _raise_price(state: AuctionState, j: int) -> None:
    state.p.exponent[j] += 1
    pj = state.p.value(j)
    state.pind[:, j] = pj
    state.pcap[:, j] = False
    state.w[j] = 0.0
    state.l[j] = float(state.c[:, j].sum())
    state.h[j] = 0.0


def step(state: AuctionState, i: int, debug: bool = False, order=None, trace=None) -> bool:
    inst = state.inst
    spec = inst.demands[i]
    routine = state.routines[i]
    caps = state.p.caps()
    p_i = state.individual(i)
    c_i = state.c[i].copy()
    res = call_fnp(spec, routine, p_i, caps, state.eps, c_i, state.b[i])
    if debug:
        problems = check_fnp_contract(spec, routine, p_i, caps, state.eps, c_i, state.b[i], res)
        FNP_LOG.record(spec, routine, problems, res.steps, state.m)
        if problems:
            raise InvariantError(f"FNP contract: {problems}")
    s_before, phi_before = state.s[i], state.potential()
    cases = []
    y = res.bundle
    for j in range(state.m):
        new_cap = bool(res.prices.at_cap[j])
        if new_cap and not state.pcap[i, j]:
            # case 1: what i holds is now paid at the high price
            moved = state.c[i, j]
            state.s[i] -= moved * (caps[j] - state.p.value(j))
            state.l[j] -= moved
            state.h[j] += moved
            state.pcap[i, j] = True
            _settle_low(state, j)
            outbid(state, i, j, y[j] - state.c[i, j], order)
            cases.append(1)
        elif new_cap:
            outbid(state, i, j, y[j] - state.c[i, j], order)
            cases.append(2)
        else:
            cases.append(3)
    state.pind[i] = res.prices.values
    state.pcap[i] = res.prices.at_cap
    state.steps += 1
    raised = []
    for j in range(state.m):
        if state.w[j] <= 0 and state.l[j] <= 0:
            _raise_price(state, j)
            raised.append(j)
    if debug:
        phi_gain = state.potential() - phi_before
        if not raised and phi_gain < s_before - 2.25 * state.eps * state.b[i] - _money_tol(state):
            state.stats["potential_claim_misses"] = state.stats.get("potential_claim_misses", 0) + 1
        check_invariants(state, budgets_current=not raised)
    if trace is not None:
        trace.write(json.dumps({
            "iteration": state.iteration, "round": state.round, "agent": i, "cases": cases,
            "phi": state.potential(), "surplus": float(state.s.sum()), "raised": raised,
            "exponents": state.p.exponent.tolist(),
        }) + "\n")
    return bool(raised)


def check_invariants(state: AuctionState, budgets_current: bool = True) -> None:
    """Invariants (a)-(d) plus the minimum-price lemma; raises on violation."""
    inst = state.inst
    e = inst.supply
    tol = 1e-9 * max(1.0, float(e.max()))
    low = ~state.pcap
    l_fresh = np.sum(np.where(low, state.c, 0.0), axis=0)
    h_fresh = np.sum(np.where(state.pcap, state.c, 0.0), axis=0)
    errs = []
    if np.any(np.abs(state.w + state.l + state.h - e) > tol):
        errs.append("(a) w + l + h != e")
    if np.any(np.abs(state.l - l_fresh) > tol) or np.any(np.abs(state.h - h_fresh) > tol):
        errs.append("(a) tracked l/h disagree with holdings")
    if np.any(np.abs(state.c.sum(axis=0) + state.w - e) > tol):
        errs.append("(a) goods not conserved")
    if np.any(state.w + state.l <= 0):
        errs.append("(a) w + l = 0 after a step")
    if np.any((state.w > 0) & (state.p.exponent > 0)):
        errs.append("(b) unsold good with raised price")
    prev_w = state.stats.get("_w")
    if prev_w is not None and np.any(state.w > prev_w + tol):
        errs.append("(b) unsold amount increased")
    state.stats["_w"] = state.w.copy()
    p = state.p.values()
    caps = state.p.caps()
    if np.any(state.pind < p[None, :] * (1 - 1e-15)) or np.any(state.pind > caps[None, :]):
        errs.append("(c) individual prices outside [p, (1+eps)p]")
    if np.any(state.pcap & (state.pind != caps[None, :])):
        errs.append("(c) flagged price differs from the cap")
    if np.any(~state.pcap & (state.pind >= caps[None, :] * (1 - 1e-12))):
        errs.append("(c) price at cap without flag")
    if budgets_current and np.any(np.abs(state.b - inst.endowments @ p) > _money_tol(state)):
        errs.append("(c) budget out of date")
    for i, spec in enumerate(inst.demands):
        if dominating_bundle(spec, state.pind[i], state.b[i], state.c[i]) is None:
            errs.append(f"(c) agent {i} holds a bundle it does not demand")
    fresh = state.b - np.sum(state.c * state.paid(), axis=1)
    drift = float(np.max(np.abs(fresh - state.s)))
    state.stats["max_surplus_drift"] = max(state.stats.get("max_surplus_drift", 0.0), drift)
    if drift > _money_tol(state):
        errs.append(f"(d) surplus drift {drift:.3e}")
    if int(state.p.exponent.min()) > 1:
        errs.append("minimum price exceeds (1+eps)")
    if errs:
        raise InvariantError("; ".join(errs))


def run_exchange_auction(inst: ExchangeInstance, fnp_choice: str = "auto", max_exponent: int | None = None,
                         debug: bool = False, trace=None, victim_order: str = "index",
                         seed: int | None = None) -> EquilibriumReport:
    problems = validate_instance(inst)
    if problems:
        raise ValueError("invalid instance: " + "; ".join(problems))
    t0 = time.perf_counter()
    eps = inst.eps
    if max_exponent is None:
        max_exponent = max_exponent_default(eps)
    state = init_state(inst, fnp_choice)
    rng = np.random.default_rng(seed) if victim_order == "random" else None
    round_cap = math.ceil(2 / eps)
    rounds: list[int] = []
    outbid_per_iter: list[int] = []
    min_exp_seen = 0
    status, message = "ok", ""
    guard = 50 * round_cap + 100
    while True:
        recompute_budgets(state)
        state.iteration += 1
        state.round = 0
        passes0 = state.outbid_passes
        calls0 = state.outbid_calls
        raised = False
        finished = False
        while not raised:
            pe = float(np.dot(state.p.values(), inst.supply))
            if state.s.sum() <= 3 * eps * pe:
                finished = True
                break
            state.round += 1
            if state.round > guard:
                status, message = "aborted", f"no price increase after {guard} rounds"
                finished = True
                break
            for i in range(state.n):
                if state.s[i] <= 0:
                    continue
                order = None if rng is None else rng.permutation(state.n)
                raised = step(state, i, debug=debug, order=order, trace=trace)
                min_exp_seen = max(min_exp_seen, int(state.p.exponent.min()))
                if raised:
                    break
        rounds.append(state.round)
        outbid_per_iter.append((state.outbid_passes - passes0, state.outbid_calls - calls0))
        if finished:
            break
        if int(state.p.exponent.max()) > max_exponent:
            status, message = "max_exponent", f"price exponent exceeded {max_exponent}"
            break
    state.stats.pop("_w", None)
    p = state.p.values()
    certs = np.zeros_like(state.c)
    for i, spec in enumerate(inst.demands):
        z = dominating_bundle(spec, state.pind[i], state.b[i], state.c[i])
        certs[i] = z if z is not None else np.nan
    leftover = float(np.dot(p, inst.supply - state.c.sum(axis=0)))
    stats = dict(state.stats)
    stats.update({
        "steps": state.steps,
        "outbid_calls": state.outbid_calls,
        "outbid_passes": state.outbid_passes,
        "outbid_per_iteration": outbid_per_iter,
        "round_cap": round_cap,
        "max_rounds": max(rounds) if rounds else 0,
        "max_min_exponent": min_exp_seen,
        "fnp": list(state.routines),
    })
    return EquilibriumReport(
        prices=state.p.copy(),
        individual=[state.individual(i) for i in range(state.n)],
        allocation=state.c.copy(),
        certificates=certs,
        budgets=state.b.copy(),
        surplus=float(state.s.sum()),
        leftover=leftover,
        iterations=state.iteration,
        rounds=rounds,
        wall_time=time.perf_counter() - t0,
        status=status,
        kind="exchange",
        message=message,
        stats=stats,
    )


# dummy agent -----------------------------------------------------------------

def dummy_precondition(m: int, eps: float, eta: float) -> list[str]:
    out = []
    k = eps * (1 + eps) * m
    if not 0 < eta <= 1:
        out.append(f"eta must lie in (0, 1], got {eta}")
    if k > 0.5:
        out.append(f"eps(1+eps)m = {k:.4f} exceeds 1/2")
    if not eta / (1 + eta) > k:
        out.append(f"eta/(1+eta) = {eta / (1 + eta):.4f} must exceed eps(1+eps)m = {k:.4f}")
    return out


def add_dummy_agent(inst: ExchangeInstance, eta: float, accuracy: float | None = None) -> ExchangeInstance:
    """Append an agent owning eta*e with uniform Cobb-Douglas demand.

    ``accuracy`` is the eps at which the result will be certified; it
    defaults to the instance's eps.
    """
    acc = inst.eps if accuracy is None else accuracy
    problems = dummy_precondition(inst.m, acc, eta)
    if problems:
        raise ValueError("dummy agent precondition: " + "; ".join(problems))
    e = np.vstack([inst.endowments, eta * inst.supply])
    demands = list(inst.demands) + [CobbDouglas(np.full(inst.m, 1.0 / inst.m))]
    return ExchangeInstance(e, demands, inst.eps)


def dummy_price_ratio_bound(inst: ExchangeInstance, eta: float, eps: float) -> float:
    m = inst.m
    e = inst.supply
    denom = eta - eps * m * (1 + eps) * (1 + eta)
    return (1 + eps) * m / denom * float(e.max() / e.min())


def strip_dummy(report: EquilibriumReport, original: ExchangeInstance) -> EquilibriumReport:
    """Drop the last agent; holdings above the original supply are trimmed.

    Trimming takes from the largest holder first, so every agent still owns
    a sub-bundle of its certificate.
    """
    n = original.n
    c = report.allocation[:n].copy()
    e = original.supply
    for j in range(original.m):
        excess = c[:, j].sum() - e[j]
        while excess > 0:
            k = int(np.argmax(c[:, j]))
            take = min(excess, c[k, j])
            c[k, j] -= take
            excess -= take
    p = report.prices.values()
    stats = dict(report.stats)
    stats["dummy_holdings"] = report.allocation[n:].tolist()
    return EquilibriumReport(
        prices=report.prices.copy(),
        individual=[ip.copy() for ip in report.individual[:n]],
        allocation=c,
        certificates=report.certificates[:n].copy(),
        budgets=original.endowments @ p,
        surplus=report.surplus,
        leftover=float(np.dot(p, e - c.sum(axis=0))),
        iterations=report.iterations,
        rounds=list(report.rounds),
        wall_time=report.wall_time,
        status=report.status,
        kind="exchange",
        message=report.message,
        stats=stats,
    )
