"""Auction for spending-restricted (SR) equilibria in Fisher markets.

Budgets are fixed. Only a_j = min(1, t_j/p_j) of good j is sold, so a price
increase above t_j is followed by a trim that takes the excess back from the
holders. Agents bid on their relative surplus: what their optimal bundle at
their own prices costs minus what they currently pay.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .auction_exchange import InvariantError, _settle_low, _snap_tol, outbid
from .demand import GaleBASPLC, Linear, demand, dominating_bundle, interest, mbb_set
from .fnp import FNP_LOG, call_fnp, check_fnp_contract, select_fnp
from .market_model import (
    EquilibriumReport,
    IndividualPrice,
    PriceVector,
    SRInit,
    SRInstance,
    validate_instance,
)

log = logging.getLogger(__name__)

FALLBACK_CAP_FACTOR = 1e6


def available_amount(p_j: float, t_j: float) -> float:
    if not p_j > 0:
        raise ValueError("nonpositive price")
    return min(1.0, t_j / p_j)


@dataclass
class SRAuctionState:
    inst: SRInstance
    eps: float
    t: np.ndarray  # effective caps
    p: PriceVector
    pind: np.ndarray
    pcap: np.ndarray
    c: np.ndarray
    w: np.ndarray  # unsold, nonzero only under the uniform start
    l: np.ndarray
    h: np.ndarray
    b: np.ndarray
    s: np.ndarray  # relative surpluses
    desired: np.ndarray  # p^(i) . x^(i)
    x: np.ndarray  # cached optimal bundles
    routines: list
    weak: bool = False
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
        return np.ones(self.m)

    def available(self) -> np.ndarray:
        return np.minimum(1.0, self.t / self.p.values())

    def individual(self, i: int) -> IndividualPrice:
        return IndividualPrice(self.pind[i].copy(), self.pcap[i].copy())

    def paid(self) -> np.ndarray:
        return np.where(self.pcap, self.p.caps()[None, :], self.p.values()[None, :])

    def spent(self) -> np.ndarray:
        return np.sum(self.c * self.paid(), axis=1)

    def potential(self) -> float:
        return float(np.sum(np.where(self.pcap, self.c, 0.0) * self.p.caps()[None, :]))


def _money_tol(state: SRAuctionState) -> float:
    return 1e-9 * max(1.0, float(state.b.sum()))


# initialisation ---------------------------------------------------------------------

def _spread_linear(v, p, b):
    """The demanded bundle of a linear agent that buys equal amounts of
    every maximum bang-per-buck good."""
    S = mbb_set(v, p)
    x = np.zeros(len(v))
    if b > 0 and S.any():
        x[S] = b / p[S].sum()
    return x


def _interest_weight(spec) -> np.ndarray:
    if isinstance(spec, Linear):
        return spec.v
    if isinstance(spec, GaleBASPLC):
        return np.array([u[0] if len(u) else 0.0 for u in spec.rates])
    return interest(spec).astype(float)


def overdemand_init(inst: SRInstance, max_halvings: int = 200) -> SRInit:
    """Search for small prices p̄ < t at which the agents together demand at
    least one unit of every good.

    Prices are λπ with π_j the largest interest weight any agent has for
    good j (so every good is a best buy for somebody with linear demand),
    falling back to uniform π; λ is halved until demand covers supply.
    """
    t = inst.effective_caps()
    weights = np.array([_interest_weight(s) for s in inst.demands])
    top = weights.max(axis=0)
    bases = [top] if np.all(top > 0) else []
    bases.append(np.ones(inst.m))
    for pi in bases:
        lam = 0.5 * float(np.min(t / pi))
        for _ in range(max_halvings):
            pbar = lam * pi
            x = np.array([
                _spread_linear(s.v, pbar, b) if isinstance(s, Linear) else demand(s, pbar, b).bundle
                for s, b in zip(inst.demands, inst.budgets)
            ])
            if np.all(x.sum(axis=0) >= 1.0):
                return SRInit(pbar, x)
            lam *= 0.5
    raise ValueError("no small prices found at which the agents overdemand every good; use the uniform start")


def _split_supply(x: np.ndarray) -> np.ndarray:
    """c <= x with column sums exactly one, filling agents in index order."""
    c = np.zeros_like(x)
    for j in range(x.shape[1]):
        need = 1.0
        for i in range(x.shape[0]):
            take = min(x[i, j], need)
            c[i, j] = take
            need -= take
            if need <= 0:
                break
    return c


def init_sr(inst: SRInstance, fnp_choice: str = "auto", mode: str | None = None) -> SRAuctionState:
    """Initial state for the given-prices start or the uniform empty start.

    ``mode`` defaults to "given" when the instance carries initial prices
    and to "uniform" otherwise. A given start without initial prices runs
    :func:`overdemand_init`.
    """
    n, m, eps = inst.n, inst.m, inst.eps
    b = inst.budgets.astype(float)
    t = inst.effective_caps()
    mode = mode or ("given" if inst.init is not None else "uniform")
    routines = [select_fnp(spec, fnp_choice) for spec in inst.demands]
    if mode == "uniform":
        base = np.minimum(eps / m * b.sum(), t)
        p = PriceVector(base, np.zeros(m, dtype=np.int64), eps)
        c = np.zeros((n, m))
        w = np.ones(m)
        weak = True
    elif mode == "given":
        init = inst.init if inst.init is not None else overdemand_init(inst)
        base = init.prices.astype(float)
        if np.any(base >= t):
            raise ValueError("initial prices must lie below the caps")
        p = PriceVector(base, np.zeros(m, dtype=np.int64), eps)
        if init.allocation is not None:
            x0 = init.allocation
            if x0.shape != (n, m):
                raise ValueError(f"initial allocation has shape {x0.shape}, expected {(n, m)}")
            for i, spec in enumerate(inst.demands):
                if dominating_bundle(spec, base, b[i], x0[i]) is None:
                    raise ValueError(f"initial bundle of agent {i} is not demanded at the initial prices")
        else:
            x0 = np.array([demand(s, base, bi).bundle for s, bi in zip(inst.demands, b)])
        short = np.flatnonzero(x0.sum(axis=0) < 1.0 - 1e-12)
        if short.size:
            raise ValueError(f"initial bundles underdemand good {int(short[0])}: "
                             f"total {x0[:, short[0]].sum():.6g} < 1")
        c = _split_supply(x0)
        w = np.zeros(m)
        weak = False
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    pv = p.values()
    desired = np.array([demand(s, pv, bi).spend for s, bi in zip(inst.demands, b)])
    spent = c @ pv
    return SRAuctionState(
        inst=inst, eps=eps, t=t, p=p,
        pind=np.tile(pv, (n, 1)),
        pcap=np.zeros((n, m), dtype=bool),
        c=c, w=w,
        l=c.sum(axis=0), h=np.zeros(m),
        b=b, s=desired - spent, desired=desired,
        x=np.array([dominating_bundle(s, pv, bi, ci) for s, bi, ci in zip(inst.demands, b, c)]),
        routines=routines, weak=weak,
    )


# price increase and trimming ----------------------------------------------------------

def trim_after_increase(state: SRAuctionState, j: int) -> float:
    """Bring the amount sold of good j down to a_j at its new price.

    Takes from the largest holder first (lowest index on ties) and refunds
    at the new low price. Returns the amount removed.
    """
    pj = state.p.value(j)
    a = min(1.0, state.t[j] / pj)
    excess = float(state.c[:, j].sum()) + state.w[j] - a
    removed = 0.0
    while excess > _snap_tol(state, j):
        k = int(np.argmax(state.c[:, j]))
        tau = min(excess, state.c[k, j])
        state.c[k, j] -= tau
        state.s[k] += tau * pj
        excess -= tau
        removed += tau
    state.l[j] = float(state.c[:, j].sum())
    state.h[j] = 0.0
    return removed


def _raise_price(state: SRAuctionState, j: int) -> None:
    state.p.exponent[j] += 1
    pj = state.p.value(j)
    moved = state.pind[:, j] != pj
    state.pind[:, j] = pj
    state.pcap[:, j] = False
    state.w[j] = 0.0
    state.l[j] = float(state.c[:, j].sum())
    state.h[j] = 0.0
    trim_after_increase(state, j)
    # agents whose own price for j rose re-optimise; their holdings of j are zero
    for i in np.flatnonzero(moved):
        spec = state.inst.demands[i]
        new = demand(spec, state.pind[i], state.b[i]).spend
        state.s[i] += new - state.desired[i]
        state.desired[i] = new
        state.x[i] = dominating_bundle(spec, state.pind[i], state.b[i], state.c[i])


def step(state: SRAuctionState, i: int, debug: bool = False, trace=None) -> list[int]:
    inst = state.inst
    spec = inst.demands[i]
    routine = state.routines[i]
    caps = state.p.caps()
    p_i = state.individual(i)
    c_i = state.c[i].copy()
    b_i = state.b[i]
    res = call_fnp(spec, routine, p_i, caps, state.eps, c_i, b_i)
    if debug:
        problems = check_fnp_contract(spec, routine, p_i, caps, state.eps, c_i, b_i, res)
        FNP_LOG.record(spec, routine, problems, res.steps, state.m)
        if problems:
            raise InvariantError(f"FNP contract: {problems}")
    y = res.bundle
    want = float(np.dot(res.prices.values, y))
    if want < state.desired[i] - 1e-9 * max(1.0, b_i):
        state.stats["spending_drops"] = state.stats.get("spending_drops", 0) + 1
    s_before, phi_before = state.s[i], state.potential()
    cases = []
    for j in range(state.m):
        if res.prices.at_cap[j] and not state.pcap[i, j]:
            moved = state.c[i, j]
            state.s[i] -= moved * (caps[j] - state.p.value(j))
            state.l[j] -= moved
            state.h[j] += moved
            state.pcap[i, j] = True
            _settle_low(state, j)
            outbid(state, i, j, y[j] - state.c[i, j])
            cases.append(1)
        elif res.prices.at_cap[j]:
            outbid(state, i, j, y[j] - state.c[i, j])
            cases.append(2)
        else:
            cases.append(3)
    state.pind[i] = res.prices.values
    state.pcap[i] = res.prices.at_cap
    state.s[i] += want - state.desired[i]
    state.desired[i] = want
    state.x[i] = y
    state.steps += 1
    raised = [j for j in range(state.m) if state.w[j] <= 0 and state.l[j] <= 0]
    for j in raised:
        _raise_price(state, j)
    if debug:
        if not raised and state.potential() - phi_before < s_before - 2.25 * state.eps * b_i - _money_tol(state):
            state.stats["potential_claim_misses"] = state.stats.get("potential_claim_misses", 0) + 1
        check_sr_invariants(state)
    if trace is not None:
        trace.write(json.dumps({
            "iteration": state.iteration, "round": state.round, "agent": i, "cases": cases,
            "phi": state.potential(), "surplus": float(state.s.sum()), "raised": raised,
            "exponents": state.p.exponent.tolist(),
        }) + "\n")
    return raised


def check_sr_invariants(state: SRAuctionState) -> None:
    """(a-SR), (b-SR), (c) and (d); raises InvariantError on violation."""
    tol = 1e-9
    a = state.available()
    sold = state.c.sum(axis=0)
    low = ~state.pcap
    errs = []
    if np.any(np.abs(state.l + state.h + state.w - a) > tol):
        errs.append("(a-SR) l + h + w != a")
    if np.any(np.abs(state.l - np.sum(np.where(low, state.c, 0.0), axis=0)) > tol):
        errs.append("(a-SR) tracked l disagrees with holdings")
    if np.any(state.l + state.w <= 0):
        errs.append("(a-SR) no low-price units left")
    if np.any(np.abs(sold + state.w - a) > tol):
        errs.append("(b-SR) amount sold differs from a_j")
    if np.any((state.w > 0) & (state.p.exponent > 0)):
        errs.append("(b-SR) unsold good with raised price")
    if np.any(state.c < 0):
        errs.append("negative holdings")
    p = state.p.values()
    caps = state.p.caps()
    if np.any(state.pind < p[None, :] * (1 - 1e-15)) or np.any(state.pind > caps[None, :]):
        errs.append("(c) individual prices outside [p, (1+eps)p]")
    if np.any(state.pcap & (state.pind != caps[None, :])):
        errs.append("(c) flagged price differs from the cap")
    for i, spec in enumerate(state.inst.demands):
        if dominating_bundle(spec, state.pind[i], state.b[i], state.c[i]) is None:
            errs.append(f"(c) agent {i} holds a bundle it does not demand")
    fresh = state.desired - state.spent()
    drift = float(np.max(np.abs(fresh - state.s)))
    state.stats["max_surplus_drift"] = max(state.stats.get("max_surplus_drift", 0.0), drift)
    if drift > _money_tol(state):
        errs.append(f"(d) relative surplus drift {drift:.3e}")
    if np.any(state.t > state.b.sum() * (1 + 1e-15)):
        errs.append("effective cap above the total budget")
    if errs:
        raise InvariantError("; ".join(errs))


# existence: Hall's condition and price bounds -----------------------------------------

@dataclass
class HallResult:
    ok: bool
    violating: tuple = ()
    strict: bool = False  # strict inequality for every nonempty S (exhaustive check only)
    deficit: float = 0.0

    def __bool__(self) -> bool:
        return self.ok


def interest_graph(inst: SRInstance) -> np.ndarray:
    return np.array([interest(s) for s in inst.demands], dtype=bool)


def check_hall_condition(inst: SRInstance, exhaustive_limit: int = 20) -> HallResult:
    """Is sum_{i in S} b_i <= sum_{j in Gamma(S)} t_j for every agent set S?

    Exhaustive over all subsets for n <= ``exhaustive_limit`` (returns the
    set of largest deficit), otherwise a max-flow feasibility test.
    """
    E = interest_graph(inst)
    b = inst.budgets.astype(float)
    t = inst.effective_caps()
    n, m = E.shape
    tol = 1e-12 * max(1.0, float(b.sum()))
    if n <= exhaustive_limit:
        # subset masks built by doubling: mask bit i <-> agent i
        gam = np.zeros(1, dtype=bool).reshape(1, 1).repeat(m, axis=1)
        bud = np.zeros(1)
        for i in range(n):
            gam = np.vstack([gam, gam | E[i][None, :]])
            bud = np.concatenate([bud, bud + b[i]])
        cap = np.where(gam, t[None, :], 0.0).sum(axis=1)
        gap = bud - cap
        k = int(np.argmax(gap))
        S = tuple(i for i in range(n) if k >> i & 1)
        strict = bool(np.all(gap[1:] < -tol))
        if gap[k] > tol:
            return HallResult(False, S, False, float(gap[k]))
        return HallResult(True, (), strict, 0.0)
    import networkx as nx

    G = nx.DiGraph()
    for i in range(n):
        G.add_edge("s", ("a", i), capacity=float(b[i]))
        for j in np.flatnonzero(E[i]):
            G.add_edge(("a", i), ("g", int(j)))
    for j in range(m):
        G.add_edge(("g", j), "t", capacity=float(t[j]) if np.isfinite(t[j]) else float(b.sum()))
    flow, (side, _) = nx.minimum_cut(G, "s", "t")
    if flow >= b.sum() - tol:
        return HallResult(True, (), False, 0.0)
    S = tuple(sorted(i for kind, i in (v for v in side if v != "s") if kind == "a"))
    deficit = float(b[list(S)].sum() - t[np.flatnonzero(E[list(S)].any(axis=0))].sum())
    return HallResult(False, S, False, deficit)


def _derivative_ratio(spec) -> float:
    """v_max / v_min of one agent, inf when derivatives are unbounded."""
    if isinstance(spec, Linear):
        v = spec.v[spec.v > 0]
        return float(v.max() / v.min()) if v.size else 1.0
    if isinstance(spec, GaleBASPLC):
        u = np.concatenate([np.asarray(r) for r in spec.rates])
        u = u[u > 0]
        return float(u.max() / u.min()) if u.size else 1.0
    # Cobb-Douglas, CES and their conic mixtures have unbounded partial
    # derivatives near the boundary of the orthant
    return math.inf


@dataclass
class PriceCap:
    value: float
    form: str  # "full-interest" | "strict-hall" | "fallback"
    warning: str = ""


def price_cap_detail(inst: SRInstance, fallback: float | None = None) -> PriceCap:
    eps, n = inst.eps, inst.n
    t = inst.effective_caps()
    tmax = float(t.max())
    fb = FALLBACK_CAP_FACTOR * tmax if fallback is None else float(fallback)
    V = max(_derivative_ratio(s) for s in inst.demands)
    if not math.isfinite(V):
        return PriceCap(fb, "fallback", "utility derivatives unbounded (V_max = inf); using the configured cap")
    E = interest_graph(inst)
    if E.all() and inst.budgets.sum() <= t.sum():
        return PriceCap((1 + eps) ** 2 * tmax * V, "full-interest")
    hall = check_hall_condition(inst)
    if hall.strict:
        return PriceCap((1 + eps) ** n * tmax * V ** (n - 1), "strict-hall")
    return PriceCap(fb, "fallback", "no price bound applies without strict Hall's condition; using the configured cap")


def price_cap_bound(inst: SRInstance, fallback: float | None = None) -> float:
    info = price_cap_detail(inst, fallback)
    if info.warning:
        warnings.warn(info.warning, stacklevel=2)
    return info.value


# driver ------------------------------------------------------------------------------

def run_sr_auction(inst: SRInstance, fnp_choice: str = "auto", price_cap: float | None = None,
                   debug: bool = False, trace=None, init_mode: str | None = None,
                   stop: str = "budget") -> EquilibriumReport:
    """Run the SR auction until the relative surplus is at most 3 eps sum(b).

    With ``stop="spend"`` the threshold is 3 eps times the money the agents
    currently want to spend, sum_i p^(i).x^(i), which is never larger. This
    matters when prices start far below the budgets: Gale agents then want
    to spend little and the budget threshold holds from the first step.
    ``stop="agent"`` applies that test to every agent separately
    (s_i <= 3 eps p^(i).x^(i)), so no agent can be starved by the others'
    totals.

    Stops with status "cap_breach" as soon as a price exceeds
    min(price_cap_bound, price_cap).
    """
    if stop not in ("budget", "spend", "agent"):
        raise ValueError(f"unknown stopping rule {stop!r}")
    problems = validate_instance(inst)
    if problems:
        raise ValueError("invalid instance: " + "; ".join(problems))
    t0 = time.perf_counter()
    eps = inst.eps
    cap_info = price_cap_detail(inst, price_cap)
    if cap_info.warning:
        log.warning(cap_info.warning)
    cap = cap_info.value if price_cap is None else min(cap_info.value, float(price_cap))
    state = init_sr(inst, fnp_choice, init_mode)
    if debug:
        check_sr_invariants(state)
    B = float(state.b.sum())
    round_cap = math.ceil(2 / eps)
    guard = 50 * round_cap + 100
    rounds: list[int] = []
    status, message = "ok", ""
    while True:
        state.iteration += 1
        state.round = 0
        raised: list[int] = []
        finished = False
        while not raised:
            if stop == "agent":
                done = bool(np.all(state.s <= 3 * eps * state.desired + _money_tol(state)))
            else:
                scale = B if stop == "budget" else min(B, float(state.desired.sum()))
                done = state.s.sum() <= 3 * eps * scale
            if done:
                finished = True
                break
            state.round += 1
            if state.round > guard:
                status, message, finished = "aborted", f"no price increase after {guard} rounds", True
                break
            for i in range(state.n):
                if state.s[i] <= 0:
                    continue
                raised = step(state, i, debug=debug, trace=trace)
                if raised:
                    break
        rounds.append(state.round)
        if finished:
            break
        if float(state.p.values().max()) > cap:
            status = "cap_breach"
            message = f"no SR-equilibrium within bound: a price exceeded {cap:.6g} ({cap_info.form})"
            break
    p = state.p.values()
    a = state.available()
    certs = np.zeros_like(state.c)
    for i, spec in enumerate(inst.demands):
        z = dominating_bundle(spec, state.pind[i], state.b[i], state.c[i])
        certs[i] = z if z is not None else np.nan
    stats = dict(state.stats)
    stats.update({
        "steps": state.steps,
        "outbid_calls": state.outbid_calls,
        "outbid_passes": state.outbid_passes,
        "round_cap": round_cap,
        "max_rounds": max(rounds) if rounds else 0,
        "weak_clearing": state.weak,
        "stop_rule": stop,
        "price_cap": cap,
        "price_cap_form": cap_info.form,
        "fnp": list(state.routines),
    })
    if cap_info.warning:
        stats["price_cap_warning"] = cap_info.warning
    return EquilibriumReport(
        prices=state.p.copy(),
        individual=[state.individual(i) for i in range(state.n)],
        allocation=state.c.copy(),
        certificates=certs,
        budgets=state.b.copy(),
        surplus=float(state.s.sum()),
        leftover=float(np.dot(p, a - state.c.sum(axis=0))),
        iterations=state.iteration,
        rounds=rounds,
        wall_time=time.perf_counter() - t0,
        status=status,
        kind="sr",
        message=message,
        stats=stats,
    )
