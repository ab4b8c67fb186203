"""Nash social welfare with budget-additive SPLC utilities.

Pipeline: relax the indivisible instance to a Fisher market with Gale
demands, solve it for an SR-equilibrium with a small dummy agent, rescale
every agent to bang-per-buck one, read off the price-based upper bound, and
round the fractional allocation to whole copies.

Units: the Fisher relaxation measures good j in whole stocks of D_j copies,
so a segment (u, d) becomes (u*D_j, d/D_j) and the spending cap t_j = D_j
gives a_j = min(1, 1/p_j) where p_j is the price of one copy.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .auction_sr import run_sr_auction
from .demand import GaleBASPLC, basplc_greedy
from .market_model import EquilibriumReport, NSWInstance, SRInit, SRInstance, validate_instance


class NoEquilibriumError(RuntimeError):
    def __init__(self, message: str, report: EquilibriumReport | None = None):
        super().__init__(message)
        self.report = report


def default_eps(n: int) -> float:
    return 0.01 / n


def positive_welfare_possible(nsw: NSWInstance) -> bool:
    """True iff some allocation gives every agent positive utility.

    That is a Hall condition on agents versus copies they value, checked as
    a max-flow. When it fails every allocation has NSW 0 and the Fisher
    relaxation has no SR-equilibrium: the agents of a violating set want to
    spend more than the goods they value can absorb.
    """
    G = nx.DiGraph()
    for i, row in enumerate(nsw.segments):
        G.add_edge("s", ("a", i), capacity=1)
        for j, segs in enumerate(row):
            if segs and segs[0][0] > 0:
                G.add_edge(("a", i), ("g", j), capacity=1)
    for j, d in enumerate(nsw.copies):
        G.add_edge(("g", j), "t", capacity=int(d))
    if "s" not in G:
        return nsw.n == 0
    return nx.maximum_flow_value(G, "s", "t") >= nsw.n


def clamp_segments(segs, cap: float) -> list:
    """u <- min(u, cap); neighbours that end up with equal rates are merged."""
    out: list = []
    for u, d in segs:
        u = min(u, cap)
        if out and out[-1][0] == u:
            out[-1] = (u, out[-1][1] + d)
        else:
            out.append((u, d))
    return out


def relax_to_fisher(nsw: NSWInstance, eps: float | None = None) -> SRInstance:
    """Fisher market with unit budgets, caps t_j = D_j and Gale BASPLC demands."""
    D = nsw.copies.astype(float)
    demands = []
    for row, U in zip(nsw.segments, nsw.caps):
        segs = [[(u * D[j], d / D[j]) for u, d in clamp_segments(row[j], U)] for j in range(nsw.m)]
        demands.append(GaleBASPLC.from_segments(segs, U))
    if eps is None:
        eps = nsw.eps if nsw.eps is not None else default_eps(nsw.n)
    return SRInstance(np.ones(nsw.n), D, demands, eps)


@dataclass
class NormalizedEquilibrium:
    """SR-equilibrium of the relaxation in per-copy units, utilities rescaled
    so that every agent's bang-per-buck is one."""

    nsw: NSWInstance
    eps: float
    prices: np.ndarray  # per copy
    individual: np.ndarray  # (n, m) per copy
    holdings: np.ndarray  # (n, m) copies, fractional
    certificates: np.ndarray  # (n, m) copies
    scale: np.ndarray  # bang-per-buck before rescaling
    gamma: np.ndarray  # cap multipliers after rescaling
    mbb: np.ndarray  # after rescaling, ~1
    utilities: np.ndarray  # rescaled u_i(z_i)
    segments: list  # rescaled, clamped per-copy segments [i][j] -> [(u, d)]
    caps: np.ndarray  # rescaled U_i
    capped: np.ndarray  # A_c indicator
    expensive: np.ndarray  # H(p) indicator
    dummy_value: float = 0.0
    report: EquilibriumReport | None = None

    @property
    def n(self) -> int:
        return len(self.scale)

    @property
    def uncapped(self) -> np.ndarray:
        return ~self.capped


def _augment(nsw: NSWInstance, eps: float) -> SRInstance:
    base = relax_to_fisher(nsw, 0.8 * eps)
    D = nsw.copies.astype(float)
    M = float(D.sum())
    # one util per copy, one segment per good; budget eps
    dummy = GaleBASPLC.from_segments([[(D[j], 1.0)] for j in range(nsw.m)])
    pbar = D * eps / M
    alloc = np.zeros((nsw.n + 1, nsw.m))
    alloc[nsw.n] = basplc_greedy(dummy, pbar, eps).bundle
    return SRInstance(
        np.concatenate([base.budgets, [eps]]), D, base.demands + [dummy], base.eps, SRInit(pbar, alloc),
    )


def solve_sr_with_dummy(nsw: NSWInstance, eps: float | None = None, fnp_choice: str = "auto",
                        debug: bool = False, stop: str = "agent") -> NormalizedEquilibrium:
    """Run the SR auction at precision 4eps/5 with a dummy agent of budget
    eps that initially owns everything, then strip it and normalise.

    The default ``stop="agent"`` asks every agent's relative surplus to be
    small against the money it wants to spend. Against full budgets the
    start (total price eps) already passes the test and nothing gets sold.
    """
    problems = validate_instance(nsw)
    if problems:
        raise ValueError("invalid instance: " + "; ".join(problems))
    if eps is None:
        eps = nsw.eps if nsw.eps is not None else default_eps(nsw.n)
    if not 0 < eps <= 0.25:
        raise ValueError(f"eps must lie in (0, 0.25], got {eps}")
    if not positive_welfare_possible(nsw):
        raise NoEquilibriumError("no SR-equilibrium: some set of agents values fewer copies than it has members")
    aug = _augment(nsw, eps)
    report = run_sr_auction(aug, fnp_choice, debug=debug, init_mode="given", stop=stop)
    if report.status != "ok":
        raise NoEquilibriumError(report.message or report.status, report)
    return normalize(nsw, report, eps)


def normalize(nsw: NSWInstance, report: EquilibriumReport, eps: float) -> NormalizedEquilibrium:
    n, m = nsw.n, nsw.m
    D = nsw.copies.astype(float)
    fisher = relax_to_fisher(nsw, eps)
    P = report.prices.values()
    c = report.allocation[:n]
    scale, gamma, mbb, util, caps = (np.zeros(n) for _ in range(5))
    certs = np.zeros((n, m))
    segments = []
    for i in range(n):
        spec = fisher.demands[i]
        Pi = report.individual[i].values
        beta = basplc_greedy(spec, Pi, 1.0, held=c[i]).beta
        k = beta if beta > 0 else 1.0  # an agent with no positive rate stays unscaled
        scaled = GaleBASPLC(tuple(r / k for r in spec.rates), spec.lengths, spec.cap / k)
        ans = basplc_greedy(scaled, Pi, 1.0, held=c[i])
        scale[i] = beta
        gamma[i] = ans.gamma
        mbb[i] = ans.beta
        util[i] = scaled.utility(ans.bundle)
        caps[i] = scaled.cap
        certs[i] = ans.bundle * D
        segments.append([[(u / k, d) for u, d in clamp_segments(nsw.segments[i][j], nsw.caps[i])]
                         for j in range(m)])
    p = P / D
    capped = np.isfinite(caps) & (util >= caps * (1 - 1e-9))
    return NormalizedEquilibrium(
        nsw=nsw, eps=eps, prices=p,
        individual=np.array([ip.values / D for ip in report.individual[:n]]),
        holdings=c * D, certificates=certs,
        scale=scale, gamma=gamma, mbb=mbb, utilities=util,
        segments=segments, caps=caps, capped=capped,
        expensive=p > 1.0,
        dummy_value=float(np.dot(report.allocation[n], P)) if report.allocation.shape[0] > n else 0.0,
        report=report,
    )


# upper bound ------------------------------------------------------------------------

def bound_correction(eps: float) -> float:
    """Slack for approximate equilibria.

    The product bound is exact for exact equilibria. Here individual prices
    sit up to a factor (1+eps) above market prices, which shifts each
    agent's scaling and each expensive price by at most that factor.
    """
    return (1 + eps) ** 2


def nsw_upper_bound(neq: NormalizedEquilibrium, scaled: bool = False) -> float:
    """(prod_{A_c} U_i * prod_{H(p)} p_j^{D_j})^{1/n}, in log space.

    With ``scaled`` the value is in rescaled utilities; otherwise it is
    mapped back to the input's utilities and widened by
    :func:`bound_correction`.
    """
    n = neq.n
    D = neq.nsw.copies.astype(float)
    logs = float(np.sum(np.log(neq.caps[neq.capped])))
    logs += float(np.sum(D[neq.expensive] * np.log(neq.prices[neq.expensive])))
    if scaled:
        return math.exp(logs / n)
    if np.any(neq.scale <= 0):
        return 0.0
    logs += float(np.sum(np.log(neq.scale)))
    return math.exp(logs / n) * bound_correction(neq.eps)


# utilities of integral allocations ----------------------------------------------------------

def copy_utility(segs, k: int) -> float:
    """Utility of k copies filled into rate-descending segments."""
    total = 0.0
    for u, d in segs:
        take = min(k, d)
        total += u * take
        k -= take
        if k <= 0:
            break
    return total


def agent_utility(nsw: NSWInstance, i: int, counts) -> float:
    raw = sum(copy_utility(nsw.segments[i][j], int(counts[j])) for j in range(nsw.m))
    return min(float(nsw.caps[i]), raw)


@dataclass
class IntegralAllocation:
    counts: np.ndarray  # (n, m) int
    utilities: np.ndarray
    phases: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return geometric_mean(self.utilities)


def geometric_mean(vals) -> float:
    vals = np.asarray(vals, dtype=float)
    if np.any(vals <= 0):
        return 0.0
    return float(np.exp(np.mean(np.log(vals))))


def nsw_value(alloc, nsw: NSWInstance) -> float:
    counts = alloc.counts if isinstance(alloc, IntegralAllocation) else np.asarray(alloc)
    if np.any(counts < 0) or np.any(counts.sum(axis=0) > nsw.copies):
        raise ValueError("infeasible allocation")
    return geometric_mean([agent_utility(nsw, i, counts[i]) for i in range(nsw.n)])


# rounding ---------------------------------------------------------------------------

def _cancel_cycles(spend: dict, tol: float = 1e-12) -> dict:
    """Reroute spending around cycles until the support graph is a forest.

    Alternate edges of an (even) cycle gain and lose the same amount, so
    every agent's and every good's total is unchanged.
    """
    spend = {e: v for e, v in spend.items() if v > tol}
    while True:
        G = nx.Graph()
        G.add_edges_from((("a", i), ("g", j)) for i, j in spend)
        try:
            cyc = nx.find_cycle(G)
        except nx.NetworkXNoCycle:
            return spend
        keys = []
        for u, v in cyc:
            a, g = (u, v) if u[0] == "a" else (v, u)
            keys.append((a[1], g[1]))
        minus = keys[1::2]
        delta = min(spend[k] for k in minus)
        for k in keys[0::2]:
            spend[k] += delta
        for k in minus:
            spend[k] -= delta
        spend = {e: v for e, v in spend.items() if v > tol}


def _pick(nsw: NSWInstance, counts: np.ndarray, cands, j: int) -> int:
    """Candidate whose utility grows by the largest factor from one more
    copy of j; agents at zero utility come first, lowest index on ties."""
    best, best_key = None, None
    for i in sorted(set(cands)):
        cur = agent_utility(nsw, i, counts[i])
        counts[i, j] += 1
        new = agent_utility(nsw, i, counts[i])
        counts[i, j] -= 1
        key = (cur <= 0 and new > 0, new / cur if cur > 0 else new)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def round_allocation(neq: NormalizedEquilibrium, nsw: NSWInstance | None = None) -> IntegralAllocation:
    """Integral allocation of every copy.

    (1) segments an agent values strictly above its own price go whole;
    (2) whole copies of the remaining holdings are kept;
    (3) the leftover copies follow a spending forest: cycles of the residual
    spending graph are cancelled, then each tree is walked from its root
    and every copy of a good goes to whichever neighbouring agent it helps
    most in product terms. Copies nobody is spending on go to the agent they
    help most.
    """
    nsw = neq.nsw if nsw is None else nsw
    n, m = nsw.n, nsw.m
    D = nsw.copies.astype(np.int64)
    counts = np.zeros((n, m), dtype=np.int64)
    left = D.copy()
    tol = 1e-9
    # phase 1
    full = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            for u, d in neq.segments[i][j]:
                if u > neq.individual[i, j] * (1 + tol):
                    full[i, j] += int(round(d))
                else:
                    break
    for j in range(m):
        # an approximate equilibrium can leave a cheap good wanted in full by
        # several agents; those who actually hold it go first
        for i in sorted(range(n), key=lambda k: (-neq.holdings[k, j], k)):
            take = min(full[i, j], left[j])
            counts[i, j] += take
            left[j] -= take
    p1 = int(counts.sum())
    # phase 2
    rest = np.maximum(neq.holdings - full, 0.0)
    frac = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            k = int(math.floor(rest[i, j] + tol))
            take = min(k, left[j])
            counts[i, j] += take
            left[j] -= take
            frac[i, j] = max(rest[i, j] - k, 0.0)
    p2 = int(counts.sum()) - p1
    # phase 3
    spend = {(i, j): frac[i, j] * neq.prices[j] for i in range(n) for j in range(m)
             if frac[i, j] > tol and left[j] > 0}
    forest = _cancel_cycles(spend)
    G = nx.Graph()
    G.add_edges_from((("a", i), ("g", j)) for i, j in forest)
    done = set()
    roots = sorted(min(k for kind, k in comp if kind == "a") for comp in nx.connected_components(G))
    for r in roots:
        for node in [("a", r)] + [v for _, v in nx.bfs_edges(G, ("a", r))]:
            if node[0] != "g":
                continue
            j = node[1]
            cands = [k for kind, k in G.neighbors(node)]
            while left[j] > 0:
                i = _pick(nsw, counts, cands, j)
                counts[i, j] += 1
                left[j] -= 1
            done.add(j)
    for j in range(m):
        while left[j] > 0:
            i = _pick(nsw, counts, range(n), j)
            counts[i, j] += 1
            left[j] -= 1
    assert np.all(counts.sum(axis=0) == D)
    utils = np.array([agent_utility(nsw, i, counts[i]) for i in range(n)])
    phases = {"phase1_copies": p1, "phase2_copies": p2, "phase3_copies": int(D.sum()) - p1 - p2,
              "forest_edges": len(forest)}
    return IntegralAllocation(counts, utils, phases)


def greedy_allocation(nsw: NSWInstance) -> IntegralAllocation:
    """Copies one at a time to whoever they help most in product terms."""
    counts = np.zeros((nsw.n, nsw.m), dtype=np.int64)
    for j in range(nsw.m):
        for _ in range(int(nsw.copies[j])):
            counts[_pick(nsw, counts, range(nsw.n), j), j] += 1
    utils = np.array([agent_utility(nsw, i, counts[i]) for i in range(nsw.n)])
    return IntegralAllocation(counts, utils, {"greedy_copies": int(nsw.copies.sum())})


# exhaustive oracle ----------------------------------------------------------------

def _compositions(total: int, parts: int):
    """All ways to write total as an ordered sum of ``parts`` nonnegative ints."""
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev, out = -1, []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(total + parts - 1 - prev - 1)
        yield out


def brute_force_nsw(nsw: NSWInstance, max_copies: int = 12, max_agents: int = 4):
    """Exact optimum by enumerating how many copies of each good each agent gets."""
    n, m = nsw.n, nsw.m
    if int(nsw.copies.sum()) > max_copies or n > max_agents:
        raise ValueError(f"instance too large for enumeration (copies <= {max_copies}, agents <= {max_agents})")
    # per good: table of the utility each agent gets for every split
    splits, gains = [], []
    for j in range(m):
        opts = list(_compositions(int(nsw.copies[j]), n))
        splits.append(opts)
        gains.append(np.array([[copy_utility(nsw.segments[i][j], o[i]) for i in range(n)] for o in opts]))
    caps = nsw.caps
    best, best_alloc = -1.0, None
    for pick in itertools.product(*(range(len(o)) for o in splits)):
        raw = sum(gains[j][k] for j, k in enumerate(pick))
        val = geometric_mean(np.minimum(raw, caps))
        if val > best:
            best = val
            best_alloc = pick
    counts = np.array([[splits[j][best_alloc[j]][i] for j in range(m)] for i in range(n)], dtype=np.int64)
    return best, counts


# end to end -----------------------------------------------------------------------

@dataclass
class NSWResult:
    equilibrium: NormalizedEquilibrium | None  # None when every allocation has NSW 0
    allocation: IntegralAllocation
    value: float
    upper_bound: float

    @property
    def ratio(self) -> float:
        return self.upper_bound / self.value if self.value > 0 else math.inf

    def to_json(self) -> dict:
        neq = self.equilibrium
        out = {
            "kind": "nsw",
            "allocation": self.allocation.counts.tolist(),
            "utilities": self.allocation.utilities.tolist(),
            "nsw": self.value,
            "upper_bound": self.upper_bound,
            "phases": self.allocation.phases,
        }
        if neq is None:
            return out
        return out | {
            "eps": neq.eps,
            "prices": neq.prices.tolist(),
            "scale": neq.scale.tolist(),
            "capped": np.flatnonzero(neq.capped).tolist(),
            "expensive": np.flatnonzero(neq.expensive).tolist(),
            "dummy_value": neq.dummy_value,
            "auction": {
                "iterations": neq.report.iterations,
                "steps": neq.report.stats.get("steps"),
                "max_rounds": neq.report.stats.get("max_rounds"),
                "wall_time": neq.report.wall_time,
            } if neq.report is not None else None,
        }


def solve_nsw(nsw: NSWInstance, eps: float | None = None, fnp_choice: str = "auto", debug: bool = False) -> NSWResult:
    if not positive_welfare_possible(nsw):
        return NSWResult(None, greedy_allocation(nsw), 0.0, 0.0)
    neq = solve_sr_with_dummy(nsw, eps, fnp_choice, debug)
    alloc = round_allocation(neq, nsw)
    return NSWResult(neq, alloc, alloc.value, nsw_upper_bound(neq))
