"""Certification of solver output and independent oracles.

Nothing here imports solver code: checkers only read instances and reports,
and rebuild witnesses from the demand oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .demand import (
    CES,
    CobbDouglas,
    Conic,
    GaleBASPLC,
    Linear,
    basplc_kkt_residual,
    demand,
    demand_monotone,
    dominating_bundle,
    elasticity_bound,
    gale_demand_basplc,
    mbb_set,
)
from .market_model import EquilibriumReport, ExchangeInstance, NSWInstance, SRInstance


@dataclass
class Certificate:
    witnesses: np.ndarray
    residuals: dict
    verdict: bool
    failures: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.verdict


def dominating_demand(spec, p, b: float, c) -> np.ndarray | None:
    return dominating_bundle(spec, p, b, c)


def _domination(specs, report: EquilibriumReport, budgets, eps: float, failures: list):
    p = report.prices.values()
    n, m = report.allocation.shape
    witnesses = np.full((n, m), np.nan)
    worst_price = 0.0
    worst_slack = 0.0
    for i, spec in enumerate(specs):
        ip = report.individual[i]
        lo = np.max((p - ip.values) / p)
        hi = np.max(ip.values / ((1 + eps) * p) - 1)
        worst_price = max(worst_price, lo, hi)
        if lo > 1e-12 or hi > 1e-12:
            failures.append(f"(i) agent {i}: individual prices outside [p, (1+eps)p]")
        c = report.allocation[i]
        if np.any(c < 0):
            failures.append(f"(i) agent {i}: negative holdings")
        z = dominating_demand(spec, ip.values, budgets[i], c)
        if z is None:
            failures.append(f"(i) agent {i}: no demanded bundle dominates the holdings")
            worst_slack = math.inf
            continue
        witnesses[i] = z
        worst_slack = max(worst_slack, float(np.max(c - z)))
    return witnesses, worst_price, worst_slack


def check_approx_equilibrium(inst: ExchangeInstance, report: EquilibriumReport, eps: float,
                             rel_tol: float = 1e-7) -> Certificate:
    failures: list[str] = []
    p = report.prices.values()
    budgets = inst.endowments @ p
    e = inst.supply
    z, price_gap, slack = _domination(inst.demands, report, budgets, eps, failures)
    sold = report.allocation.sum(axis=0)
    over = float(np.max(sold - e))
    if over > 1e-9 * max(1.0, float(e.max())):
        failures.append(f"(ii) goods oversold by {over:.3e}")
    pe = float(np.dot(p, e))
    leftover = float(np.dot(p, e - sold))
    if leftover > eps * pe * (1 + rel_tol):
        failures.append(f"(iii) leftover {leftover:.6g} exceeds eps p.e = {eps * pe:.6g}")
    res = {"price_gap": price_gap, "domination": slack, "oversold": over,
           "leftover": leftover, "leftover_ratio": leftover / pe}
    return Certificate(z, res, not failures, failures)


def available(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, t / p)


def check_approx_sr(inst: SRInstance, report: EquilibriumReport, eps: float, weak_clearing: bool = False,
                    rel_tol: float = 1e-7) -> Certificate:
    failures: list[str] = []
    p = report.prices.values()
    b = inst.budgets
    B = float(b.sum())
    a = available(p, inst.effective_caps())
    z, price_gap, slack = _domination(inst.demands, report, b, eps, failures)
    sold = report.allocation.sum(axis=0)
    gap = sold - a
    tol = 1e-9
    if weak_clearing:
        if np.any(gap > tol):
            failures.append("(ii) more than the available amount sold")
        unsold = float(np.dot(p, np.maximum(-gap, 0.0)))
        if unsold > eps * B * (1 + rel_tol):
            failures.append(f"(ii) unsold value {unsold:.6g} exceeds eps sum(b)")
    else:
        unsold = float(np.dot(p, np.maximum(-gap, 0.0)))
        if np.any(np.abs(gap) > tol):
            failures.append(f"(ii) clearing residual {float(np.max(np.abs(gap))):.3e}")
    excess = math.inf if np.isnan(z).any() else float(np.dot(p, z.sum(axis=0) - a))
    if excess > eps * B * (1 + rel_tol):
        failures.append(f"(iii) witness excess {excess:.6g} exceeds eps sum(b) = {eps * B:.6g}")
    res = {"price_gap": price_gap, "domination": slack, "clearing": float(np.max(np.abs(gap))),
           "unsold_value": unsold, "excess": excess}
    return Certificate(z, res, not failures, failures)


# oracles ------------------------------------------------------------------------

def brute_force_fisher_eq(inst: SRInstance):
    """Fisher equilibrium (no spending caps) from the Eisenberg-Gale program.

    Prices are the duals of the supply constraints. Returns (p, x, residual)
    where the residual is the largest market-clearing or budget error at p.
    """
    import cvxpy as cp

    n, m = inst.n, inst.m
    if m > 3:
        raise ValueError("oracle limited to m <= 3")
    if np.any(np.isfinite(inst.caps)):
        raise ValueError("oracle needs t = inf")
    X = cp.Variable((n, m), nonneg=True)
    terms = []
    for i, spec in enumerate(inst.demands):
        b = inst.budgets[i]
        if isinstance(spec, Linear):
            terms.append(b * cp.log(X[i] @ spec.v))
        elif isinstance(spec, CobbDouglas):
            live = np.flatnonzero(spec.alpha > 0)
            terms.append(b * cp.sum(cp.multiply(spec.alpha[live], cp.log(X[i, live]))))
        elif isinstance(spec, CES):
            r = (spec.sigma - 1) / spec.sigma
            w = spec.beta ** (1 / (spec.sigma - 1))
            terms.append(b * cp.log(cp.pnorm(cp.multiply(w, X[i]), r)))
        else:
            raise TypeError(f"oracle does not handle {spec.kind}")
    supply = cp.sum(X, axis=0) <= 1
    prob = cp.Problem(cp.Maximize(sum(terms)), [supply])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    p = np.asarray(supply.dual_value, dtype=float)
    x = np.maximum(np.asarray(X.value, dtype=float), 0.0)
    res = fisher_residual(inst, p, x)
    if all(isinstance(s, Linear) for s in inst.demands):
        polished = _polish_linear(inst, p, x)
        if polished is not None:
            p2, x2 = polished
            r2 = fisher_residual(inst, p2, x2)
            if r2 < res:
                p, x, res = p2, x2, r2
    else:
        p2, x2 = _polish_smooth(inst, p)
        r2 = fisher_residual(inst, p2, x2)
        if r2 < res:
            p, x, res = p2, x2, r2
    return p, x, res


def _polish_smooth(inst: SRInstance, p):
    """Newton on the excess demand in log prices, from the solver's duals."""
    from scipy.optimize import root

    def excess(logp):
        q = np.exp(logp)
        return sum(demand(s, q, b).bundle for s, b in zip(inst.demands, inst.budgets)) - 1.0

    sol = root(excess, np.log(np.maximum(p, 1e-12)), method="hybr", options={"xtol": 1e-14})
    q = np.exp(sol.x)
    return q, np.array([demand(s, q, b).bundle for s, b in zip(inst.demands, inst.budgets)])


def _polish_linear(inst: SRInstance, p, x, thresh: float = 1e-6):
    """Exact prices on the solver's spending support.

    Within a connected component of the support graph, price ratios are
    fixed by the agents' valuations; the component's prices then add up to
    its agents' budgets. Spending on the support edges is recovered by
    least squares.
    """
    import networkx as nx

    n, m = x.shape
    V = np.array([s.v for s in inst.demands])
    edges = [(i, j) for i in range(n) for j in range(m) if x[i, j] > thresh]
    G = nx.Graph()
    G.add_nodes_from([("a", i) for i in range(n)] + [("g", j) for j in range(m)])
    G.add_edges_from((("a", i), ("g", j)) for i, j in edges)
    q = np.zeros(m)
    for comp in nx.connected_components(G):
        goods = sorted(k for kind, k in comp if kind == "g")
        agents = sorted(k for kind, k in comp if kind == "a")
        if not goods or not agents:
            return None
        root = ("g", goods[0])
        logp = {root: 0.0}
        for u, v in nx.bfs_edges(G, root):
            # u is a good, v an agent, or the reverse
            if u[0] == "g":
                logp[v] = logp[u] - math.log(V[v[1], u[1]])  # agent node stores log(1/beta)
            else:
                logp[v] = logp[u] + math.log(V[u[1], v[1]])
        scale = sum(inst.budgets[i] for i in agents) / sum(math.exp(logp[("g", j)]) for j in goods)
        for j in goods:
            q[j] = scale * math.exp(logp[("g", j)])
    A = np.zeros((n + m, len(edges)))
    for k, (i, j) in enumerate(edges):
        A[i, k] = 1.0
        A[n + j, k] = 1.0
    rhs = np.concatenate([inst.budgets, q])
    spend = np.linalg.lstsq(A, rhs, rcond=None)[0]
    if np.any(spend < 0):
        return None
    x2 = np.zeros_like(x)
    for k, (i, j) in enumerate(edges):
        x2[i, j] = spend[k] / q[j]
    return q, x2


def fisher_residual(inst: SRInstance, p, x) -> float:
    """Clearing, budget and optimality error of (p, x) in a Fisher market."""
    p = np.asarray(p, dtype=float)
    res = float(np.max(np.abs(x.sum(axis=0) - 1.0)))
    for i, spec in enumerate(inst.demands):
        b = inst.budgets[i]
        res = max(res, abs(float(np.dot(p, x[i])) - b) / max(1.0, b))
        if isinstance(spec, Linear):
            r = spec.v / p
            held = x[i] > 1e-7
            if np.any(held):
                res = max(res, float(r.max() - r[held].min()) / r.max())
        else:
            res = max(res, float(np.max(np.abs(demand(spec, p, b).bundle - x[i]))))
    return res


def brute_force_gale_basplc(spec: GaleBASPLC, p, b: float, grid: int = 2001):
    """Optimum of the Gale program by a search over the utility level.

    For a fixed utility level v the cheapest bundle is an LP, solved with
    scipy; the concave outer objective b log v - cost(v) is scanned on a
    grid and refined by golden-section search.
    """
    from scipy.optimize import linprog

    p = np.asarray(p, dtype=float)
    u = np.concatenate(spec.rates)
    d = np.concatenate(spec.lengths)
    price = np.concatenate([np.full(len(r), p[j]) for j, r in enumerate(spec.rates)])
    vmax = min(spec.cap, float(np.dot(u, d)))
    if vmax <= 0 or b <= 0:
        return 0.0, np.zeros(spec.m)

    def cost(v):
        r = linprog(price, A_eq=u[None, :], b_eq=[v], bounds=list(zip(np.zeros_like(d), d)), method="highs")
        return r.fun, r.x

    def f(v):
        return b * math.log(v) - cost(v)[0]

    vs = np.linspace(vmax / grid, vmax, grid)
    vals = [f(v) for v in vs]
    k = int(np.argmax(vals))
    lo, hi = vs[max(k - 1, 0)] if k > 0 else vs[0] * 1e-3, vs[min(k + 1, grid - 1)]
    g = (math.sqrt(5) - 1) / 2
    for _ in range(80):
        a1, a2 = hi - g * (hi - lo), lo + g * (hi - lo)
        if f(a1) < f(a2):
            lo = a1
        else:
            hi = a2
    v = (lo + hi) / 2
    best = max((f(v), v), (vals[k], vs[k]))
    c, xs = cost(best[1])
    bundle = np.zeros(spec.m)
    pos = 0
    for j, r in enumerate(spec.rates):
        bundle[j] = xs[pos:pos + len(r)].sum()
        pos += len(r)
    return best[0], bundle


def gale_objective(spec: GaleBASPLC, p, b: float, x) -> float:
    util = spec.raw_utility(np.asarray(x, dtype=float))
    if util <= 0:
        return -math.inf
    return b * math.log(min(util, spec.cap)) - float(np.dot(p, x))


def grid_two_price(spec, p, q, c, b: float, n: int = 201, rounds: int = 6):
    """Dense-grid maximiser of b ln u(y) - cost(y) for two goods, where each
    unit up to c_j costs p_j and every further unit costs q_j."""
    from .demand import utility

    p, q, c = (np.asarray(a, dtype=float) for a in (p, q, c))

    def obj(y):
        u = utility(spec, y)
        if u <= 0:
            return -math.inf
        y1 = np.minimum(y, c)
        return b * math.log(u) - float(np.dot(p, y1) + np.dot(q, y - y1))

    hi = b / np.minimum(p, q)
    lo = np.zeros(2)
    best = None
    for _ in range(rounds):
        g0 = np.linspace(lo[0], hi[0], n)
        g1 = np.linspace(lo[1], hi[1], n)
        vals = np.array([[obj(np.array([a, bb])) for bb in g1] for a in g0])
        k0, k1 = np.unravel_index(np.argmax(vals), vals.shape)
        best = np.array([g0[k0], g1[k1]])
        w = (hi - lo) / n * 4
        lo, hi = np.maximum(best - w, 0.0), best + w
    return best


# property tests -------------------------------------------------------------------

FAMILIES = ("linear", "ces", "cobb_douglas", "conic", "basplc", "ces_broken")


def random_spec(family: str, m: int, rng: np.random.Generator):
    if family == "linear":
        v = rng.random(m)
        v[rng.random(m) < 0.2] = 0.0
        if not np.any(v > 0):
            v[0] = 1.0
        return Linear(v)
    if family == "ces":
        return CES(rng.dirichlet(np.ones(m)), float(rng.uniform(1.05, 5.0)))
    if family == "ces_broken":
        return CES(rng.dirichlet(np.ones(m)), 0.5)
    if family == "cobb_douglas":
        return CobbDouglas(rng.dirichlet(np.ones(m)))
    if family == "conic":
        lam = float(rng.uniform(0.05, 0.95))
        return Conic(((lam, random_spec("ces", m, rng)), (1 - lam, random_spec("cobb_douglas", m, rng))))
    if family == "basplc":
        segs = []
        for _ in range(m):
            k = int(rng.integers(1, 4))
            u = np.sort(rng.uniform(0.1, 3.0, size=k))[::-1]
            u = u + np.arange(k)[::-1] * 1e-3  # keep rates strictly decreasing
            segs.append([(float(a), float(rng.uniform(0.2, 2.0))) for a in u])
        cap = float(rng.uniform(0.5, 6.0)) if rng.random() < 0.5 else math.inf
        return GaleBASPLC.from_segments(segs, cap)
    raise ValueError(f"unknown family {family!r}")


@dataclass
class PropertyReport:
    family: str
    trials: int
    counts: dict
    counterexamples: list

    @property
    def violations(self) -> int:
        """Failures of the WGS, scale, budget, KKT and elasticity checks."""
        return sum(v for k, v in self.counts.items() if k not in INFORMATIONAL)

    @property
    def spending_drops(self) -> int:
        return self.counts.get("spending", 0)


# Gale SPLC spending can fall as prices rise (one good, two segments, second
# partly bought: spend = b - p*d1*(r1/r2 - 1)), so this is reported, not failed
INFORMATIONAL = ("spending",)


def property_suite(family: str, trials: int = 1000, seed: int = 0) -> PropertyReport:
    rng = np.random.default_rng(seed)
    counts = {"wgs": 0, "scale": 0, "budget": 0, "elasticity": 0, "spending": 0, "kkt": 0}
    examples = []

    def bad(kind, **info):
        counts[kind] += 1
        if len(examples) < 20:
            examples.append({"check": kind, **info})

    for trial in range(trials):
        m = int(rng.integers(2, 7))
        spec = random_spec(family, m, rng)
        p = np.exp(rng.uniform(-2, 2, size=m))
        b = float(np.exp(rng.uniform(-2, 2)))
        ans = demand(spec, p, b)
        x = ans.bundle
        # weak gross substitutes
        raise_ = rng.random(m) < 0.5
        if not raise_.any():
            raise_[rng.integers(m)] = True
        if raise_.all() and m > 1:
            raise_[rng.integers(m)] = False
        p2 = np.where(raise_, p * rng.uniform(1.0, 3.0, size=m), p)
        b2 = b * float(rng.uniform(1.0, 2.0))
        y = demand_monotone(spec, p, b, p2, b2, x)
        fixed = p2 == p
        tol = 1e-9 * np.maximum(1.0, np.abs(x))
        if np.any(fixed & (y < x - tol)):
            bad("wgs", trial=trial, p=p.tolist(), p2=p2.tolist(), x=x.tolist(), y=y.tolist())
        # scale invariance
        for a in (0.5, 2.0, 10.0):
            xa = demand(spec, a * p, a * b).bundle
            if np.any(np.abs(xa - x) > tol):
                bad("scale", trial=trial, alpha=a)
                break
        # budget
        spend = float(np.dot(p, x))
        if isinstance(spec, GaleBASPLC):
            if spend > b * (1 + 1e-9):
                bad("budget", trial=trial, spend=spend, b=b)
            r = basplc_kkt_residual(spec, p, b, ans.segments, ans.beta, ans.gamma)
            if r > 1e-8:
                bad("kkt", trial=trial, residual=r)
            # spending never falls when prices rise at a fixed budget
            y_b = demand_monotone(spec, p, b, p2, b, x)
            if float(np.dot(p2, y_b)) < spend - 1e-9 * max(1.0, spend):
                bad("spending", trial=trial, p=p.tolist(), p2=p2.tolist(), b=b)
        elif abs(spend - b) > 1e-9 * max(1.0, b):
            bad("budget", trial=trial, spend=spend, b=b)
        # own-price elasticity
        f = elasticity_bound(spec)
        if f is not None:
            j = int(rng.integers(m))
            mu = float(rng.uniform(0.0, 1.0))
            p3 = p.copy()
            p3[j] *= 1 + mu
            x3 = demand(spec, p3, b).bundle
            if x3[j] < x[j] / (1 + mu) ** f - 1e-9 * max(1.0, x[j]):
                bad("elasticity", trial=trial, mu=mu)
    return PropertyReport(family, trials, counts, examples)


# seeded instance batteries --------------------------------------------------------

def random_exchange_instance(rng: np.random.Generator, eps: float, n_max: int = 10, m_max: int = 10,
                             families=("linear", "ces", "cobb_douglas", "conic")) -> ExchangeInstance:
    """Mixed-family exchange market with every good owned by someone."""
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    e = rng.random((n, m)) * (rng.random((n, m)) < 0.7)
    for j in np.flatnonzero(e.sum(axis=0) <= 0):
        e[rng.integers(n), j] = rng.uniform(0.2, 1.0)
    specs = []
    for i in range(n):
        fam = families[int(rng.integers(len(families)))]
        spec = random_spec(fam, m, rng)
        if isinstance(spec, Linear):
            spec = Linear(np.maximum(spec.v, 0.05))  # full interest keeps every agent in the market
        specs.append(spec)
    return ExchangeInstance(e, specs, eps)


def random_sr_instance(rng: np.random.Generator, eps: float, n_max: int = 5, m_max: int = 4,
                       families=("linear", "ces", "cobb_douglas", "basplc")) -> SRInstance:
    """Fisher market with optional spending caps loose enough for an equilibrium.

    Agents that always spend their whole budget (all but BASPLC) need room:
    caps are raised so every good can absorb what Cobb-Douglas shares alone
    send to it, and the caps together exceed the budgets.
    """
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    b = rng.uniform(0.5, 2.0, size=n)
    specs = []
    for i in range(n):
        fam = families[int(rng.integers(len(families)))]
        spec = random_spec(fam, m, rng)
        if isinstance(spec, Linear):
            spec = Linear(np.maximum(spec.v, 0.05))
        specs.append(spec)
    if rng.random() < 0.4:
        t = np.full(m, math.inf)
    else:
        t = rng.uniform(0.5, 2.0, size=m) * b.sum() / m
        share = np.zeros(m)
        for spec, bi in zip(specs, b):
            if isinstance(spec, CobbDouglas):
                share += spec.alpha * bi
        t = np.maximum(t, 1.25 * share)
        t *= max(1.0, 1.25 * b.sum() / t.sum())
    return SRInstance(b, t, specs, eps)


def random_nsw_instance(rng: np.random.Generator, n_max: int = 3, m_max: int = 4, copies_max: int = 10,
                        zero_prob: float = 0.15, cap_prob: float = 0.4) -> NSWInstance:
    """Small budget-additive SPLC instance in the brute-force range."""
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    D = rng.integers(1, 4, size=m)
    while D.sum() > copies_max:
        j = int(rng.integers(m))
        D[j] = max(1, D[j] - 1)
    segs = []
    for _ in range(n):
        row = []
        for j in range(m):
            if rng.random() < zero_prob:
                row.append([(0.0, int(D[j]))])
                continue
            k = int(rng.integers(1, D[j] + 1))
            cuts = sorted(rng.choice(np.arange(1, D[j]), size=k - 1, replace=False).tolist()) if k > 1 else []
            lens = np.diff([0, *cuts, int(D[j])])
            rates = np.sort(rng.uniform(0.1, 5.0, size=k))[::-1] + np.arange(k)[::-1] * 1e-3
            row.append([(float(r), int(d)) for r, d in zip(rates, lens)])
        segs.append(row)
    caps = np.where(rng.random(n) < cap_prob, rng.uniform(0.5, 6.0, size=n), math.inf)
    return NSWInstance(D, segs, caps)
