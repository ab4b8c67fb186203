"""Demand systems and demand oracles.

Every family here is a weak-gross-substitutes (WGS) demand system, or is
flagged as not being one by :func:`spec_violations`. Prices and budgets are
plain float arrays; nothing in this module knows about auctions.

Families
--------
Linear       greedy on maximum bang-per-buck, lowest index on ties
CES          closed form, WGS iff sigma > 1
CobbDouglas  closed form x_j = b alpha_j / p_j
Conic        nonnegative combination of simple systems
GaleBASPLC   Gale demand of a budget-additive separable piecewise-linear
             concave utility (segments plus a global utility cap)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

# relative tolerance used to decide that two bang-per-buck ratios tie
RATIO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Linear:
    v: np.ndarray
    kind: ClassVar[str] = "linear"

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    @property
    def m(self) -> int:
        return len(self.v)


@dataclass(frozen=True, eq=False)
class CES:
    beta: np.ndarray
    sigma: float
    kind: ClassVar[str] = "ces"

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def m(self) -> int:
        return len(self.beta)


@dataclass(frozen=True, eq=False)
class CobbDouglas:
    alpha: np.ndarray
    kind: ClassVar[str] = "cobb_douglas"

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))

    @property
    def m(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True, eq=False)
class Conic:
    parts: tuple  # of (lambda, spec)
    kind: ClassVar[str] = "conic"

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple((float(l), s) for l, s in self.parts))

    @property
    def m(self) -> int:
        return self.parts[0][1].m


@dataclass(frozen=True, eq=False)
class GaleBASPLC:
    """Per good j: rates[j] (strictly decreasing) and lengths[j]; cap U."""

    rates: tuple
    lengths: tuple
    cap: float = math.inf
    kind: ClassVar[str] = "basplc"

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(np.asarray(r, dtype=float) for r in self.rates))
        object.__setattr__(self, "lengths", tuple(np.asarray(d, dtype=float) for d in self.lengths))
        object.__setattr__(self, "cap", float(self.cap))
        starts = tuple(np.concatenate(([0.0], np.cumsum(d)[:-1])) for d in self.lengths)
        object.__setattr__(self, "_starts", starts)

    @classmethod
    def from_segments(cls, segments, cap=math.inf) -> "GaleBASPLC":
        """Build from ``segments[j] = [(u, d), ...]``."""
        rates = [[u for u, _ in segs] for segs in segments]
        lengths = [[d for _, d in segs] for segs in segments]
        return cls(tuple(rates), tuple(lengths), cap)

    @property
    def m(self) -> int:
        return len(self.rates)

    @property
    def n_segments(self) -> int:
        return sum(len(r) for r in self.rates)

    def segments_of(self, qty: np.ndarray) -> list[np.ndarray]:
        """Split per-good quantities into rate-descending segment fills."""
        return [np.minimum(np.maximum(q - cum, 0.0), d) for q, cum, d in zip(qty, self._starts, self.lengths)]

    def raw_utility(self, qty: np.ndarray) -> float:
        return float(sum(np.dot(u, s) for u, s in zip(self.rates, self.segments_of(qty))))

    def utility(self, qty: np.ndarray) -> float:
        return min(self.cap, self.raw_utility(qty))


DemandSpec = Union[Linear, CES, CobbDouglas, Conic, GaleBASPLC]


@dataclass
class DemandAnswer:
    bundle: np.ndarray
    spend: float
    beta: float | None = None
    gamma: float | None = None
    segments: list | None = None


def is_simple(spec: DemandSpec) -> bool:
    """Simple systems have a unique demand bundle."""
    return isinstance(spec, (CES, CobbDouglas, Conic))


def is_gale(spec: DemandSpec) -> bool:
    return isinstance(spec, GaleBASPLC)


def spec_violations(spec: DemandSpec, m: int | None = None) -> list[str]:
    out = []
    if m is not None and spec.m != m:
        out.append(f"{spec.kind} spec has {spec.m} goods, expected {m}")
    if isinstance(spec, Linear):
        if np.any(spec.v < 0) or not np.all(np.isfinite(spec.v)):
            out.append("linear utilities must be finite and nonnegative")
        elif not np.any(spec.v > 0):
            out.append("linear utility v = 0")
    elif isinstance(spec, CES):
        if spec.sigma <= 1:
            out.append("CES requires sigma > 1")
        if np.any(spec.beta < 0) or abs(spec.beta.sum() - 1) > 1e-9:
            out.append("CES weights must be nonnegative and sum to 1")
    elif isinstance(spec, CobbDouglas):
        if np.any(spec.alpha < 0) or abs(spec.alpha.sum() - 1) > 1e-9:
            out.append("Cobb-Douglas exponents must be nonnegative and sum to 1")
    elif isinstance(spec, Conic):
        if not spec.parts:
            out.append("conic combination has no parts")
            return out
        lam = np.array([l for l, _ in spec.parts])
        if np.any(lam < 0):
            out.append("conic weights must be nonnegative")
        if abs(lam.sum() - 1) > 1e-9:
            # budgets would not be fully spent otherwise
            out.append("conic weights must sum to 1")
        for _, part in spec.parts:
            if not is_simple(part):
                out.append(f"conic part {part.kind} is not a simple demand system")
            out.extend(spec_violations(part, spec.m))
    elif isinstance(spec, GaleBASPLC):
        if not spec.cap > 0:
            out.append("utility cap must be positive")
        for j, (u, d) in enumerate(zip(spec.rates, spec.lengths)):
            if len(u) != len(d):
                out.append(f"good {j}: rates and lengths differ in size")
                continue
            if np.any(u < 0) or np.any(d <= 0):
                out.append(f"good {j}: rates must be >= 0 and lengths > 0")
            if np.any(np.diff(u) >= 0):
                out.append(f"good {j}: rates must be strictly decreasing")
    else:
        out.append(f"unknown demand spec {type(spec).__name__}")
    return out


def interest(spec: DemandSpec) -> np.ndarray:
    """Goods the agent has positive marginal utility for at zero."""
    if isinstance(spec, Linear):
        return spec.v > 0
    if isinstance(spec, CES):
        return spec.beta > 0
    if isinstance(spec, CobbDouglas):
        return spec.alpha > 0
    if isinstance(spec, Conic):
        out = np.zeros(spec.m, dtype=bool)
        for lam, part in spec.parts:
            if lam > 0:
                out |= interest(part)
        return out
    return np.array([len(u) > 0 and u[0] > 0 for u in spec.rates])


def elasticity_bound(spec: DemandSpec) -> float | None:
    if isinstance(spec, CES):
        return spec.sigma
    if isinstance(spec, CobbDouglas):
        return 1.0
    if isinstance(spec, Conic):
        fs = [elasticity_bound(part) for _, part in spec.parts]
        return None if any(f is None for f in fs) else max(fs)
    return None


def _check_prices(p: np.ndarray):
    if np.any(~(p > 0)):
        raise ValueError("nonpositive price")


def mbb_set(v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Indicator of goods attaining the maximum bang-per-buck v_j/p_j."""
    r = v / p
    top = r.max()
    return (r >= top * (1 - RATIO_TOL)) & (v > 0)


def demand(spec: DemandSpec, p, b: float) -> DemandAnswer:
    p = np.asarray(p, dtype=float)
    _check_prices(p)
    b = float(b)
    m = len(p)
    if isinstance(spec, GaleBASPLC):
        return gale_demand_basplc(spec, p, b)
    if b <= 0:
        return DemandAnswer(np.zeros(m), 0.0)
    if isinstance(spec, Linear):
        x = np.zeros(m)
        k = int(np.argmax(mbb_set(spec.v, p)))
        x[k] = b / p[k]
    elif isinstance(spec, CES):
        s = spec.sigma
        # normalise prices first so large exponents do not overflow
        scale = p.max()
        q = p / scale
        w = spec.beta * q ** (-s)
        x = w * b / (np.dot(spec.beta, q ** (1 - s)) * scale)
    elif isinstance(spec, CobbDouglas):
        x = b * spec.alpha / p
    elif isinstance(spec, Conic):
        x = np.zeros(m)
        for lam, part in spec.parts:
            if lam > 0:
                x += lam * demand(part, p, b).bundle
    else:
        raise TypeError(f"unknown demand spec {type(spec).__name__}")
    return DemandAnswer(x, float(np.dot(p, x)))


def demand_monotone(spec: DemandSpec, p, b: float, p_new, b_new: float, x) -> np.ndarray:
    """A bundle in D(p_new, b_new) keeping x_j wherever the price did not move."""
    p = np.asarray(p, dtype=float)
    p_new = np.asarray(p_new, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_prices(p_new)
    if np.any(p_new < p) or b_new < b - 1e-12 * max(1.0, b):
        raise ValueError("demand_monotone needs (p', b') >= (p, b)")
    fixed = p_new == p
    if isinstance(spec, Linear):
        return linear_bundle_with(spec.v, p_new, b_new, np.where(fixed, x, 0.0))
    if isinstance(spec, GaleBASPLC):
        return basplc_greedy(spec, p_new, b_new, held=np.where(fixed, x, 0.0)).bundle
    return demand(spec, p_new, b_new).bundle


def linear_bundle_with(v: np.ndarray, p: np.ndarray, b: float, c: np.ndarray) -> np.ndarray | None:
    """Linear-demand bundle containing c, or None if c is not MBB-supported."""
    c = np.asarray(c, dtype=float)
    mbb = mbb_set(v, p)
    held = c > 0
    if np.any(held & ~mbb):
        return None
    spent = float(np.dot(p, c))
    if spent > b * (1 + 1e-9) + 1e-12:
        return None
    y = c.copy()
    rest = max(b - spent, 0.0)
    if rest > 0:
        pref = np.flatnonzero(held & mbb)
        k = int(pref[0]) if len(pref) else int(np.flatnonzero(mbb)[0])
        y[k] += rest / p[k]
    return y


def gale_demand_basplc(spec: GaleBASPLC, p, b: float) -> DemandAnswer:
    p = np.asarray(p, dtype=float)
    _check_prices(p)
    return basplc_greedy(spec, p, float(b))


def basplc_greedy(spec: GaleBASPLC, p: np.ndarray, b: float, held=None) -> DemandAnswer:
    """Greedy optimum of the capped knapsack program behind the Gale demand.

    Segments are bought in order of u/p. The total utility of the optimum is
    unique; only its split among segments with tied ratios is not, and there
    ``held`` (per-good quantities) gets priority.
    """
    m = spec.m
    segs = [np.zeros(len(u)) for u in spec.rates]
    if b <= 0:
        return DemandAnswer(np.zeros(m), 0.0, 0.0, 0.0, segs)
    entries = []
    for j in range(m):
        for t, (u, d) in enumerate(zip(spec.rates[j], spec.lengths[j])):
            if u > 0:
                entries.append((u / p[j], j, t))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    held_segs = spec.segments_of(np.asarray(held, dtype=float)) if held is not None else None

    U = spec.cap
    V = 0.0
    beta = gamma = None
    i = 0
    while i < len(entries):
        rho = entries[i][0]
        k = i
        while k < len(entries) and entries[k][0] >= rho * (1 - RATIO_TOL):
            k += 1
        group = entries[i:k]
        if V >= U:
            beta = max(rho, U / b)
            break
        if rho * b <= V:
            beta = V / b
            break
        room = sum(spec.rates[j][t] * spec.lengths[j][t] for _, j, t in group)
        target = min(U, rho * b, V + room)
        if target >= V + room:
            for _, j, t in group:
                segs[j][t] = spec.lengths[j][t]
            V += room
            i = k
            continue
        _fill_group(spec, group, segs, target - V, held_segs)
        V = target
        beta = rho
        break
    if beta is None:
        # every positive segment bought
        beta = U / b if V >= U else V / b
    if V >= U and U < math.inf:
        gamma = max(b / U - 1.0 / beta, 0.0) if beta > 0 else 0.0
    else:
        gamma = 0.0
    x = np.array([s.sum() for s in segs])
    return DemandAnswer(x, float(np.dot(p, x)), float(beta), float(gamma), segs)


def _fill_group(spec, group, segs, amount, held_segs):
    """Spread ``amount`` of utility over tied segments, held ones first."""
    if held_segs is not None:
        for _, j, t in group:
            u = spec.rates[j][t]
            q = min(held_segs[j][t], amount / u)
            if q > 0:
                segs[j][t] = q
                amount -= q * u
    for _, j, t in group:
        if amount <= 0:
            break
        u = spec.rates[j][t]
        q = min(spec.lengths[j][t] - segs[j][t], amount / u)
        segs[j][t] += q
        amount -= q * u


def basplc_kkt_residual(spec: GaleBASPLC, p, b: float, segs, beta: float, gamma: float) -> float:
    """Largest violation of the Gale program's KKT system for a segment fill."""
    p = np.asarray(p, dtype=float)
    util = sum(float(np.dot(u, s)) for u, s in zip(spec.rates, segs))
    res = 0.0
    if util <= 0:
        # zero bundle is optimal iff no segment has positive utility
        return 0.0 if all(np.all(u <= 0) for u in spec.rates) or b <= 0 else math.inf
    lam = b / util
    scale = max(1.0, float(p.max()))
    for j in range(spec.m):
        for t, (u, d) in enumerate(zip(spec.rates[j], spec.lengths[j])):
            x = segs[j][t]
            gap = lam * u - p[j] - u * gamma  # equals r_jt at the optimum
            if x > 1e-12:
                if x < d - 1e-12:
                    res = max(res, abs(gap))
                else:
                    res = max(res, max(-gap, 0.0))
            else:
                res = max(res, max(gap, 0.0))
    if gamma > 0:
        res = max(res, abs(util - spec.cap) / max(1.0, spec.cap))
    if util > spec.cap * (1 + 1e-12):
        res = max(res, util - spec.cap)
    if beta > 0 and abs(1.0 / beta - (lam - gamma)) > 1e-8 * max(1.0, lam):
        res = max(res, abs(1.0 / beta - (lam - gamma)))
    return res / scale


def utility(spec: DemandSpec, x) -> float:
    """Utility value; undefined for Conic combinations."""
    x = np.asarray(x, dtype=float)
    if isinstance(spec, Linear):
        return float(np.dot(spec.v, x))
    if isinstance(spec, CobbDouglas):
        mask = spec.alpha > 0
        if np.any(x[mask] <= 0):
            return 0.0
        return float(np.exp(np.dot(spec.alpha[mask], np.log(x[mask]))))
    if isinstance(spec, CES):
        r = (spec.sigma - 1) / spec.sigma
        return float(np.dot(spec.beta ** (1 / spec.sigma), x ** r) ** (1 / r))
    if isinstance(spec, GaleBASPLC):
        return spec.utility(x)
    raise TypeError("utility is not defined for conic combinations")


def utility_gradient(spec: DemandSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if isinstance(spec, CobbDouglas):
        u = utility(spec, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(spec.alpha > 0, spec.alpha * u / x, 0.0)
        return g
    if isinstance(spec, CES):
        s = spec.sigma
        u = utility(spec, x)
        with np.errstate(divide="ignore"):
            return spec.beta ** (1 / s) * (u / x) ** (1 / s)
    if isinstance(spec, Linear):
        return spec.v.copy()
    raise TypeError(f"no gradient for {spec.kind}")


# JSON encoding -------------------------------------------------------------

def _num(x: float):
    return "inf" if x == math.inf else float(x)


def _parse_num(x) -> float:
    return math.inf if x in ("inf", "Infinity", None) else float(x)


def spec_to_json(spec: DemandSpec) -> dict:
    if isinstance(spec, Linear):
        return {"type": "linear", "v": spec.v.tolist()}
    if isinstance(spec, CES):
        return {"type": "ces", "beta": spec.beta.tolist(), "sigma": spec.sigma}
    if isinstance(spec, CobbDouglas):
        return {"type": "cobb_douglas", "alpha": spec.alpha.tolist()}
    if isinstance(spec, Conic):
        return {"type": "conic", "parts": [{"lambda": l, "demand": spec_to_json(s)} for l, s in spec.parts]}
    if isinstance(spec, GaleBASPLC):
        segs = [[[float(u), float(d)] for u, d in zip(r, l)] for r, l in zip(spec.rates, spec.lengths)]
        return {"type": "basplc", "segments": segs, "cap": _num(spec.cap)}
    raise TypeError(type(spec).__name__)


def spec_from_json(obj: dict) -> DemandSpec:
    kind = obj["type"]
    if kind == "linear":
        return Linear(obj["v"])
    if kind == "ces":
        return CES(obj["beta"], obj["sigma"])
    if kind == "cobb_douglas":
        return CobbDouglas(obj["alpha"])
    if kind == "conic":
        return Conic(tuple((p["lambda"], spec_from_json(p["demand"])) for p in obj["parts"]))
    if kind == "basplc":
        return GaleBASPLC.from_segments(obj["segments"], _parse_num(obj.get("cap", "inf")))
    raise ValueError(f"unknown demand type {kind!r}")


def specs_equal(a: DemandSpec, b: DemandSpec) -> bool:
    return spec_to_json(a) == spec_to_json(b)


def dominating_bundle(spec: DemandSpec, p, b: float, c, tol: float = 1e-9) -> np.ndarray | None:
    """A bundle of D(p, b) that dominates c, resolving ties toward c.

    Returns None when no such bundle exists (within ``tol``).
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    slack = tol * max(1.0, float(np.max(np.abs(c), initial=0.0)))
    if isinstance(spec, Linear):
        if b <= 0:
            z = np.zeros_like(c)
        else:
            z = linear_bundle_with(spec.v, p, b, np.where(c > slack, c, 0.0))
    elif isinstance(spec, GaleBASPLC):
        z = basplc_greedy(spec, p, b, held=c).bundle
    else:
        z = demand(spec, p, b).bundle
    if z is None or np.any(z < c - slack):
        return None
    return z
