"""Core value types: prices, instances, reports, and their JSON encoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .demand import (
    DemandSpec,
    GaleBASPLC,
    is_gale,
    spec_from_json,
    spec_to_json,
    spec_violations,
)

# absolute tolerance for money and quantity comparisons
TOL = 1e-9


def max_exponent_default(eps: float, ratio: float = 1e6) -> int:
    return int(math.ceil(math.log(ratio) / math.log1p(eps)))


@dataclass
class PriceVector:
    """p_j = base_j * (1+eps)**exponent_j, exponents integer and monotone."""

    base: np.ndarray
    exponent: np.ndarray
    eps: float

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.exponent = np.asarray(self.exponent, dtype=np.int64)

    @classmethod
    def ones(cls, m: int, eps: float) -> "PriceVector":
        return cls(np.ones(m), np.zeros(m, dtype=np.int64), eps)

    @property
    def m(self) -> int:
        return len(self.base)

    def value(self, j: int) -> float:
        return float(self.base[j] * (1.0 + self.eps) ** int(self.exponent[j]))

    def values(self) -> np.ndarray:
        return self.base * (1.0 + self.eps) ** self.exponent.astype(float)

    def caps(self) -> np.ndarray:
        # the cap of good j is the price one exponent higher, so a bumped
        # price equals the old cap bit for bit
        return self.base * (1.0 + self.eps) ** (self.exponent + 1).astype(float)

    def cap(self, j: int) -> float:
        return float(self.base[j] * (1.0 + self.eps) ** int(self.exponent[j] + 1))

    def copy(self) -> "PriceVector":
        return PriceVector(self.base.copy(), self.exponent.copy(), self.eps)

    def to_json(self) -> dict:
        return {"base": self.base.tolist(), "exponent": self.exponent.tolist(), "eps": self.eps}

    @classmethod
    def from_json(cls, obj: dict) -> "PriceVector":
        return cls(obj["base"], obj["exponent"], obj["eps"])


def price_value(pv: PriceVector, j: int) -> float:
    return pv.value(j)


@dataclass
class IndividualPrice:
    """An agent's prices p^(i); ``at_cap`` is authoritative for H_i."""

    values: np.ndarray
    at_cap: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.at_cap = np.asarray(self.at_cap, dtype=bool)

    @classmethod
    def low(cls, p: PriceVector) -> "IndividualPrice":
        return cls(p.values(), np.zeros(p.m, dtype=bool))

    def copy(self) -> "IndividualPrice":
        return IndividualPrice(self.values.copy(), self.at_cap.copy())

    def to_json(self) -> dict:
        return {"values": self.values.tolist(), "at_cap": self.at_cap.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "IndividualPrice":
        return cls(obj["values"], obj["at_cap"])


@dataclass
class ExchangeInstance:
    endowments: np.ndarray  # (n, m)
    demands: list
    eps: float = 0.05

    def __post_init__(self):
        self.endowments = np.atleast_2d(np.asarray(self.endowments, dtype=float))

    @property
    def n(self) -> int:
        return self.endowments.shape[0]

    @property
    def m(self) -> int:
        return self.endowments.shape[1]

    @property
    def supply(self) -> np.ndarray:
        return self.endowments.sum(axis=0)

    kind = "exchange"


@dataclass
class SRInit:
    """Given-mode initial prices p̄ and, optionally, an allocation with Σx ≥ 1."""

    prices: np.ndarray
    allocation: np.ndarray | None = None

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        if self.allocation is not None:
            self.allocation = np.atleast_2d(np.asarray(self.allocation, dtype=float))


@dataclass
class SRInstance:
    budgets: np.ndarray
    caps: np.ndarray
    demands: list
    eps: float = 0.05
    init: SRInit | None = None  # None means UniformEmpty

    def __post_init__(self):
        self.budgets = np.asarray(self.budgets, dtype=float)
        self.caps = np.asarray(self.caps, dtype=float)

    @property
    def n(self) -> int:
        return len(self.budgets)

    @property
    def m(self) -> int:
        return len(self.caps)

    def effective_caps(self) -> np.ndarray:
        return np.minimum(self.caps, self.budgets.sum())

    kind = "sr"


@dataclass
class NSWInstance:
    """Indivisible copies D_j and budget-additive SPLC utilities.

    ``segments[i][j]`` is a list of (u, d) pairs with strictly decreasing u
    and lengths summing to D_j; ``caps[i]`` is U_i (may be inf).
    """

    copies: np.ndarray
    segments: list
    caps: np.ndarray
    eps: float | None = None

    def __post_init__(self):
        self.copies = np.asarray(self.copies, dtype=np.int64)
        self.caps = np.asarray(self.caps, dtype=float)
        self.segments = [[[(float(u), float(d)) for u, d in segs] for segs in row] for row in self.segments]

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def m(self) -> int:
        return len(self.copies)

    @classmethod
    def additive(cls, u, copies=None, caps=None) -> "NSWInstance":
        """Linear (single segment) utilities u[i][j] per copy."""
        u = np.asarray(u, dtype=float)
        n, m = u.shape
        D = np.ones(m, dtype=np.int64) if copies is None else np.asarray(copies)
        segs = [[[(u[i, j], D[j])] if u[i, j] > 0 else [(0.0, D[j])] for j in range(m)] for i in range(n)]
        U = np.full(n, math.inf) if caps is None else np.asarray(caps, dtype=float)
        return cls(D, segs, U)

    kind = "nsw"


@dataclass
class EquilibriumReport:
    prices: PriceVector
    individual: list  # of IndividualPrice
    allocation: np.ndarray  # (n, m) owned bundles c^(i)
    certificates: np.ndarray  # (n, m) bundles z^(i) the solver believes dominate c
    budgets: np.ndarray
    surplus: float
    leftover: float
    iterations: int
    rounds: list
    wall_time: float
    status: str = "ok"  # ok | cap_breach | max_exponent | aborted
    kind: str = "exchange"
    message: str = ""
    stats: dict = field(default_factory=dict)

    def price_values(self) -> np.ndarray:
        return self.prices.values()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "status": self.status,
            "message": self.message,
            "prices": self.prices.to_json(),
            "price_values": self.prices.values().tolist(),
            "individual": [ip.to_json() for ip in self.individual],
            "allocation": self.allocation.tolist(),
            "certificates": self.certificates.tolist(),
            "budgets": self.budgets.tolist(),
            "surplus": self.surplus,
            "leftover": self.leftover,
            "iterations": self.iterations,
            "rounds": list(self.rounds),
            "wall_time": self.wall_time,
            "stats": _jsonable(self.stats),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EquilibriumReport":
        return cls(
            prices=PriceVector.from_json(obj["prices"]),
            individual=[IndividualPrice.from_json(o) for o in obj["individual"]],
            allocation=np.asarray(obj["allocation"], dtype=float),
            certificates=np.asarray(obj["certificates"], dtype=float),
            budgets=np.asarray(obj["budgets"], dtype=float),
            surplus=obj["surplus"],
            leftover=obj["leftover"],
            iterations=obj["iterations"],
            rounds=list(obj["rounds"]),
            wall_time=obj["wall_time"],
            status=obj.get("status", "ok"),
            kind=obj.get("kind", "exchange"),
            message=obj.get("message", ""),
            stats=obj.get("stats", {}),
        )


def _jsonable(x: Any):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "inf" if x == math.inf else x
    return x


# validation ----------------------------------------------------------------

def validate_instance(inst) -> list[str]:
    out: list[str] = []
    if isinstance(inst, ExchangeInstance):
        e = inst.endowments
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            out.append("endowments must be finite and nonnegative")
        for j in np.flatnonzero(inst.supply <= 0):
            out.append(f"good {j} has zero supply")
        if len(inst.demands) != inst.n:
            out.append(f"{len(inst.demands)} demand specs for {inst.n} agents")
        for i, spec in enumerate(inst.demands):
            if is_gale(spec):
                out.append(f"agent {i}: Gale demand does not spend its budget; not allowed in exchange markets")
            out.extend(f"agent {i}: {v}" for v in spec_violations(spec, inst.m))
        out.extend(_eps_violations(inst.eps))
    elif isinstance(inst, SRInstance):
        if np.any(inst.budgets < 0) or not np.all(np.isfinite(inst.budgets)):
            out.append("budgets must be finite and nonnegative")
        for j in np.flatnonzero(~(inst.caps > 0)):
            out.append(f"good {j} has nonpositive spending cap")
        if len(inst.demands) != inst.n:
            out.append(f"{len(inst.demands)} demand specs for {inst.n} agents")
        for i, spec in enumerate(inst.demands):
            out.extend(f"agent {i}: {v}" for v in spec_violations(spec, inst.m))
        if inst.init is not None:
            pbar = inst.init.prices
            if len(pbar) != inst.m or np.any(pbar <= 0):
                out.append("initial prices must be positive, one per good")
            elif np.any(pbar >= inst.effective_caps()):
                out.append("initial prices must lie below the caps")
        out.extend(_eps_violations(inst.eps))
    elif isinstance(inst, NSWInstance):
        if np.any(inst.copies < 1):
            out.append("every good needs at least one copy")
        if np.any(~(inst.caps > 0)):
            out.append("utility caps must be positive")
        if len(inst.caps) != inst.n:
            out.append("one utility cap per agent required")
        for i, row in enumerate(inst.segments):
            if len(row) != inst.m:
                out.append(f"agent {i}: {len(row)} segment lists for {inst.m} goods")
                continue
            for j, segs in enumerate(row):
                u = np.array([s[0] for s in segs])
                d = np.array([s[1] for s in segs])
                if len(segs) == 0:
                    out.append(f"agent {i}, good {j}: no segments")
                    continue
                if np.any(np.diff(u) >= 0):
                    out.append(f"agent {i}, good {j}: rates must be strictly decreasing")
                if np.any(u < 0) or np.any(d <= 0):
                    out.append(f"agent {i}, good {j}: rates >= 0 and lengths > 0 required")
                if np.any(d != np.round(d)):
                    out.append(f"agent {i}, good {j}: segment lengths must be whole copies")
                if abs(d.sum() - inst.copies[j]) > TOL:
                    out.append(f"agent {i}, good {j}: segment lengths sum to {d.sum()}, not {inst.copies[j]}")
        if inst.eps is not None:
            out.extend(_eps_violations(inst.eps))
    else:
        out.append(f"unknown instance type {type(inst).__name__}")
    return out


def _eps_violations(eps: float) -> list[str]:
    # the step potential bound only needs (1+eps)^2 - 1 <= 2.25 eps
    return [] if 0 < eps <= 0.25 else [f"eps must lie in (0, 0.25], got {eps}"]


# JSON ----------------------------------------------------------------------

def _num(x):
    return "inf" if x == math.inf else float(x)


def _parse(x) -> float:
    return math.inf if x in ("inf", "Infinity") else float(x)


def instance_to_json(inst) -> dict:
    if isinstance(inst, ExchangeInstance):
        return {
            "kind": "exchange",
            "eps": inst.eps,
            "agents": [
                {"endowment": e.tolist(), "demand": spec_to_json(s)}
                for e, s in zip(inst.endowments, inst.demands)
            ],
        }
    if isinstance(inst, SRInstance):
        out = {
            "kind": "sr",
            "eps": inst.eps,
            "agents": [{"budget": float(b), "demand": spec_to_json(s)} for b, s in zip(inst.budgets, inst.demands)],
            "caps": [_num(t) for t in inst.caps],
        }
        if inst.init is not None:
            init = {"prices": inst.init.prices.tolist()}
            if inst.init.allocation is not None:
                init["allocation"] = inst.init.allocation.tolist()
            out["init"] = init
        return out
    if isinstance(inst, NSWInstance):
        out = {
            "kind": "nsw",
            "agents": [
                {"demand": {"type": "basplc", "segments": [[list(s) for s in segs] for segs in row], "cap": _num(U)}}
                for row, U in zip(inst.segments, inst.caps)
            ],
            "copies": inst.copies.tolist(),
        }
        if inst.eps is not None:
            out["eps"] = inst.eps
        return out
    raise TypeError(type(inst).__name__)


def instance_from_json(obj: dict):
    kind = obj["kind"]
    if kind == "exchange":
        agents = obj["agents"]
        return ExchangeInstance(
            [a["endowment"] for a in agents],
            [spec_from_json(a["demand"]) for a in agents],
            obj.get("eps", 0.05),
        )
    if kind == "sr":
        agents = obj["agents"]
        init = None
        if "init" in obj and obj["init"] is not None:
            init = SRInit(obj["init"]["prices"], obj["init"].get("allocation"))
        m = len(obj["caps"])
        return SRInstance(
            [a["budget"] for a in agents],
            [_parse(t) for t in obj["caps"]] if m else [],
            [spec_from_json(a["demand"]) for a in agents],
            obj.get("eps", 0.05),
            init,
        )
    if kind == "nsw":
        segs, caps = [], []
        for a in obj["agents"]:
            d = a["demand"]
            segs.append([[tuple(s) for s in row] for row in d["segments"]])
            caps.append(_parse(d.get("cap", "inf")))
        return NSWInstance(obj["copies"], segs, caps, obj.get("eps"))
    raise ValueError(f"unknown instance kind {kind!r}")


def load_instance(path):
    with open(path) as fh:
        return instance_from_json(json.load(fh))


def save_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
