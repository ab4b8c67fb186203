"""FindNewPrices: the agent-local price-raising oracle of the auction.

Given agent i's current prices p^(i), the cap vector q = (1+eps)p, its
holdings c and budget b, each routine returns raised prices p~ and a bundle
y with

  (A)  y >= c and y in D(p~, b)
  (B)  p^(i) <= p~ <= q, and p~_j = q_j whenever y_j > (1+eps) c_j.

The linear, Cobb-Douglas, Gale and BASPLC routines satisfy the stronger
(B') where the threshold is c_j itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .demand import (
    CES,
    RATIO_TOL,
    CobbDouglas,
    Conic,
    GaleBASPLC,
    Linear,
    basplc_greedy,
    basplc_kkt_residual,
    demand,
    elasticity_bound,
    linear_bundle_with,
    mbb_set,
    utility,
    utility_gradient,
)
from .market_model import IndividualPrice, PriceVector

CAP_SNAP = 1e-12


@dataclass
class FnpResult:
    prices: IndividualPrice
    bundle: np.ndarray
    steps: int = 0
    variant: str = ""
    # BASPLC certificate at the new prices
    segments: list | None = None
    beta: float | None = None
    gamma: float | None = None
    residual: float = 0.0


def _caps(q) -> np.ndarray:
    return q.caps() if isinstance(q, PriceVector) else np.asarray(q, dtype=float)


def _snap(pt: np.ndarray, flags: np.ndarray, q: np.ndarray) -> None:
    near = pt >= q * (1 - CAP_SNAP)
    pt[near] = q[near]
    flags |= near


# elasticity (Algorithm "Finding new prices") -------------------------------

def fnp_elasticity(spec, f: float | None, p_i: IndividualPrice, q, eps: float, c, b: float) -> FnpResult:
    if f is None:
        raise ValueError("elasticity bound required; this demand system has none")
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    pt = p_i.values.copy()
    flags = p_i.at_cap.copy()
    mult = (1.0 + eps) ** (1.0 / f)
    y = demand(spec, pt, b).bundle
    bumps = 0
    while True:
        bad = np.flatnonzero(~flags & (y > (1 + eps) * c * (1 + 1e-12) + 1e-15))
        if len(bad) == 0:
            break
        j = bad[0]
        pt[j] = min(pt[j] * mult, q[j])
        if pt[j] >= q[j] * (1 - CAP_SNAP):
            pt[j] = q[j]
            flags[j] = True
        bumps += 1
        y = demand(spec, pt, b).bundle
    return FnpResult(IndividualPrice(pt, flags), y, bumps, "elasticity")


# linear ---------------------------------------------------------------------

def fnp_linear(v, p_i: IndividualPrice, q, c, b: float) -> FnpResult:
    v = np.asarray(v, dtype=float)
    if not np.any(v > 0):
        raise ValueError("linear utility v = 0")
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    pt = p_i.values.copy()
    flags = p_i.at_cap.copy()
    if b <= 0:
        return FnpResult(IndividualPrice(pt, flags), c.copy(), 0, "linear")
    S = mbb_set(v, pt)
    steps = 0
    while True:
        spend = float(np.dot(pt, c))
        if spend >= b * (1 - 1e-15):
            return FnpResult(IndividualPrice(pt, flags), c.copy(), steps, "linear")
        idx = np.flatnonzero(S)
        a_cap = np.where(flags[idx], 1.0, q[idx] / pt[idx])
        k = int(idx[np.argmin(a_cap)])
        alpha_cap = float(a_cap.min())
        spend_S = float(np.dot(pt[idx], c[idx]))
        alpha_b = b / spend_S if spend_S > 0 else math.inf
        beta = float(np.max(v[idx] / pt[idx]))
        out = np.flatnonzero(~S & (v > 0))
        a_in = beta * pt[out] / v[out] if len(out) else np.array([])
        alpha_in = float(a_in.min()) if len(out) else math.inf
        alpha = min(alpha_cap, alpha_b, alpha_in)
        steps += 1
        pt[idx] *= alpha
        if alpha_b <= alpha:
            _snap(pt, flags, q)
            return FnpResult(IndividualPrice(pt, flags), c.copy(), steps, "linear")
        if alpha_cap <= alpha:
            pt[k] = q[k]
            flags[k] = True
            _snap(pt, flags, q)
            y = c.copy()
            rest = b - float(np.dot(pt, c)) + pt[k] * c[k]
            y[k] = max(c[k], rest / pt[k])
            return FnpResult(IndividualPrice(pt, flags), y, steps, "linear")
        S[out[a_in <= alpha * (1 + RATIO_TOL)]] = True


# Cobb-Douglas -------------------------------------------------------------

def fnp_cobb_douglas(alpha, p_i: IndividualPrice, q, c, b: float) -> FnpResult:
    alpha = np.asarray(alpha, dtype=float)
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    pt = p_i.values.copy()
    flags = p_i.at_cap.copy()
    y = np.zeros_like(c)
    for j in range(len(alpha)):
        if alpha[j] <= 0 or b <= 0:
            y[j] = 0.0
            continue
        want = b * alpha[j] / c[j] if c[j] > 0 else math.inf
        if flags[j] or want >= q[j] * (1 - CAP_SNAP):
            pt[j] = q[j]
            flags[j] = True
            y[j] = max(c[j], b * alpha[j] / q[j])
        else:
            pt[j] = max(pt[j], want)
            y[j] = c[j]
    return FnpResult(IndividualPrice(pt, flags), y, 0, "cobb_douglas")


# Gale two-price convex program ------------------------------------------------

def fnp_gale_convex(spec, p_i: IndividualPrice, q, c, b: float, x=None,
                    tol: float = 1e-9, max_iter: int = 20000) -> FnpResult:
    """Projected gradient ascent on  b ln u(y'+y'') - p.y' - q.y''.

    Variables live in the box 0 <= y' <= c, y'' >= 0. The gradient is
    scaled by the current bundle; step lengths follow the Barzilai-Borwein
    rule with Armijo backtracking along the projection arc.
    The problem is solved in units where max q = 1 and b = 1, and the
    residual is the natural residual |z - P(z + grad)|_inf in those units.
    """
    if not isinstance(spec, (CES, CobbDouglas)):
        raise TypeError("two-price program needs a CES or Cobb-Douglas utility")
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    p = p_i.values.copy()
    flags = p_i.at_cap.copy()
    m = len(c)
    if b <= 0:
        return FnpResult(IndividualPrice(p, flags), c.copy(), 0, "gale")
    ps = float(q.max())
    qs, pn = q / ps, p / ps
    cn = c * ps / b
    live = (spec.beta if isinstance(spec, CES) else spec.alpha) > 0

    x0 = demand(spec, p, b).bundle if x is None else np.asarray(x, dtype=float)
    x0 = x0 * ps / b
    y1 = np.minimum(x0, cn)
    y2 = np.maximum(x0 - cn, 0.0)
    y1[~live] = 0.0
    y2[~live] = 0.0

    lo = np.zeros(2 * m)
    hi = np.concatenate([np.where(live, cn, 0.0), np.where(live, np.inf, 0.0)])
    cost = np.concatenate([pn, qs])

    def obj(z):
        u = utility(spec, z[:m] + z[m:])
        return -math.inf if u <= 0 else math.log(u) - float(np.dot(cost, z))

    def grad(z):
        # the marginal utility is unbounded at y_j = 0; the optimum is
        # interior, so evaluating just above zero keeps the step finite
        y = np.where(live, np.maximum(z[:m] + z[m:], 1e-12), 0.0)
        g = utility_gradient(spec, y) / utility(spec, y)
        g = np.where(live, g, 0.0)
        return np.concatenate([g, g]) - cost

    def resid(z, g):
        return float(np.max(np.abs(z - np.clip(z + g, lo, hi))))

    z = np.concatenate([y1, y2])
    if not obj(z) > -math.inf:
        z = np.clip(np.concatenate([np.where(live, 1.0 / m, 0), np.zeros(m)]), lo, hi)
        z[m:] += np.where(live & (z[:m] <= 0), 1.0 / m, 0.0)
    g = grad(z)
    F = obj(z)
    step = 1.0
    it = 0
    r = resid(z, g)
    while r > tol and it < max_iter:
        it += 1
        # diagonal scaling by the current bundle: curvature of log u grows
        # like 1/y_j, so small coordinates take proportionally small steps
        ytot = z[:m] + z[m:]
        w = np.concatenate([ytot, ytot])
        w = np.maximum(w, 1e-8)
        d = w * g
        s = step
        while True:
            zn = np.clip(z + s * d, lo, hi)
            Fn = obj(zn)
            if Fn > -math.inf:
                if Fn >= F + 1e-4 * float(np.dot(g, zn - z)):
                    gn = grad(zn)
                    break
                # near the optimum the gain drops below the rounding of F;
                # a concave function still ascends along zn - z as long as
                # its slope at zn is nonnegative
                gn = grad(zn)
                if abs(Fn - F) <= 1e-12 * max(1.0, abs(F)) and float(np.dot(gn, zn - z)) >= 0:
                    break
            s *= 0.5
            if s < 1e-20:
                zn = None
                break
        if zn is None:
            break
        dz, dg = zn - z, gn - g
        curv = -float(np.dot(dz, dg))
        step = float(np.dot(dz, dz / w)) / curv if curv > 1e-30 else 1.0
        step = min(max(step, 1e-10), 1e10)
        z, g, F = zn, gn, Fn
        r = resid(z, g)
    if not r <= tol:
        raise RuntimeError(f"two-price program did not converge: residual {r:.3e} after {it} iterations")

    y1, y2 = z[:m] * b / ps, z[m:] * b / ps
    gy = (g[:m] + pn) * ps  # marginal value b * du/u in original units
    pt = np.clip(gy, p, q)
    ytol = 1e-6 * max(1.0, float(np.max(y1 + y2)))
    for j in range(m):
        if flags[j] or y2[j] > ytol or gy[j] >= q[j] * (1 - 1e-6):
            pt[j] = q[j]
            flags[j] = True
        else:
            y2[j] = 0.0
            pt[j] = max(pt[j], p[j])
        if c[j] - y1[j] <= ytol:
            y1[j] = c[j]
    y = y1 + y2
    return FnpResult(IndividualPrice(pt, flags), y, it, "gale", residual=r)


# BASPLC (two-stage combinatorial routine) -------------------------------------

def fnp_basplc(spec: GaleBASPLC, p_i: IndividualPrice, q, c, b: float,
               x=None, beta: float | None = None, gamma: float | None = None) -> FnpResult:
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    pt = p_i.values.copy()
    flags = p_i.at_cap.copy()
    m = spec.m
    if x is None or beta is None:
        cert = basplc_greedy(spec, pt, b, held=c)
        beta, gamma = cert.beta, cert.gamma
    U = spec.cap
    rates, lengths = spec.rates, spec.lengths
    ys = spec.segments_of(c)
    # active segment: first one that is not full
    act = []
    for j in range(m):
        t = 0
        while t < len(rates[j]) and ys[j][t] >= lengths[j][t] * (1 - 1e-15):
            ys[j][t] = lengths[j][t]
            t += 1
        act.append(t)

    def util():
        return sum(float(np.dot(u, s)) for u, s in zip(rates, ys))

    def active_rate(j):
        t = act[j]
        return rates[j][t] if t < len(rates[j]) else 0.0

    def done(uy, bt):
        bound = min(U, b * bt)
        return uy >= bound * (1 - 1e-12) - 1e-15

    def finish(steps):
        uy = util()
        g = 0.0
        if U < math.inf and uy >= U * (1 - 1e-12) and beta > 0:
            g = max(b / U - 1.0 / beta, 0.0)
        y = np.array([s.sum() for s in ys])
        return FnpResult(IndividualPrice(pt, flags), y, steps, "basplc", ys, beta, g)

    if b <= 0 or beta <= 0 or done(util(), beta):
        return finish(0)

    hi = 1 + RATIO_TOL
    # Stage I: restore complementarity at the certificate's beta
    for j in range(m):
        while act[j] < len(rates[j]):
            u = rates[j][act[j]]
            if u / pt[j] <= beta * hi:
                break
            if not flags[j] and u / beta < q[j] * (1 - CAP_SNAP):
                pt[j] = max(pt[j], u / beta)
                break
            pt[j] = q[j]
            flags[j] = True
            if u / q[j] > beta * hi:
                ys[j][act[j]] = lengths[j][act[j]]
                act[j] += 1
            else:
                break

    def ratio_is_beta(j):
        u = active_rate(j)
        return u > 0 and abs(u / pt[j] - beta) <= RATIO_TOL * beta

    A = {j for j in range(m) if ratio_is_beta(j)}
    steps = 0
    # Stage II: price increases at a common rate, beta falls alongside
    while True:
        uy = util()
        if done(uy, beta):
            break
        capped = sorted(j for j in A if flags[j])
        if capped:
            j = capped[0]
            t = act[j]
            u = rates[j][t]
            room = lengths[j][t] - ys[j][t]
            need = (min(U, b * beta) - uy) / u
            if need < room:
                ys[j][t] += need
                break
            ys[j][t] = lengths[j][t]
            act[j] += 1
            A.discard(j)
            continue
        a_cap = min((q[j] / pt[j] for j in A), default=math.inf)
        a_bound = b * beta / uy if uy > 0 else math.inf
        outside = [l for l in range(m) if l not in A and active_rate(l) > 0]
        a_in = min((beta * pt[l] / active_rate(l) for l in outside), default=math.inf)
        alpha = min(a_cap, a_bound, a_in)
        if alpha == math.inf:
            break
        steps += 1
        for j in A:
            pt[j] *= alpha
        beta /= alpha
        for j in A:
            if pt[j] >= q[j] * (1 - CAP_SNAP):
                pt[j] = q[j]
                flags[j] = True
        for l in outside:
            if active_rate(l) / pt[l] >= beta * (1 - RATIO_TOL):
                A.add(l)
        if a_bound <= alpha:
            break
    return finish(steps)


# dispatch, contract checks and the call log --------------------------------------

FNP_CHOICES = ("auto", "elasticity", "linear", "cobb-douglas", "gale", "basplc")


def select_fnp(spec, choice: str = "auto") -> str:
    if choice not in FNP_CHOICES:
        raise ValueError(f"unknown fnp choice {choice!r}")
    if isinstance(spec, GaleBASPLC):
        if choice not in ("auto", "basplc"):
            raise ValueError("BASPLC agents need the basplc routine")
        return "basplc"
    if isinstance(spec, Linear):
        if choice not in ("auto", "linear"):
            raise ValueError("linear agents need the linear routine")
        return "linear"
    if isinstance(spec, CobbDouglas):
        if choice in ("auto", "cobb-douglas"):
            return "cobb-douglas"
        if choice in ("elasticity", "gale"):
            return choice
        raise ValueError(f"{choice} does not apply to Cobb-Douglas")
    if isinstance(spec, CES):
        if choice in ("auto", "elasticity"):
            return "elasticity"
        if choice == "gale":
            return "gale"
        raise ValueError(f"{choice} does not apply to CES")
    if isinstance(spec, Conic):
        if choice in ("auto", "elasticity"):
            return "elasticity"
        raise ValueError(f"{choice} does not apply to conic combinations")
    raise TypeError(type(spec).__name__)


def call_fnp(spec, routine: str, p_i: IndividualPrice, q, eps: float, c, b: float,
             x=None, beta=None, gamma=None) -> FnpResult:
    if routine == "linear":
        return fnp_linear(spec.v, p_i, q, c, b)
    if routine == "cobb-douglas":
        return fnp_cobb_douglas(spec.alpha, p_i, q, c, b)
    if routine == "elasticity":
        return fnp_elasticity(spec, elasticity_bound(spec), p_i, q, eps, c, b)
    if routine == "gale":
        return fnp_gale_convex(spec, p_i, q, c, b, x)
    if routine == "basplc":
        return fnp_basplc(spec, p_i, q, c, b, x, beta, gamma)
    raise ValueError(routine)


STRONG = {"linear", "cobb-douglas", "gale", "basplc"}


def check_fnp_contract(spec, routine: str, p_i: IndividualPrice, q, eps: float, c, b: float,
                       res: FnpResult) -> list[str]:
    """Violations of (A)/(B), and of (A')/(B') for the strong routines."""
    q = _caps(q)
    c = np.asarray(c, dtype=float)
    y = res.bundle
    pt, flags = res.prices.values, res.prices.at_cap
    out = []
    qtol = 1e-9 * max(1.0, float(np.max(np.abs(c), initial=0.0)))
    soft = routine == "gale"  # first-order solver, 1e-6 accuracy
    if soft:
        qtol = max(qtol, 1e-5 * max(1.0, float(np.max(y, initial=0.0))))
    if np.any(y < c - qtol):
        out.append("(A) y < c")
    if np.any(p_i.at_cap & ~flags):
        out.append("(B) cap flag dropped")
    if np.any(pt < p_i.values * (1 - 1e-15)):
        out.append("(B) price decreased")
    if np.any(flags & (pt != q)):
        out.append("(B) flagged price differs from cap")
    if np.any(~flags & (pt >= q * (1 - CAP_SNAP))):
        out.append("(B) price at cap without flag")
    thresh = c if routine in STRONG else (1 + eps) * c
    if np.any(~flags & (y > thresh + qtol)):
        out.append("(B') y exceeds holdings on an uncapped good" if routine in STRONG else "(B) y > (1+eps)c uncapped")
    # membership y in D(p~, b)
    if isinstance(spec, Linear):
        if linear_bundle_with(spec.v, pt, b, np.where(y > qtol, y, 0.0)) is None:
            out.append("(A) y not MBB-supported at p~")
        elif abs(float(np.dot(pt, y)) - b) > 1e-9 * max(1.0, b):
            out.append("(A) y does not spend the budget")
    elif isinstance(spec, GaleBASPLC):
        r = basplc_kkt_residual(spec, pt, b, res.segments, res.beta, res.gamma)
        if r > 1e-8:
            out.append(f"(A) Gale KKT residual {r:.2e}")
    else:
        z = demand(spec, pt, b).bundle
        rtol = 1e-5 if soft else 1e-9
        if np.any(np.abs(z - y) > rtol * np.maximum(1.0, np.abs(z))):
            out.append("(A) y differs from demand at p~")
    if routine == "elasticity":
        f = elasticity_bound(spec)
        if res.steps > len(c) * math.ceil(f - 1e-9):
            out.append(f"elasticity bumps {res.steps} > m ceil(f)")
    if routine == "basplc" and res.steps > spec.n_segments:
        out.append(f"basplc steps {res.steps} > total segments {spec.n_segments}")
    if routine == "gale" and res.residual > 1e-6:
        out.append(f"gale residual {res.residual:.2e}")
    return out


@dataclass
class FnpLog:
    """Process-wide tally of checked FNP calls."""

    calls: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    max_steps_ratio: dict = field(default_factory=dict)
    sink: Any = None  # optional text stream; one JSON line per call
    over_pooled: int = 0  # elasticity calls above ceil(m f)

    def record(self, spec, routine: str, problems: list[str], steps: int, m: int) -> None:
        bound = step_bound(spec, routine, m)
        if self.sink is not None:
            self.sink.write(json.dumps({"call": self.total, "routine": routine, "steps": steps,
                                        "bound": bound, "problems": problems}) + "\n")
        self.calls[routine] = self.calls.get(routine, 0) + 1
        if problems:
            self.violations.append((routine, problems))
        if bound:
            self.max_steps_ratio[routine] = max(self.max_steps_ratio.get(routine, 0.0), steps / bound)
        if routine == "elasticity" and steps > pooled_elasticity_bound(spec, m):
            self.over_pooled += 1

    @property
    def total(self) -> int:
        return sum(self.calls.values())

    def reset(self) -> None:
        self.calls.clear()
        self.violations.clear()
        self.max_steps_ratio.clear()
        self.over_pooled = 0


FNP_LOG = FnpLog()


def step_bound(spec, routine: str, m: int) -> float | None:
    """Worst-case step count of a routine.

    Elasticity: each price climbs from p_j to (1+eps)p_j in factors
    (1+eps)^(1/f), so a good takes at most ceil(f) bumps, m ceil(f) in all.
    """
    if routine == "elasticity":
        return m * math.ceil(elasticity_bound(spec) - 1e-9)
    if routine == "basplc":
        return spec.n_segments
    return None


def pooled_elasticity_bound(spec, m: int) -> int:
    """ceil(m f); equals the per-good bound m ceil(f) only for integer f."""
    return math.ceil(m * elasticity_bound(spec) - 1e-9)
