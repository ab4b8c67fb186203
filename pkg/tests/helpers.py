"""Seeded instance batteries shared by the test modules."""

import logging

import numpy as np

from wgs_auction.auction_sr import overdemand_init
from wgs_auction.market_model import SRInstance
from wgs_auction.demand import Linear
from wgs_auction.verify import random_exchange_instance, random_nsw_instance, random_sr_instance

EXCHANGE_EPS = (0.25, 0.1, 0.05)


def exchange_battery(count=30):
    """Mixed linear/CES/Cobb-Douglas/conic exchange markets, n, m <= 10."""
    out = []
    for k in range(count):
        rng = np.random.default_rng(100 + k)
        out.append(random_exchange_instance(rng, EXCHANGE_EPS[k % 3]))
    return out


def sr_battery(count=15):
    """Fisher markets with mixed caps; seeds whose Given start does not
    exist are redrawn from the same stream."""
    out = []
    for k in range(count):
        rng = np.random.default_rng(1000 + k)
        eps = (0.1, 0.05)[k % 2]
        while True:
            inst = random_sr_instance(rng, eps)
            try:
                overdemand_init(inst)
                break
            except ValueError:
                continue
        out.append(inst)
    return out


def linear_fisher_battery(count=5, eps=0.02):
    """Linear Fisher markets with m <= 3 and no spending caps."""
    out = []
    for k in range(count):
        rng = np.random.default_rng(500 + k)
        n = int(rng.integers(2, 5))
        m = int(rng.integers(2, 4))
        specs = [Linear(rng.uniform(0.1, 1.0, size=m)) for _ in range(n)]
        out.append(SRInstance(rng.uniform(0.5, 2.0, size=n), np.full(m, np.inf), specs, eps))
    return out


def nsw_battery(count=20, seed=7):
    rng = np.random.default_rng(seed)
    return [random_nsw_instance(rng) for _ in range(count)]


def quiet():
    # V_max fallbacks log a warning per run
    logging.getLogger("wgs_auction").setLevel(logging.ERROR)


FUZZ_FAMILY = {"linear": "linear", "cobb-douglas": "cobb_douglas", "elasticity": None, "gale": None,
               "basplc": "basplc"}


def fnp_fuzz(routine, calls, seed):
    """Random FNP calls satisfying the routine's preconditions, each checked
    against its contract and recorded in the process-wide log.

    Returns the list of (call index, problems) with violations.
    """
    from wgs_auction.demand import basplc_greedy, demand
    from wgs_auction.fnp import FNP_LOG, call_fnp, check_fnp_contract
    from wgs_auction.market_model import IndividualPrice, PriceVector
    from wgs_auction.verify import random_spec

    rng = np.random.default_rng(seed)
    bad = []
    for k in range(calls):
        m = int(rng.integers(2, 7))
        eps = float(rng.choice([0.25, 0.1, 0.05, 0.01]))
        if routine == "elasticity":
            fam = ("ces", "cobb_douglas", "conic")[k % 3]
        elif routine == "gale":
            fam = ("ces", "cobb_douglas")[k % 2]
        else:
            fam = FUZZ_FAMILY[routine]
        spec = random_spec(fam, m, rng)
        p = PriceVector(np.exp(rng.uniform(-1, 1, m)), rng.integers(0, 3, m), eps)
        pv, q = p.values(), p.caps()
        flags = rng.random(m) < 0.25
        vals = np.where(flags, q, pv * (1 + eps) ** rng.uniform(0, 0.999, m))
        p_i = IndividualPrice(vals, flags)
        b = float(np.exp(rng.uniform(-1, 1)))
        if fam == "basplc":
            x = basplc_greedy(spec, vals, b).bundle
        elif fam == "linear":
            from wgs_auction.auction_sr import _spread_linear

            x = _spread_linear(spec.v, vals, b)
        else:
            x = demand(spec, vals, b).bundle
        c = x * rng.uniform(0, 1, m) * (rng.random(m) < 0.7)
        res = call_fnp(spec, routine, p_i, q, eps, c, b)
        problems = check_fnp_contract(spec, routine, p_i, q, eps, c, b, res)
        FNP_LOG.record(spec, routine, problems, res.steps, m)
        if problems:
            bad.append((k, problems))
    return bad
