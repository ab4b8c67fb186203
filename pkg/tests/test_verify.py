import math

import numpy as np
import pytest

from wgs_auction.demand import CES, CobbDouglas, Linear
from wgs_auction.market_model import EquilibriumReport, ExchangeInstance, IndividualPrice, PriceVector, SRInstance
from wgs_auction.verify import (
    brute_force_fisher_eq,
    check_approx_equilibrium,
    check_approx_sr,
    dominating_demand,
    fisher_residual,
    property_suite,
)


def report(p, x, budgets, eps=0.05):
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    n, m = x.shape
    return EquilibriumReport(
        prices=PriceVector(p, np.zeros(m, dtype=np.int64), eps),
        individual=[IndividualPrice(p.copy(), np.zeros(m, dtype=bool)) for _ in range(n)],
        allocation=x, certificates=x.copy(), budgets=np.asarray(budgets, dtype=float),
        surplus=0.0, leftover=0.0, iterations=0, rounds=[], wall_time=0.0,
    )


def swap_market():
    return ExchangeInstance([[1, 0], [0, 1]], [Linear([1, 2]), Linear([2, 1])], 0.05)


# exchange checker ------------------------------------------------------------------

def test_exact_equilibrium_passes():
    inst = swap_market()
    cert = check_approx_equilibrium(inst, report([1, 1], [[0, 1], [1, 0]], [1, 1]), 0.05)
    assert cert
    assert cert.residuals["leftover"] == 0.0
    assert cert.residuals["price_gap"] <= 0.0
    assert cert.witnesses.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_leftover_too_large_fails():
    inst = swap_market()
    # 0.2 of good 0 unsold: 2 eps p.e at eps = 0.05
    cert = check_approx_equilibrium(inst, report([1, 1], [[0, 1], [0.8, 0]], [1, 1]), 0.05)
    assert not cert
    assert any(f.startswith("(iii)") for f in cert.failures)


def test_oversold_fails():
    inst = swap_market()
    cert = check_approx_equilibrium(inst, report([1, 1], [[0.5, 1], [1, 0]], [1, 1]), 0.05)
    assert any(f.startswith("(ii)") for f in cert.failures)


def test_undemanded_holding_fails():
    inst = swap_market()
    cert = check_approx_equilibrium(inst, report([1, 1], [[1, 0], [0, 1]], [1, 1]), 0.05)
    assert any("dominates" in f for f in cert.failures)


def test_individual_price_outside_band_fails():
    inst = swap_market()
    rep = report([1, 1], [[0, 1], [1, 0]], [1, 1])
    rep.individual[0] = IndividualPrice([1.2, 1.0], [False, False])
    cert = check_approx_equilibrium(inst, rep, 0.05)
    assert any("outside" in f for f in cert.failures)


# witnesses --------------------------------------------------------------------------

def test_dominating_demand_simple_spec():
    z = dominating_demand(CobbDouglas([0.5, 0.5]), [1, 1], 2.0, [0, 0])
    assert z.tolist() == [1.0, 1.0]


def test_dominating_demand_linear_non_mbb():
    assert dominating_demand(Linear([2, 1]), [1, 1], 1.0, [0, 0.5]) is None


def test_dominating_demand_linear_tie_keeps_held_good():
    z = dominating_demand(Linear([1, 1]), [1, 1], 1.0, [0, 0.5])
    assert z[1] >= 0.5
    assert float(np.dot([1, 1], z)) == pytest.approx(1.0)


# SR checker --------------------------------------------------------------------------

def sr_market():
    return SRInstance([2.0], [1.0, 1.0], [Linear([1.0, 1.0])], 0.05)


def test_sr_hand_built_exact():
    cert = check_approx_sr(sr_market(), report([2, 2], [[0.5, 0.5]], [2.0]), 1e-9)
    assert cert
    assert cert.residuals["clearing"] == 0.0


def test_sr_stale_available_amount_fails():
    # at p = 2 only half of each good may be sold
    cert = check_approx_sr(sr_market(), report([2, 2], [[1.0, 1.0]], [2.0]), 0.05)
    assert any(f.startswith("(ii)") for f in cert.failures)


def test_sr_weak_clearing_allows_small_unsold_value():
    rep = report([2, 2], [[0.5, 0.45]], [2.0])
    inst = sr_market()
    assert not check_approx_sr(inst, rep, 0.1)
    # unsold value 0.1 is within eps sum(b) = 0.2
    assert check_approx_sr(inst, rep, 0.1, weak_clearing=True)


# Fisher oracle ----------------------------------------------------------------------------

def test_fisher_single_agent_spending_shares():
    inst = SRInstance([1.0], [math.inf, math.inf], [CobbDouglas([0.3, 0.7])], 0.1)
    p, x, res = brute_force_fisher_eq(inst)
    assert p == pytest.approx([0.3, 0.7], abs=1e-6)
    assert res <= 1e-6


def test_fisher_linear_swap():
    inst = SRInstance([1.0, 1.0], [math.inf, math.inf], [Linear([1, 2]), Linear([2, 1])], 0.1)
    p, x, res = brute_force_fisher_eq(inst)
    assert p == pytest.approx([1.0, 1.0], abs=1e-6)
    assert res <= 1e-6


def test_fisher_random_ces():
    rng = np.random.default_rng(42)
    for _ in range(3):
        specs = [CES(rng.dirichlet([1, 1]), float(rng.uniform(1.2, 4))) for _ in range(2)]
        inst = SRInstance(rng.uniform(0.5, 2, 2), [math.inf, math.inf], specs, 0.1)
        p, x, res = brute_force_fisher_eq(inst)
        assert res <= 1e-6
        assert fisher_residual(inst, p, x) == res


def test_fisher_oracle_limits():
    inst = SRInstance([1.0], [1.0, math.inf], [Linear([1, 1])], 0.1)
    with pytest.raises(ValueError):
        brute_force_fisher_eq(inst)
    inst = SRInstance([1.0], [math.inf] * 4, [Linear([1, 1, 1, 1])], 0.1)
    with pytest.raises(ValueError):
        brute_force_fisher_eq(inst)


# property suite ------------------------------------------------------------------------------

def test_property_suite_ces_clean():
    rep = property_suite("ces", trials=1000, seed=0)
    assert rep.violations == 0


def test_property_suite_conic_wgs():
    rep = property_suite("conic", trials=300, seed=1)
    assert rep.counts["wgs"] == 0 and rep.violations == 0


def test_property_suite_negative_control():
    rep = property_suite("ces_broken", trials=200, seed=2)
    assert rep.counts["wgs"] > 0
    assert rep.counterexamples


def test_gale_splc_spending_can_fall():
    # one good, segments (r1, d1) = (2, 1) and (1, 5); at p = 0.5 and p = 0.6 the
    # agent sits inside the second segment where spend = b - p d1 (r1/r2 - 1)
    from wgs_auction.demand import GaleBASPLC, demand
    spec = GaleBASPLC.from_segments([[(2.0, 1.0), (1.0, 5.0)]])
    lo = demand(spec, np.array([0.5]), 2.0)
    hi = demand(spec, np.array([0.6]), 2.0)
    assert 0.5 * lo.bundle[0] == pytest.approx(2.0 - 0.5)
    assert 0.6 * hi.bundle[0] == pytest.approx(2.0 - 0.6)


def test_property_suite_basplc_spending_is_informational():
    rep = property_suite("basplc", trials=300, seed=3)
    assert rep.violations == 0
    assert rep.spending_drops > 0
