import math
import warnings

import numpy as np
import pytest

from helpers import sr_battery
from wgs_auction.auction_exchange import InvariantError
from wgs_auction.auction_sr import (
    available_amount,
    check_hall_condition,
    check_sr_invariants,
    init_sr,
    overdemand_init,
    price_cap_bound,
    price_cap_detail,
    run_sr_auction,
    trim_after_increase,
)
from wgs_auction.demand import CES, CobbDouglas, GaleBASPLC, Linear
from wgs_auction.market_model import SRInit, SRInstance
from wgs_auction.verify import check_approx_sr


@pytest.mark.parametrize("p, t, a", [(2, 1, 0.5), (0.5, 1, 1.0), (5, math.inf, 1.0)])
def test_available_amount(p, t, a):
    assert available_amount(p, t) == a


def test_available_amount_rejects_zero_price():
    with pytest.raises(ValueError):
        available_amount(0.0, 1.0)


# trimming ------------------------------------------------------------------------------

def two_holder_state(base, c):
    inst = SRInstance([1.0, 1.0], [1.0], [Linear([1.0]), Linear([1.0])], 0.1, SRInit([base]))
    st = init_sr(inst)
    st.c[:, 0] = c
    st.l[0] = sum(c)
    return st


def test_trim_takes_from_largest_holder():
    st = two_holder_state(0.95, [0.4, 0.6])
    s = st.s.copy()
    st.p.exponent[0] = 1
    pj = st.p.value(0)
    removed = trim_after_increase(st, 0)
    assert removed == pytest.approx(1 - 1 / pj)
    assert st.c[:, 0] == pytest.approx([0.4, 0.6 - removed])
    assert st.s[1] - s[1] == pytest.approx(removed * pj)
    assert st.l[0] == pytest.approx(1 / pj) and st.h[0] == 0.0


def test_trim_noop_below_cap():
    st = two_holder_state(0.5, [0.4, 0.6])
    st.p.exponent[0] = 1
    assert trim_after_increase(st, 0) == 0.0
    assert st.c[:, 0].tolist() == [0.4, 0.6]


def test_trim_tie_goes_to_lower_index():
    st = two_holder_state(0.95, [0.5, 0.5])
    st.p.exponent[0] = 1
    removed = trim_after_increase(st, 0)
    assert st.c[0, 0] == pytest.approx(0.5 - removed)
    assert st.c[1, 0] == 0.5


# initialisation ---------------------------------------------------------------------------

def test_given_init_one_overdemanding_agent():
    inst = SRInstance([1.0], [2.0, 2.0], [Linear([1.0, 1.0])], 0.1, SRInit([0.2, 0.2], [[2.5, 2.5]]))
    st = init_sr(inst)
    assert not st.weak
    assert st.l.tolist() == [1.0, 1.0] and st.h.tolist() == [0.0, 0.0]
    check_sr_invariants(st)


def test_uniform_init():
    inst = SRInstance([1.0, 3.0], [math.inf, math.inf], [Linear([1, 2]), CES([0.5, 0.5], 2)], 0.1)
    st = init_sr(inst, mode="uniform")
    assert st.p.values() == pytest.approx([0.2, 0.2])
    assert not st.c.any() and st.weak


def test_given_init_deficient_good():
    inst = SRInstance([1.0], [2.0, 2.0], [CobbDouglas([0.5, 0.5])], 0.1, SRInit([0.8, 0.2]))
    with pytest.raises(ValueError, match="underdemand good 0"):
        init_sr(inst)


def test_given_init_prices_below_caps():
    inst = SRInstance([1.0], [1.0, 1.0], [Linear([1, 1])], 0.1, SRInit([1.0, 0.5]))
    with pytest.raises(ValueError, match="below the caps"):
        init_sr(inst)


def test_overdemand_init_search():
    inst = SRInstance([1.0, 2.0], [1.5, math.inf], [Linear([1, 3]), CobbDouglas([0.2, 0.8])], 0.1)
    init = overdemand_init(inst)
    assert np.all(init.allocation.sum(axis=0) >= 1.0)
    assert np.all(init.prices < inst.effective_caps())


# Hall's condition ------------------------------------------------------------------------

def test_hall_single_agent_violation():
    inst = SRInstance([3.0], [1.0, 5.0], [Linear([1.0, 0.0])], 0.1)
    res = check_hall_condition(inst)
    assert not res and res.violating == (0,)


def test_hall_full_interest_ok():
    inst = SRInstance([1.0, 1.0], [1.0, 1.5], [Linear([1, 1]), Linear([2, 1])], 0.1)
    assert check_hall_condition(inst)


def test_hall_shared_good():
    inst = SRInstance([1.0, 1.0], [1.5], [Linear([1.0]), Linear([1.0])], 0.1)
    res = check_hall_condition(inst)
    assert not res and res.violating == (0, 1)
    assert res.deficit == pytest.approx(0.5)


def test_hall_max_flow_path_agrees():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n, m = 5, 3
        specs = [Linear(np.where(rng.random(m) < 0.5, 1.0, 0.0) + np.eye(m)[i % m]) for i in range(n)]
        inst = SRInstance(rng.uniform(0.5, 2, n), rng.uniform(0.5, 3, m), specs, 0.1)
        assert bool(check_hall_condition(inst)) == bool(check_hall_condition(inst, exhaustive_limit=0))


# price caps -----------------------------------------------------------------------------

def test_price_cap_full_interest():
    inst = SRInstance([1.0, 1.0], [2.0, 1.0], [Linear([1, 2]), Linear([3, 1])], 0.1)
    info = price_cap_detail(inst)
    assert info.form == "full-interest"
    assert info.value == pytest.approx(1.1 ** 2 * 2.0 * 3.0)


def test_price_cap_strict_hall():
    inst = SRInstance([1.0, 1.0], [1.5, 1.5], [Linear([1, 0]), Linear([1, 2])], 0.1)
    info = price_cap_detail(inst)
    assert info.form == "strict-hall"
    assert info.value == pytest.approx(1.1 ** 2 * 1.5 * 2.0)


def test_price_cap_cobb_douglas_falls_back():
    inst = SRInstance([1.0], [1.0, 1.0], [CobbDouglas([0.5, 0.5])], 0.1)
    with pytest.warns(UserWarning, match="unbounded"):
        assert price_cap_bound(inst, fallback=77.0) == 77.0


# whole runs ------------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["given", "uniform"])
def test_single_linear_agent(mode):
    # every p >= 1 clears this market: demand 2/p per pair of goods equals
    # the available 2/p; the auction stops at an approximate one near p = 1
    inst = SRInstance([2.0], [1.0, 1.0], [Linear([1.0, 1.0])], 0.05)
    rep = run_sr_auction(inst, debug=True, init_mode=mode)
    assert rep.status == "ok"
    p = rep.prices.values()
    assert p[0] == pytest.approx(p[1])
    assert p[0] >= 1 / (1 + 4 * inst.eps)
    assert check_approx_sr(inst, rep, 4 * inst.eps, weak_clearing=mode == "uniform")


def test_cobb_douglas_cap_breach():
    # the agent insists on spending 1.8 on good 0 but only 1 can be spent there
    inst = SRInstance([2.0], [1.0, 1.0], [CobbDouglas([0.9, 0.1])], 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_sr_auction(inst, price_cap=100.0)
    assert rep.status == "cap_breach"
    assert "no SR-equilibrium within bound" in rep.message


def test_basplc_agent():
    spec = GaleBASPLC.from_segments([[(2.0, 0.5), (1.0, 1.0)], [(1.5, 1.0)]], cap=2.0)
    inst = SRInstance([1.0, 1.0], [0.8, math.inf], [spec, Linear([1, 1])], 0.05)
    rep = run_sr_auction(inst, debug=True, init_mode="given")
    assert rep.status == "ok"
    assert check_approx_sr(inst, rep, 4 * inst.eps)


def test_battery_certifies():
    for inst in sr_battery(6):
        rep = run_sr_auction(inst, debug=True)
        assert rep.status == "ok"
        assert rep.stats["max_rounds"] <= rep.stats["round_cap"]
        assert check_approx_sr(inst, rep, 4 * inst.eps)


def test_stop_rules():
    inst = SRInstance([2.0], [1.0, 1.0], [Linear([1.0, 1.0])], 0.05)
    for stop in ("budget", "spend", "agent"):
        assert run_sr_auction(inst, stop=stop).stats["stop_rule"] == stop
    with pytest.raises(ValueError):
        run_sr_auction(inst, stop="never")


def test_invariant_checker_flags_bad_state():
    inst = SRInstance([1.0], [2.0, 2.0], [Linear([1.0, 1.0])], 0.1, SRInit([0.2, 0.2], [[2.5, 2.5]]))
    st = init_sr(inst)
    st.c[0, 0] = 0.5
    with pytest.raises(InvariantError):
        check_sr_invariants(st)
