"""Run the exchange auction on a small mixed market and certify the result."""

from pathlib import Path

import numpy as np

from wgs_auction import CES, CobbDouglas, ExchangeInstance, Linear, load_instance
from wgs_auction.auction_exchange import run_exchange_auction
from wgs_auction.verify import check_approx_equilibrium

HERE = Path(__file__).resolve().parent


def main():
    inst = ExchangeInstance(
        [[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.3, 0.3, 0.0]],
        [Linear([3.0, 1.0, 1.0]), CES([0.2, 0.5, 0.3], 2.0), CobbDouglas([0.4, 0.4, 0.2])],
        eps=0.05,
    )
    rep = run_exchange_auction(inst)
    print("status:", rep.status)
    print("prices:", np.round(rep.prices.values(), 4))
    print("allocation:\n", np.round(rep.allocation, 4))
    cert = check_approx_equilibrium(inst, rep, 4 * inst.eps)
    print("4 eps certificate:", "PASS" if cert else cert.failures)

    # the same from a JSON instance
    inst = load_instance(HERE / "instances" / "ces-symmetric.json")
    rep = run_exchange_auction(inst)
    print("symmetric CES prices:", np.round(rep.prices.values(), 4))


if __name__ == "__main__":
    main()
