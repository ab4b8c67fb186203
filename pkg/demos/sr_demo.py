"""Spending-restricted Fisher market: one run that certifies, one with no equilibrium."""

import math
import warnings

import numpy as np

from wgs_auction import CobbDouglas, GaleBASPLC, Linear, SRInstance
from wgs_auction.auction_sr import run_sr_auction
from wgs_auction.verify import check_approx_sr


def main():
    spec = GaleBASPLC.from_segments([[(2.0, 0.5), (1.0, 1.0)], [(1.5, 1.0)]], cap=2.0)
    inst = SRInstance([1.0, 1.0], [0.8, math.inf], [spec, Linear([1, 1])], 0.05)
    rep = run_sr_auction(inst)
    print("status:", rep.status, "prices:", np.round(rep.prices.values(), 4))
    print("certified at 4 eps:", bool(check_approx_sr(inst, rep, 4 * inst.eps)))

    # Cobb-Douglas wants to spend 1.8 on good 0, whose cap is 1
    inst = SRInstance([2.0], [1.0, 1.0], [CobbDouglas([0.9, 0.1])], 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_sr_auction(inst, price_cap=100.0)
    print("status:", rep.status, "-", rep.message)


if __name__ == "__main__":
    main()
