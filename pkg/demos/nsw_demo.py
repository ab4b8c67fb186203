"""Nash social welfare: rounded allocation, upper bound and brute-force optimum."""

import math

from wgs_auction import NSWInstance
from wgs_auction.nsw import brute_force_nsw, solve_nsw


def main():
    # per-good segments (utility per copy, copies); agent 1 capped at 4
    inst = NSWInstance([3, 2], [[[(3.0, 2), (1.0, 1)], [(1.0, 2)]], [[(2.0, 3)], [(2.5, 1), (0.5, 1)]]],
                       [math.inf, 4.0])
    res = solve_nsw(inst)
    opt, best = brute_force_nsw(inst)
    print("allocation:", res.allocation.counts.tolist())
    print(f"NSW {res.value:.4f}  optimum {opt:.4f}  upper bound {res.upper_bound:.4f}")
    print(f"ratio opt/alg {opt / res.value:.4f} (guarantee 2.404)")
    print("best allocation:", best.tolist())


if __name__ == "__main__":
    main()
