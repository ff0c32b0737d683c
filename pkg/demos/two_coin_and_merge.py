"""
Two coins, one merge
====================

A 2-coin flip lands heads with probability c1 p1 / (c1 p1 + c2 p2) while
only ever flipping the p-coins.  Merging two such flips gives the odds of a
product, which is what a Barker acceptance needs.
"""

import numpy as np

from dcbf import DCBF, CostLedger, FactorPair, RandomStream, build_tree, flip_two_coin

stream = RandomStream(0)

# a single 2-coin with scales (3, 0.5) and unknown-to-the-algorithm p's (0.9, 0.2)
pair = FactorPair.tractable(3.0, 0.9, 0.5, 0.2)
ledger = CostLedger()
flips = 50_000
heads = sum(int(flip_two_coin(pair, 1.0, stream, ledger)) == 1 for _ in range(flips))
print("2-coin heads rate   ", heads / flips, " exact", 2.7 / (2.7 + 0.1))
print("coin flips per call ", ledger.leaf_loops / flips, " exact", 3.5 / 2.8)

# four factors split over a depth-2 tree; the root targets the product odds
rng = np.random.default_rng(1)
c, p = rng.uniform(0.5, 2.0, (4, 2)), rng.uniform(0.3, 1.0, (4, 2))
leaves = [FactorPair.tractable(c[i, 0], p[i, 0], c[i, 1], p[i, 1]) for i in range(4)]
dc = DCBF(build_tree(4, 2), leaves)
ledger = CostLedger()
heads = sum(int(dc.flip(stream, ledger)) == 1 for _ in range(flips))
num, den = np.prod(c[:, 0] * p[:, 0]), np.prod(c[:, 1] * p[:, 1])
print("tree heads rate     ", heads / flips, " exact", num / (num + den))
print("leaf outputs / flip ", ledger.leaf_outputs / flips)
