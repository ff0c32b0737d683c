"""
Merge overhead
==============

With identical odds on both sides every leaf is a fair coin and the root
needs 4**ell leaf outputs on average.  With random factor odds the
overhead depends on how factors are assigned to leaves; shuffling the
assignment each flip averages over all assignments, and the average has a
closed form.
"""

import numpy as np

from dcbf import (DCBF, CostLedger, FactorPair, RandomStream, build_tree,
                  measure_overhead, predicted_overhead_randomized, shuffle_assignment)

stream = RandomStream(0)
for ell in (1, 2, 3):
    n = 2**ell
    dc = DCBF(build_tree(n, ell), [FactorPair.from_odds(1.0, 1.0)] * n)
    ledger = CostLedger()
    for _ in range(20_000):
        dc.flip(stream, ledger)
    print(f"ell={ell}: omega {measure_overhead(ledger)[0]:7.2f}   4^ell = {4**ell}")

# 64 factors whose log-odds sum to a standard normal draw
n, ell = 64, 3
R = np.exp(np.random.default_rng(2).standard_normal(n) / np.sqrt(n))
base, shuffle, ledger = build_tree(n, ell), RandomStream(3), CostLedger()
for _ in range(5000):
    tree = shuffle_assignment(base, shuffle)
    leaves = [FactorPair.from_odds(float(np.prod(R[g])), 1.0) for g in tree.leaves()]
    DCBF(tree, leaves).flip(stream, ledger)
print(f"random odds, n={n}, ell={ell}: omega {measure_overhead(ledger)[0]:.2f}, "
      f"predicted {predicted_overhead_randomized(np.ones(n), R, ell):.2f}")
