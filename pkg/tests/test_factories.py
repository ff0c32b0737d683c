import math

import pytest

from dcbf.factories import (DCBF, FactorPair, PortkeyConfig, flip_dcbf, flip_merge,
                            flip_two_coin, flip_two_coin_flipped, measure_overhead,
                            overhead_stderr, product_pair, two_coin_law)
from dcbf.partition import build_tree
from dcbf.rng import (ESCAPED, HEADS, TAILS, CostLedger, DegenerateInputError,
                      LoopCapExceeded, RandomStream, WeightedCoin)

from oracles import merge_oracle, three_sigma, tree_oracle, two_coin_oracle

GRID = [
    (1.0, 1.0, 1.0, 1.0),
    (2.0, 0.5, 1.0, 1.0),
    (1.0, 0.3, 1.0, 0.7),
    (3.0, 0.9, 0.5, 0.2),
    (0.2, 0.1, 1.0, 0.05),
    (1.0, 0.0, 1.0, 0.5),
    (5.0, 0.01, 0.1, 0.99),
    (1.0, 0.5, 4.0, 0.25),
    (0.7, 0.8, 0.7, 0.6),
]


def frequencies(flip, n):
    counts = {HEADS: 0, TAILS: 0, ESCAPED: 0}
    for _ in range(n):
        counts[flip()] += 1
    return {k: v / n for k, v in counts.items()}


def test_closed_form_matches_series():
    for c1, p1, c2, p2 in GRID:
        for varpi in (1.0, 0.5, 0.9):
            a = two_coin_law(c1, p1, c2, p2, varpi)
            b = two_coin_oracle(c1, p1, c2, p2, varpi)
            assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("c1,p1,c2,p2", GRID)
def test_two_coin_heads_and_loops(c1, p1, c2, p2):
    s, led = RandomStream(101), CostLedger()
    pair = FactorPair.tractable(c1, p1, c2, p2)
    n = 20_000
    f = frequencies(lambda: flip_two_coin(pair, 1.0, s, led), n)
    q, _, _, enl = two_coin_oracle(c1, p1, c2, p2)
    assert abs(f[HEADS] - q) < three_sigma(q, n)
    _, se = overhead_stderr(led)
    assert abs(led.leaf_loops / n - enl) < 3 * se + 1e-12
    assert f[ESCAPED] == 0.0


def test_two_coin_examples():
    s, led = RandomStream(1), CostLedger()
    pair = FactorPair.tractable(1, 1, 1, 1)
    f = frequencies(lambda: flip_two_coin(pair, 1.0, s, led), 20_000)
    assert abs(f[HEADS] - 0.5) < three_sigma(0.5, 20_000)
    assert led.leaf_loops == 20_000
    assert two_coin_law(2, 0.5, 1, 1)[3] == pytest.approx(1.5)
    n = 40_000
    f = frequencies(lambda: flip_two_coin(pair, 0.5, s, CostLedger()), n)
    assert abs(f[HEADS] - 0.25) < three_sigma(0.25, n)
    assert abs(f[ESCAPED] - 0.5) < three_sigma(0.5, n)


def test_two_coin_degenerate():
    with pytest.raises(DegenerateInputError):
        FactorPair.tractable(0.0, 0.5, 0.0, 0.5)
    pair = FactorPair.tractable(1.0, 0.5, 1.0, 0.5)
    with pytest.raises(ValueError):
        flip_two_coin(pair, 0.0, RandomStream(0), CostLedger())


def test_one_sided_zero():
    s, led = RandomStream(5), CostLedger()
    pair = FactorPair.tractable(0.0, 0.5, 1.0, 0.5)
    assert all(flip_two_coin(pair, 1.0, s, led) is TAILS for _ in range(500))


def test_swapping_sides_exchanges_heads_and_tails():
    n = 40_000
    pair = FactorPair.tractable(2.0, 0.3, 1.0, 0.8)
    s1, s2 = RandomStream(7), RandomStream(8)
    a = frequencies(lambda: flip_two_coin(pair, 0.7, s1, CostLedger()), n)
    b = frequencies(lambda: flip_two_coin(pair.swapped(), 0.7, s2, CostLedger()), n)
    for x, y in ((HEADS, TAILS), (TAILS, HEADS), (ESCAPED, ESCAPED)):
        sd = math.sqrt(2 * a[x] * (1 - a[x]) / n)
        assert abs(a[x] - b[y]) < 3 * sd + 1e-12


@pytest.mark.parametrize("coins,q", [
    ((1, 1, 1, 1), 0.5),
    ((1, 1, 2, 0.5), 0.5),
    ((1, 0.5, 1, 1), 2 / 3),
])
def test_flipped_two_coin(coins, q):
    s, led = RandomStream(21), CostLedger()
    pair = FactorPair.tractable(*coins, flipped=True)
    n = 40_000
    f = frequencies(lambda: flip_two_coin_flipped(pair, 1.0, s, led), n)
    assert abs(f[HEADS] - q) < three_sigma(q, n)


def _tractable_child(r):
    pair = FactorPair.tractable(r, 1.0, 1.0 - r, 1.0) if 0 < r < 1 else \
        FactorPair.tractable(1.0, 1.0, 0.0, 1.0)
    return DCBF(build_tree(1, 0), [pair])._fn


@pytest.mark.parametrize("r1,r2", [(0.5, 0.5), (0.9, 0.8), (0.3, 0.6)])
def test_merge_law_and_loops(r1, r2):
    s, led = RandomStream(31), CostLedger()
    left, right = _tractable_child(r1), _tractable_child(r2)
    n = 40_000
    f = frequencies(lambda: flip_merge(left, right, 1.0, s, led), n)
    h, _, _, enl = merge_oracle((r1, 1 - r1, 0), (r2, 1 - r2, 0))
    assert abs(f[HEADS] - h) < three_sigma(h, n)
    loops = led.merge_loops / n
    sd = math.sqrt((1 - 1 / enl)) * enl  # sd of a geometric with mean enl
    assert abs(loops - enl) < 3 * sd / math.sqrt(n)


def test_merge_examples():
    assert merge_oracle((0.5, 0.5, 0), (0.5, 0.5, 0))[3] == pytest.approx(2.0)
    h, _, _, enl = merge_oracle((0.9, 0.1, 0), (0.8, 0.2, 0))
    assert h == pytest.approx(0.72 / 0.74)
    assert enl == pytest.approx(1 / 0.74)
    s, led = RandomStream(1), CostLedger()
    one = _tractable_child(1.0)
    assert flip_merge(one, one, 1.0, s, led) is HEADS
    assert led.merge_loops == 1


def test_merge_loop_cap():
    one = _tractable_child(1.0)
    zero_pair = FactorPair.tractable(0.0, 1.0, 1.0, 1.0)
    zero = DCBF(build_tree(1, 0), [zero_pair])._fn
    with pytest.raises(LoopCapExceeded):
        flip_merge(one, zero, 1.0, RandomStream(0), CostLedger(), max_flips=10_000)


def _odds_leaves(odds):
    return [FactorPair.from_odds(a, 1.0) for a in odds]


def test_dcbf_two_leaves():
    s, led = RandomStream(41), CostLedger()
    tree = build_tree(2, 1)
    leaves = _odds_leaves([2.0, 3.0])
    n = 40_000
    f = frequencies(lambda: flip_dcbf(tree, leaves, PortkeyConfig(), s, led), n)
    assert abs(f[HEADS] - 6 / 7) < three_sigma(6 / 7, n)


def test_dcbf_depth_zero_is_two_coin():
    n = 40_000
    pair = FactorPair.tractable(2.0, 0.3, 1.0, 0.4)
    s = RandomStream(3)
    f = frequencies(lambda: flip_dcbf(build_tree(1, 0), [pair], PortkeyConfig(), s,
                                      CostLedger()), n)
    q = two_coin_law(2.0, 0.3, 1.0, 0.4)[0]
    assert abs(f[HEADS] - q) < three_sigma(q, n)


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_dcbf_brute_force(ell):
    # eight tractable factors, unknown-p coins on both sides
    cs = [(1.2, 0.7, 0.9, 0.8), (0.5, 0.9, 1.0, 0.4), (2.0, 0.5, 1.0, 0.9),
          (1.0, 0.6, 1.1, 0.6), (0.8, 0.95, 1.0, 0.7), (1.5, 0.3, 0.7, 0.6),
          (1.0, 0.9, 1.0, 0.85), (0.9, 0.5, 1.2, 0.5)]
    pairs = [FactorPair.tractable(*c) for c in cs]
    tree = build_tree(8, ell)
    leaves = [product_pair([pairs[i] for i in m]) for m in tree.leaves()]
    h0v = math.prod(c[0] * c[1] for c in cs)
    h0t = math.prod(c[2] * c[3] for c in cs)
    q = h0v / (h0v + h0t)
    n = 20_000
    s = RandomStream(50 + ell)
    dc = DCBF(tree, leaves)
    f = frequencies(lambda: dc.flip(s, CostLedger()), n)
    assert abs(f[HEADS] - q) < three_sigma(q, n)


@pytest.mark.parametrize("ell", [1, 2])
def test_balanced_overhead(ell):
    tree = build_tree(1 << ell, ell)
    leaves = _odds_leaves([1.0] * (1 << ell))
    led = CostLedger()
    dc, s = DCBF(tree, leaves), RandomStream(60)
    for _ in range(20_000):
        dc.flip(s, led)
    omega, phi = measure_overhead(led)
    se, _ = overhead_stderr(led)
    assert abs(omega - 4**ell) < 3 * se
    assert phi == omega  # certain coins stop in one loop
    assert sum(led.node_loops.values()) == led.leaf_loops + led.merge_loops


def test_measure_overhead_empty():
    with pytest.raises(ValueError):
        measure_overhead(CostLedger())


def test_overhead_two_leaves_matches_tau():
    r1, r2 = 0.9, 0.8
    leaves = [FactorPair.from_odds(r1 / (1 - r1), 1.0),
              FactorPair.from_odds(r2 / (1 - r2), 1.0)]
    led, s = CostLedger(), RandomStream(70)
    dc = DCBF(build_tree(2, 1), leaves)
    for _ in range(20_000):
        dc.flip(s, led)
    tau0 = 1 / (r1 * r2 + (1 - r1) * (1 - r2))
    omega, _ = measure_overhead(led)
    se, _ = overhead_stderr(led)
    assert abs(omega - 2 * tau0) < 3 * se


def test_portkey_tree_against_recursion():
    cs = [(1.0, 0.7, 1.0, 0.5), (2.0, 0.4, 1.0, 0.6)]
    leaves = [FactorPair.tractable(*c) for c in cs]
    varpi = 0.8
    triples = [two_coin_oracle(*c, varpi)[:3] for c in cs]
    expect = tree_oracle(triples)
    n = 40_000
    s = RandomStream(80)
    dc = DCBF(build_tree(2, 1), leaves, PortkeyConfig(leaf=varpi))
    f = frequencies(lambda: dc.flip(s, CostLedger()), n)
    for k, q in zip((HEADS, TAILS, ESCAPED), expect):
        assert abs(f[k] - q) < three_sigma(q, n)
    # escape probability is symmetric in the two parameter roles
    rev = tree_oracle([two_coin_oracle(c[2], c[3], c[0], c[1], varpi)[:3] for c in cs])
    assert rev[2] == pytest.approx(expect[2], rel=1e-12)
    assert rev[0] == pytest.approx(expect[1], rel=1e-12)


def test_node_portkey():
    leaves = _odds_leaves([1.0, 1.0])
    pk = PortkeyConfig(nodes={0: 0.5})
    n = 20_000
    s = RandomStream(81)
    dc = DCBF(build_tree(2, 1), leaves, pk)
    f = frequencies(lambda: dc.flip(s, CostLedger()), n)
    expect = tree_oracle([(0.5, 0.5, 0.0)] * 2, node_varpi=0.5)
    assert abs(f[ESCAPED] - expect[2]) < three_sigma(expect[2], n)


def test_portkey_config_validation():
    with pytest.raises(ValueError):
        PortkeyConfig(leaf=0.0)
    with pytest.raises(ValueError):
        PortkeyConfig(nodes={1: 1.2})
    assert PortkeyConfig.leaf_escape(0.1).leaf == pytest.approx(0.9)


def test_parallel_mode_same_law():
    cs = [(1.0, 0.7, 1.0, 0.5), (2.0, 0.4, 1.0, 0.6), (1.0, 0.9, 1.5, 0.5),
          (0.5, 0.8, 1.0, 0.3)]
    leaves = [FactorPair.tractable(*c) for c in cs]
    h = math.prod(c[0] * c[1] for c in cs)
    t = math.prod(c[2] * c[3] for c in cs)
    q = h / (h + t)
    dc = DCBF(build_tree(4, 2), leaves, parallel_levels=2)
    led, s, n = CostLedger(), RandomStream(90), 4000
    f = frequencies(lambda: dc.flip(s, led), n)
    assert abs(f[HEADS] - q) < three_sigma(q, n)
    assert led.root_flips == n
    # reproducible across runs with the same seed
    s1, s2 = RandomStream(5), RandomStream(5)
    a = [dc.flip(s1, CostLedger()) for _ in range(200)]
    b = [dc.flip(s2, CostLedger()) for _ in range(200)]
    assert a == b


def test_product_pair_scale_invariance():
    big = [FactorPair.tractable(1e200, 0.5, 1e200, 0.5) for _ in range(3)]
    pair = product_pair(big)
    assert max(pair.numer.c, pair.denom.c) == 1.0
    assert pair.odds == pytest.approx(1.0)
    flipped = FactorPair.tractable(1.0, 0.5, 1.0, 1.0, flipped=True)
    assert product_pair([flipped]).odds == pytest.approx(2.0)


def test_uncertain_coin_counts_flips():
    coin = WeightedCoin.tractable(1.0, 0.5)
    pair = FactorPair(coin, WeightedCoin.constant(1.0))
    led = CostLedger()
    flip_two_coin(pair, 1.0, RandomStream(1), led)
    assert led.leaf_flips >= 1


def _opaque(coin):
    # same flip source but hidden from the inlined Bernoulli path
    return WeightedCoin(coin.c, coin.flip, p=coin.p)


@pytest.mark.parametrize("varpi", [1.0, 0.7])
def test_inlined_bernoulli_leaf_matches_generic_loop(varpi):
    fast = FactorPair.tractable(1.0, 0.3, 2.0, 0.6)
    slow = FactorPair(_opaque(fast.numer), _opaque(fast.denom))
    n = 40_000
    res = []
    for pair, seed in ((fast, 81), (slow, 82)):
        s, led = RandomStream(seed), CostLedger()
        f = frequencies(lambda: flip_two_coin(pair, varpi, s, led), n)
        res.append((f, led))
    h, t, e, enl = two_coin_oracle(1.0, 0.3, 2.0, 0.6, varpi)
    for f, led in res:
        assert abs(f[HEADS] - h) < three_sigma(h, n)
        assert abs(f[ESCAPED] - e) < three_sigma(e, n) + 1e-12
        _, se = overhead_stderr(led)
        assert abs(led.leaf_loops / n - enl) < 3 * se
        # every loop that does not escape flips exactly one coin
        assert led.leaf_flips == led.leaf_loops - led.escapes
