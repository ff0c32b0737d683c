"""Bernoulli factories: 2-coin, flipped and Portkey 2-coin, merge and DCBF.

All factories return a :class:`~dcbf.rng.FlipOutcome` and record their loop
counts in a :class:`~dcbf.rng.CostLedger`.  ``ESCAPED`` is an ordinary
outcome; callers running a Markov chain treat it as a rejection.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .rng import (
    ESCAPED,
    HEADS,
    TAILS,
    CostLedger,
    DegenerateInputError,
    FlipOutcome,
    LoopCapExceeded,
    RandomStream,
    WeightedCoin,
    now_ns,
    product_flip,
)

#: Default elementary-flip budget for one root invocation.
MAX_FLIPS = 10**9

OutcomeFn = Callable[[RandomStream, CostLedger], FlipOutcome]


@dataclass(frozen=True)
class FactorPair:
    """Odds ``h(vartheta) : h(theta)`` of one factor batch as two coins.

    With ``flipped=False`` the coins represent ``h`` itself,
    ``numer.c * numer.p = h(vartheta)``.  With ``flipped=True`` they represent
    the reciprocal, ``numer.c * numer.p = 1 / h(vartheta)`` (up to a factor
    common to both sides).
    """

    numer: WeightedCoin
    denom: WeightedCoin
    flipped: bool = False

    def __post_init__(self):
        if self.numer.c == 0.0 and self.denom.c == 0.0:
            raise DegenerateInputError("both sides of a factor pair have c = 0")

    @classmethod
    def tractable(cls, c1: float, p1: float, c2: float, p2: float,
                  flipped: bool = False) -> "FactorPair":
        return cls(WeightedCoin.tractable(c1, p1), WeightedCoin.tractable(c2, p2),
                   flipped)

    @classmethod
    def from_odds(cls, h_vartheta: float, h_theta: float) -> "FactorPair":
        """Pair with certain coins and scales equal to the two factor values."""
        return cls(WeightedCoin.constant(h_vartheta), WeightedCoin.constant(h_theta))

    def as_direct(self) -> "FactorPair":
        """Equivalent pair in direct (non-flipped) form."""
        if not self.flipped:
            return self
        return FactorPair(self.denom, self.numer)

    def swapped(self) -> "FactorPair":
        """Pair for the reverse move: heads and tails exchange roles."""
        return FactorPair(self.denom, self.numer, self.flipped)

    @property
    def odds(self) -> float:
        """``h(vartheta) / h(theta)`` when both success probabilities are known."""
        d = self.as_direct()
        if d.numer.p is None or d.denom.p is None:
            raise ValueError("odds need known coin probabilities")
        num, den = d.numer.c * d.numer.p, d.denom.c * d.denom.p
        return math.inf if den == 0.0 else num / den


def product_pair(pairs: Sequence[FactorPair]) -> FactorPair:
    """Multiply factor pairs into one leaf pair.

    Flipped pairs are first rewritten in direct form.  The scales are
    multiplied in log space and both sides are divided by the larger one;
    a common rescaling leaves every 2-coin law, Portkey included, unchanged.
    Coins known to be certain are dropped from the flip sequence.
    """
    if not pairs:
        return FactorPair(WeightedCoin.constant(1.0), WeightedCoin.constant(1.0))
    logs = [0.0, 0.0]
    flips: tuple[list, list] = ([], [])
    probs = [1.0, 1.0]
    for pair in pairs:
        d = pair.as_direct()
        for side, coin in enumerate((d.numer, d.denom)):
            logs[side] += math.log(coin.c) if coin.c > 0.0 else -math.inf
            if not coin.certain:
                flips[side].append(coin.flip)
            if probs[side] is not None:
                probs[side] = None if coin.p is None else probs[side] * coin.p
    top = max(logs)
    if top == -math.inf:
        raise DegenerateInputError("product pair has c = 0 on both sides")
    coins = []
    for side in (0, 1):
        c = math.exp(logs[side] - top)
        if flips[side]:
            coins.append(WeightedCoin(c, product_flip(flips[side]), p=probs[side]))
        else:
            coins.append(WeightedCoin.constant(c))
    return FactorPair(coins[0], coins[1])


@dataclass(frozen=True)
class PortkeyConfig:
    """Per-loop continuation probabilities (the Portkey ``varpi``).

    ``leaf`` applies to every leaf 2-coin loop; ``nodes`` maps a tree level
    (root = 0) to the value used by merge nodes on that level.  A value of 1
    never escapes.  Escape probability per loop is ``1 - varpi``.
    """

    leaf: float = 1.0
    nodes: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.leaf, *self.nodes.values()):
            if not 0.0 < v <= 1.0:
                raise ValueError(f"Portkey parameter {v!r} outside (0, 1]")

    @classmethod
    def leaf_escape(cls, escape: float) -> "PortkeyConfig":
        """Uniform escape probability ``escape`` per leaf loop."""
        return cls(leaf=1.0 - escape)

    def at_level(self, level: int) -> float:
        return self.nodes.get(level, 1.0)

    @property
    def active(self) -> bool:
        return self.leaf < 1.0 or any(v < 1.0 for v in self.nodes.values())


NO_PORTKEY = PortkeyConfig()


def _check_varpi(varpi: float) -> None:
    if not 0.0 < varpi <= 1.0:
        raise ValueError(f"Portkey parameter {varpi!r} outside (0, 1]")


def _leaf_flipper(pair: FactorPair, varpi: float, node: int) -> OutcomeFn:
    d = pair.as_direct()
    c1, c2 = d.numer.c, d.denom.c
    thr = c1 / (c1 + c2)
    f1, f2 = d.numer.flip, d.denom.flip
    escape = 1.0 - varpi
    b1, b2 = d.numer.bernoulli, d.denom.bernoulli
    if b1 is not None and b2 is not None:
        return _bernoulli_leaf_flipper(thr, b1, b2, escape, node, c1, c2)

    def flip(stream: RandomStream, ledger: CostLedger) -> FlipOutcome:
        u = stream.uniform
        loops = 0
        try:
            while True:
                loops += 1
                if escape > 0.0 and u() < escape:
                    return ESCAPED
                if u() < thr:
                    if f1(stream, ledger):
                        return HEADS
                elif f2(stream, ledger):
                    return TAILS
                if ledger.leaf_flips > ledger.flip_limit:
                    raise LoopCapExceeded(
                        f"2-coin at node {node} exceeded the flip budget after "
                        f"{loops} loops (c1={c1:.4g}, c2={c2:.4g})")
        finally:
            ledger.leaf_loops += loops
            ledger.leaf_outputs += 1
            ledger.node_loops[node] += loops

    return flip


def _bernoulli_leaf_flipper(thr, b1, b2, escape, node, c1, c2) -> OutcomeFn:
    # Same law as the generic loop with WeightedCoin.tractable coins, using
    # one uniform per loop: the escape test, the side choice and the coin
    # flip each reuse the rescaled remainder of the previous comparison.
    keep = 1.0 - escape
    t1 = escape + keep * thr * b1           # heads below this
    t_side = escape + keep * thr            # numer side below this
    t2 = t_side + keep * (1.0 - thr) * b2   # tails in [t_side, t2)

    def flip(stream: RandomStream, ledger: CostLedger) -> FlipOutcome:
        u = stream.uniform
        loops = 0
        limit = ledger.flip_limit - ledger.leaf_flips
        try:
            while True:
                loops += 1
                v = u()
                if v < escape:
                    return ESCAPED
                if v < t_side:
                    if v < t1:
                        return HEADS
                elif v < t2:
                    return TAILS
                if loops > limit:
                    raise LoopCapExceeded(
                        f"2-coin at node {node} exceeded the flip budget after "
                        f"{loops} loops (c1={c1:.4g}, c2={c2:.4g})")
        finally:
            ledger.leaf_loops += loops
            ledger.leaf_outputs += 1
            ledger.leaf_flips += loops - (1 if escape > 0.0 and v < escape else 0)
            ledger.node_loops[node] += loops

    return flip


def _merge_flipper(left: OutcomeFn, right: OutcomeFn, varpi: float,
                   node: int) -> OutcomeFn:
    escape = 1.0 - varpi

    def flip(stream: RandomStream, ledger: CostLedger) -> FlipOutcome:
        loops = 0
        try:
            while True:
                loops += 1
                if escape > 0.0 and stream.uniform() < escape:
                    return ESCAPED
                a = left(stream, ledger)
                if a is ESCAPED:
                    return ESCAPED
                b = right(stream, ledger)
                if b is ESCAPED:
                    return ESCAPED
                if a is b:
                    return a
                if ledger.leaf_flips > ledger.flip_limit:
                    raise LoopCapExceeded(
                        f"merge at node {node} exceeded the flip budget after "
                        f"{loops} loops; children keep disagreeing")
        finally:
            ledger.merge_loops += loops
            ledger.node_loops[node] += loops

    return flip


_EXECUTORS: dict = {}


def _executor(workers: int) -> ThreadPoolExecutor:
    ex = _EXECUTORS.get(workers)
    if ex is None:
        ex = _EXECUTORS[workers] = ThreadPoolExecutor(max_workers=workers)
    return ex


def _forking_merge_flipper(left: OutcomeFn, right: OutcomeFn, varpi: float,
                           node: int, executor: ThreadPoolExecutor) -> OutcomeFn:
    """Merge node whose left subtree runs on a worker thread.

    Each invocation spawns one stream per child from the node's own stream,
    and the left child counts into a private ledger merged at the join.
    """
    escape = 1.0 - varpi

    def flip(stream: RandomStream, ledger: CostLedger) -> FlipOutcome:
        lstream, rstream = stream.spawn(), stream.spawn()
        loops = 0
        try:
            while True:
                loops += 1
                if escape > 0.0 and stream.uniform() < escape:
                    return ESCAPED
                lledger = CostLedger(flip_limit=ledger.flip_limit - ledger.leaf_flips)
                fut = executor.submit(left, lstream, lledger)
                try:
                    b = right(rstream, ledger)
                finally:
                    a = fut.result()
                    ledger.merge(lledger)
                if a is ESCAPED or b is ESCAPED:
                    return ESCAPED
                if a is b:
                    return a
                if ledger.leaf_flips > ledger.flip_limit:
                    raise LoopCapExceeded(f"merge at node {node} exceeded the flip budget")
        finally:
            ledger.merge_loops += loops
            ledger.node_loops[node] += loops

    return flip


def _run_root(fn: OutcomeFn, stream: RandomStream, ledger: CostLedger,
              max_flips: int) -> FlipOutcome:
    outputs0, loops0 = ledger.leaf_outputs, ledger.leaf_loops
    saved = ledger.flip_limit
    ledger.flip_limit = ledger.leaf_flips + max_flips
    t0 = now_ns()
    try:
        out = fn(stream, ledger)
    finally:
        ledger.flip_limit = saved
    ledger.record_root(out, ledger.leaf_outputs - outputs0,
                       ledger.leaf_loops - loops0, now_ns() - t0)
    return out


def flip_two_coin(pair: FactorPair, portkey: float, stream: RandomStream,
                  ledger: CostLedger, max_flips: int = MAX_FLIPS) -> FlipOutcome:
    """One output of the (Portkey) 2-coin algorithm.

    Without escapes, heads has probability ``c1 p1 / (c1 p1 + c2 p2)`` for
    ``(c1, p1) = pair.numer`` and ``(c2, p2) = pair.denom``.  With
    ``portkey < 1`` every loop first escapes with probability ``1 - portkey``.
    Flipped pairs are run with the roles of the two coins exchanged.
    """
    _check_varpi(portkey)
    return _run_root(_leaf_flipper(pair, portkey, 1), stream, ledger, max_flips)


def flip_two_coin_flipped(pair: FactorPair, portkey: float, stream: RandomStream,
                          ledger: CostLedger, max_flips: int = MAX_FLIPS) -> FlipOutcome:
    """2-coin on a pair whose coins encode reciprocal factors ``1 / h``."""
    if not pair.flipped:
        pair = FactorPair(pair.numer, pair.denom, flipped=True)
    return flip_two_coin(pair, portkey, stream, ledger, max_flips)


def flip_merge(left_flip: OutcomeFn, right_flip: OutcomeFn, node_escape: float,
               stream: RandomStream, ledger: CostLedger,
               max_flips: int = MAX_FLIPS) -> FlipOutcome:
    """Merge two coins into one whose odds are the product of theirs.

    ``left_flip`` and ``right_flip`` are called as ``f(stream, ledger)`` and
    must return a FlipOutcome.  The loop repeats until both agree; an escape
    from either child, or from the node's own ``1 - node_escape`` draw,
    ends it with ESCAPED.
    """
    _check_varpi(node_escape)
    return _run_root(_merge_flipper(left_flip, right_flip, node_escape, 1),
                     stream, ledger, max_flips)


def build_dcbf(tree, leaves: Sequence[FactorPair], portkey: PortkeyConfig = NO_PORTKEY,
               parallel_levels: int = 0) -> OutcomeFn:
    """Compose the DCBF over ``tree`` as a reusable flip function.

    ``leaves[k]`` is the factor pair of leaf ``k`` in the tree's leaf order.
    Merge nodes above level ``parallel_levels`` run their left subtree on a
    thread pool (fork-join).  The returned function does not touch the
    per-root bookkeeping; use :func:`flip_dcbf` or :class:`DCBF` for that.
    """
    ell = tree.depth
    if len(leaves) != 1 << ell:
        raise ValueError(f"expected {1 << ell} leaf pairs, got {len(leaves)}")
    first_leaf = 1 << ell
    executor = _executor(1 << parallel_levels) if parallel_levels > 0 else None

    def make(node: int, level: int) -> OutcomeFn:
        if level == ell:
            return _leaf_flipper(leaves[node - first_leaf], portkey.leaf, node)
        left, right = make(2 * node, level + 1), make(2 * node + 1, level + 1)
        if executor is not None and level < parallel_levels:
            return _forking_merge_flipper(left, right, portkey.at_level(level),
                                          node, executor)
        return _merge_flipper(left, right, portkey.at_level(level), node)

    return make(1, 0)


class DCBF:
    """A DCBF bound to fixed leaves, for repeated root flips."""

    def __init__(self, tree, leaves: Sequence[FactorPair],
                 portkey: PortkeyConfig = NO_PORTKEY, parallel_levels: int = 0,
                 max_flips: int = MAX_FLIPS):
        self.tree = tree
        self.portkey = portkey
        self.max_flips = max_flips
        self._fn = build_dcbf(tree, leaves, portkey, parallel_levels)

    def flip(self, stream: RandomStream, ledger: CostLedger) -> FlipOutcome:
        return _run_root(self._fn, stream, ledger, self.max_flips)


def flip_dcbf(tree, leaves: Sequence[FactorPair], portkey: PortkeyConfig,
              stream: RandomStream, ledger: CostLedger, parallel_levels: int = 0,
              max_flips: int = MAX_FLIPS) -> FlipOutcome:
    """One root output of the divide-and-conquer Bernoulli factory.

    Heads has probability ``h0(vartheta) / (h0(theta) + h0(vartheta))`` where
    ``h0`` is the product of the leaf factors; Portkey escapes inflate the
    tails-or-escape mass symmetrically.
    """
    return DCBF(tree, leaves, portkey, parallel_levels, max_flips).flip(stream, ledger)


def measure_overhead(ledger: CostLedger) -> tuple[float, float]:
    """Merge overhead ``omega`` and leaf-loop count ``phi`` per root flip."""
    if ledger.root_flips == 0:
        raise ValueError("ledger holds no completed root flips")
    return (ledger.leaf_outputs / ledger.root_flips,
            ledger.leaf_loops / ledger.root_flips)


def overhead_stderr(ledger: CostLedger) -> tuple[float, float]:
    """Standard errors of the two estimates from :func:`measure_overhead`."""
    m = ledger.root_flips
    if m < 2:
        raise ValueError("need at least two root flips")
    out = []
    for total, sq in ((ledger.leaf_outputs, ledger.sq_outputs),
                      (ledger.leaf_loops, ledger.sq_loops)):
        mean = total / m
        var = max(sq / m - mean * mean, 0.0) * m / (m - 1)
        out.append(math.sqrt(var / m))
    return out[0], out[1]


def two_coin_law(c1: float, p1: float, c2: float, p2: float,
                 varpi: float = 1.0) -> tuple[float, float, float, float]:
    """Closed-form (heads, tails, escape, ENL) of the Portkey 2-coin."""
    b = (1.0 / varpi - 1.0) * (c1 + c2)
    total = b + c1 * p1 + c2 * p2
    enl = (c1 + c2) / (varpi * total) if total > 0 else math.inf
    return c1 * p1 / total, c2 * p2 / total, b / total, enl
