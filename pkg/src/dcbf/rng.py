"""Seeded random streams, weighted coins and cost accounting.

Every factory in the package draws its randomness from a :class:`RandomStream`,
a thin buffered wrapper around numpy's counter-based Philox generator keyed by
``(seed, stream_id)``.  Streams are split deterministically, so a subtree of a
Bernoulli factory can own an independent stream keyed by its position in the
tree.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class DegenerateInputError(ValueError):
    """Raised when a factory is handed inputs with no well-defined output."""


class LoopCapExceeded(RuntimeError):
    """Raised when a factory exceeds its elementary flip budget."""


class FlipOutcome(IntEnum):
    TAILS = 0
    HEADS = 1
    ESCAPED = 2


HEADS = FlipOutcome.HEADS
TAILS = FlipOutcome.TAILS
ESCAPED = FlipOutcome.ESCAPED


def _mix64(x: int) -> int:
    # splitmix64 finalizer, a bijection on 64-bit integers
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class RandomStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Uniform and normal variates are served from pre-drawn blocks, which keeps
    the per-draw cost of the scalar-heavy factory loops low.  The sequence of
    values depends only on ``(seed, stream_id)`` and the order of calls.

    A stream is single-owner: hand it to another thread only if the current
    owner stops using it.
    """

    __slots__ = ("seed", "stream_id", "generator", "_unext", "_nnext", "_block",
                 "_spawned")

    def __init__(self, seed: int, stream_id: int = 0, block: int = 2048):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = self.seed | (self.stream_id << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))
        self._block = block
        self._unext = iter(()).__next__
        self._nnext = iter(()).__next__
        self._spawned = 0

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id:#x})"

    def uniform(self) -> float:
        """One draw from Unif[0, 1)."""
        try:
            return self._unext()
        except StopIteration:
            self._unext = iter(self.generator.random(self._block).tolist()).__next__
            return self._unext()

    def normal(self) -> float:
        try:
            return self._nnext()
        except StopIteration:
            self._nnext = iter(self.generator.standard_normal(self._block).tolist()).__next__
            return self._nnext()

    def poisson(self, lam: float) -> int:
        """Poisson variate; inversion for small means, numpy otherwise."""
        if lam <= 0.0:
            return 0
        if lam > 30.0:
            return int(self.generator.poisson(lam))
        u = self.uniform()
        k = 0
        p = math.exp(-lam)
        cdf = p
        while u >= cdf:
            k += 1
            p *= lam / k
            cdf += p
            if p == 0.0 and cdf < u:
                # float underflow in the far tail; u sits beyond representable mass
                break
        return k

    def geometric(self, success: float) -> int:
        """Number of trials up to and including the first success (>= 1)."""
        if success >= 1.0:
            return 1
        if success <= 0.0:
            raise ValueError("geometric success probability must be positive")
        u = 1.0 - self.uniform()  # in (0, 1]
        return 1 + int(math.floor(math.log(u) / math.log1p(-success)))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def spawn(self) -> "RandomStream":
        """Split off the next child stream (deterministic in call order)."""
        child = split_stream(self, self._spawned)
        self._spawned += 1
        return child


def split_stream(parent: RandomStream, child_index: int) -> RandomStream:
    """Deterministic child of ``parent``.

    Distinct ``child_index`` values map to distinct stream ids: the index
    enters through an odd multiplier followed by a 64-bit bijection.
    """
    if child_index < 0:
        raise ValueError("child_index must be non-negative")
    raw = (parent.stream_id + (child_index + 1) * _GOLDEN) & MASK64
    return RandomStream(parent.seed, _mix64(raw ^ 0xD1B54A32D192ED03))


def bernoulli(stream: RandomStream, p: float) -> int:
    """Return 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p!r} outside [0, 1]")
    if p == 1.0:
        return 1
    return 1 if stream.uniform() < p else 0


@dataclass
class CostLedger:
    """Loop and flip counters for one or more factory invocations.

    ``node_loops`` maps a heap-style node index (root 1, children ``2k`` and
    ``2k + 1``) to the number of visits to that node's start state.  Totals
    over merge nodes and leaves are kept separately in ``merge_loops`` and
    ``leaf_loops``.
    """

    node_loops: dict = field(default_factory=lambda: defaultdict(int))
    merge_loops: int = 0
    leaf_loops: int = 0
    leaf_outputs: int = 0
    leaf_flips: int = 0
    path_evals: int = 0
    root_flips: int = 0
    heads: int = 0
    tails: int = 0
    escapes: int = 0
    sq_outputs: int = 0
    sq_loops: int = 0
    elapsed: int = 0
    flip_limit: float = math.inf

    def reset(self) -> None:
        fresh = CostLedger()
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(fresh, name))

    def merge(self, other: "CostLedger") -> None:
        """Add the counts of ``other`` into this ledger."""
        for k, v in other.node_loops.items():
            self.node_loops[k] += v
        for name in ("merge_loops", "leaf_loops", "leaf_outputs", "leaf_flips",
                     "path_evals", "root_flips", "heads", "tails", "escapes",
                     "sq_outputs", "sq_loops", "elapsed"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def snapshot(self) -> tuple:
        return (self.leaf_outputs, self.leaf_loops, self.merge_loops,
                self.leaf_flips, self.elapsed)

    def record_root(self, outcome: FlipOutcome, outputs: int, loops: int,
                    elapsed_ns: int = 0) -> None:
        self.root_flips += 1
        self.sq_outputs += outputs * outputs
        self.sq_loops += loops * loops
        self.elapsed += elapsed_ns
        if outcome is HEADS:
            self.heads += 1
        elif outcome is TAILS:
            self.tails += 1
        else:
            self.escapes += 1


def now_ns() -> int:
    return time.perf_counter_ns()


FlipFn = Callable[[RandomStream, CostLedger], int]


class WeightedCoin:
    """A tractable scale ``c >= 0`` paired with a Bernoulli(p) flip source.

    The coin stands for the quantity ``c * p`` where ``p`` is unknown to the
    caller.  ``flip(stream, ledger)`` returns 0 or 1 and is responsible for
    counting its own elementary flips in ``ledger.leaf_flips``.
    ``p`` is recorded when known (tractable coins), for oracles and tests.
    """

    __slots__ = ("c", "flip", "p", "certain", "bernoulli")

    def __init__(self, c: float, flip: FlipFn, p: Optional[float] = None,
                 certain: bool = False):
        if not c >= 0.0:
            raise ValueError(f"coin scale must be non-negative, got {c!r}")
        self.c = float(c)
        self.flip = flip
        self.p = p
        self.certain = certain
        # set when ``flip`` is one Unif draw against this probability (or no
        # draw when 1), letting hot loops inline it with identical draws
        self.bernoulli = None

    def __repr__(self) -> str:
        p = "?" if self.p is None else f"{self.p:.6g}"
        return f"WeightedCoin(c={self.c:.6g}, p={p})"

    @classmethod
    def tractable(cls, c: float, p: float) -> "WeightedCoin":
        """Coin with known success probability ``p``."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p!r} outside [0, 1]")
        if p == 1.0:
            return cls.constant(c)

        def flip(stream, ledger):
            ledger.leaf_flips += 1
            return 1 if stream.uniform() < p else 0

        coin = cls(c, flip, p=p)
        coin.bernoulli = p
        return coin

    @classmethod
    def constant(cls, c: float) -> "WeightedCoin":
        """Coin that always lands heads (``p = 1``)."""

        def flip(stream, ledger):
            ledger.leaf_flips += 1
            return 1

        coin = cls(c, flip, p=1.0, certain=True)
        coin.bernoulli = 1.0
        return coin


def product_flip(flips: list) -> FlipFn:
    """Flip source for the product of independent coins.

    Flips the inputs in order and stops at the first tails.
    """
    if not flips:
        def one(stream, ledger):
            ledger.leaf_flips += 1
            return 1
        return one
    if len(flips) == 1:
        return flips[0]

    def flip(stream, ledger):
        for f in flips:
            if not f(stream, ledger):
                return 0
        return 1

    return flip
