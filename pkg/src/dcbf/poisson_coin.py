"""Poisson coins: exact events of probability ``exp(int_0^T (lower - w_t) dt)``.

A unit-rate Poisson process on ``[0, T] x [0, upper - lower]`` has no point
below the graph of ``w - lower`` with exactly that probability, so the coin
only needs ``w`` at the process's points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .rng import CostLedger, RandomStream

# relative slack for floating round-off in bound checks
_BOUND_TOL = 1e-12


class BoundViolation(ArithmeticError):
    """A path value fell outside its declared bounds."""


@dataclass(frozen=True)
class BoundedPath:
    """A path ``w`` on ``[0, horizon]`` known to stay within ``[lower, upper]``.

    ``eval(t)`` may have side effects, such as revealing a new point of a
    lazily simulated path; it is called with increasing ``t`` within a flip.
    """

    eval: Callable[[float], float]
    lower: float
    upper: float
    horizon: float

    def __post_init__(self):
        if not self.upper >= self.lower:
            raise ValueError(f"upper bound {self.upper} below lower bound {self.lower}")
        if not self.horizon >= 0.0:
            raise ValueError("horizon must be non-negative")

    @property
    def rate(self) -> float:
        """Integrated intensity ``T (upper - lower)``."""
        return self.horizon * (self.upper - self.lower)

    @classmethod
    def constant(cls, value: float, lower: float, upper: float,
                 horizon: float = 1.0) -> "BoundedPath":
        return cls(lambda t: value, lower, upper, horizon)


def _check(path: BoundedPath, w: float, t: float) -> None:
    tol = _BOUND_TOL * max(1.0, abs(path.lower), abs(path.upper))
    if not (path.lower - tol <= w <= path.upper + tol):
        raise BoundViolation(
            f"path value {w!r} at t={t:.6g} outside [{path.lower!r}, {path.upper!r}]")


def _run_points(path: BoundedPath, k: int, stream: RandomStream,
                ledger: CostLedger, short_circuit: bool) -> int:
    if k == 0:
        return 1
    u = stream.uniform
    T = path.horizon
    height = path.upper - path.lower
    lower = path.lower
    times = sorted(T * u() for _ in range(k))
    marks = [height * u() for _ in range(k)]
    heads = 1
    evals = 0
    try:
        for t, a in zip(times, marks):
            w = path.eval(t)
            evals += 1
            _check(path, w, t)
            if a < w - lower:
                heads = 0
                if short_circuit:
                    break
    finally:
        ledger.path_evals += evals
    return heads


def flip_poisson_coin(path: BoundedPath, stream: RandomStream, ledger: CostLedger,
                      short_circuit: bool = False) -> int:
    """Return 1 with probability ``exp(int (lower - w_t) dt)``.

    Every Poisson point is evaluated unless ``short_circuit`` is set, in
    which case evaluation stops at the first point under the graph.  The
    outcome law is the same either way; the full scan keeps the number of
    evaluations at exactly the Poisson count, and bound checks cover all
    points.
    """
    ledger.leaf_flips += 1
    k = stream.poisson(path.rate)
    return _run_points(path, k, stream, ledger, short_circuit)


def poisson_coin_flip(path: BoundedPath, short_circuit: bool = False):
    """Flip source ``f(stream, ledger)`` for use in a WeightedCoin."""

    def flip(stream: RandomStream, ledger: CostLedger) -> int:
        return flip_poisson_coin(path, stream, ledger, short_circuit)

    return flip


def zero_truncated_poisson(lam: float, stream: RandomStream) -> int:
    """Poisson(lam) conditioned on being at least 1."""
    if lam <= 0.0:
        raise ValueError("rate must be positive")
    if lam > 30.0:
        while True:
            k = stream.poisson(lam)
            if k > 0:
                return k
    p0 = math.exp(-lam)
    u = p0 + stream.uniform() * (1.0 - p0)
    k = 1
    p = p0 * lam
    cdf = p0 + p
    while u >= cdf and p > 0.0:
        k += 1
        p *= lam / k
        cdf += p
    return k


def _first_success(paths: Sequence[BoundedPath], start: int, lam: float,
                   stream: RandomStream, ledger: CostLedger,
                   short_circuit: bool) -> tuple[int, int]:
    remaining = len(paths) - start
    if lam == 0.0 or remaining <= 0:
        ledger.leaf_flips += max(remaining, 0)
        return len(paths), 1
    skip = stream.geometric(-math.expm1(-lam)) - 1
    if skip >= remaining:
        ledger.leaf_flips += remaining
        return len(paths), 1
    ledger.leaf_flips += skip + 1
    k = zero_truncated_poisson(lam, stream)
    index = start + skip
    return index, _run_points(paths[index], k, stream, ledger, short_circuit)


def _shared_rate(paths: Sequence[BoundedPath]) -> float:
    lam = paths[0].rate
    if any(abs(p.rate - lam) > 1e-12 * max(1.0, lam) for p in paths):
        raise ValueError("batched coins must share one intensity")
    return lam


def batch_first_success(paths: Sequence[BoundedPath], stream: RandomStream,
                        ledger: CostLedger, short_circuit: bool = False
                        ) -> tuple[int, int]:
    """Skip ahead to the first coin whose Poisson process is non-empty.

    All paths must share the same integrated intensity ``lam``.  The number
    of leading empty processes is geometric, so the coins before the
    returned index all land heads without being simulated.

    Returns
    -------
    index : int
        Position of the first coin with at least one point, or
        ``len(paths)`` when every process is empty (all heads).
    bit : int
        Outcome of the coin at ``index`` (1 when ``index == len(paths)``).
    """
    if not paths:
        return 0, 1
    return _first_success(paths, 0, _shared_rate(paths), stream, ledger, short_circuit)


def batched_product_flip(paths: Sequence[BoundedPath], short_circuit: bool = False):
    """Flip source for the product of Poisson coins sharing one intensity.

    Empty processes are skipped in geometric jumps; equivalent in law to
    flipping the coins one after another and stopping at the first tails.
    """
    paths = list(paths)
    lam = _shared_rate(paths) if paths else 0.0

    def flip(stream: RandomStream, ledger: CostLedger) -> int:
        start = 0
        while start < len(paths):
            idx, bit = _first_success(paths, start, lam, stream, ledger, short_circuit)
            if not bit:
                return 0
            start = idx + 1
        return 1

    return flip
