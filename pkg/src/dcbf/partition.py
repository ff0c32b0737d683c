"""Binary partition trees over factor indices and merge-overhead predictions.

A tree of depth ``ell`` has ``2**ell`` leaves.  Leaves are numbered
``0 .. 2**ell - 1`` from left to right, so the label of a factor at level
``k`` is its leaf number shifted right by ``ell - k``; labels are therefore
prefix-consistent by construction.  In heap numbering (root 1) leaf ``j`` is
node ``2**ell + j``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .rng import RandomStream


@dataclass(frozen=True)
class PartitionTree:
    """Assignment of ``n`` factors to the ``2**depth`` leaves of a binary tree.

    Attributes
    ----------
    n : int
        Number of factors.
    depth : int
        Tree depth ``ell``.
    assignment : ndarray of int
        ``assignment[i]`` is the leaf number of factor ``i``.
    """

    n: int
    depth: int
    assignment: np.ndarray

    def __post_init__(self):
        self.assignment.setflags(write=False)

    @property
    def num_leaves(self) -> int:
        return 1 << self.depth

    def label(self, i: int, level: int) -> int:
        """Node of factor ``i`` at ``level`` (0 = root), numbered left to right."""
        if not 0 <= level <= self.depth:
            raise ValueError("level outside tree")
        return int(self.assignment[i]) >> (self.depth - level)

    def leaves(self) -> list[np.ndarray]:
        """Factor indices held by each leaf, in leaf order."""
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.num_leaves + 1))
        return [order[bounds[j]:bounds[j + 1]] for j in range(self.num_leaves)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_leaves)


def default_depth(n: int) -> int:
    """``floor(log4 n)``, the depth used by the application samplers."""
    if n < 1:
        raise ValueError("n must be positive")
    d = 0
    while 4 ** (d + 1) <= n:
        d += 1
    return d


def build_tree(n: int, ell: int) -> PartitionTree:
    """Contiguous balanced split by recursive halving (left half takes the extra).

    Examples
    --------
    >>> build_tree(7, 2).sizes().tolist()
    [2, 2, 2, 1]
    """
    if ell < 0:
        raise ValueError("depth must be non-negative")
    if (1 << ell) > n:
        raise ValueError(f"depth {ell} needs at least {1 << ell} factors, got {n}")
    assignment = np.empty(n, dtype=np.int64)

    def split(lo: int, hi: int, level: int, label: int) -> None:
        if level == ell:
            assignment[lo:hi] = label
            return
        mid = lo + (hi - lo + 1) // 2
        split(lo, mid, level + 1, 2 * label)
        split(mid, hi, level + 1, 2 * label + 1)

    split(0, n, 0, 0)
    return PartitionTree(n, ell, assignment)


def shuffle_assignment(tree: PartitionTree, stream: RandomStream) -> PartitionTree:
    """Uniformly random relabelling of factors onto the tree's slots."""
    if tree.n <= 1:
        return tree
    perm = stream.permutation(tree.n)
    assignment = np.empty_like(tree.assignment)
    assignment[perm] = tree.assignment
    return PartitionTree(tree.n, tree.depth, assignment)


def predicted_overhead_balanced(ell: int) -> float:
    """Merge overhead when every merge input is a fair coin: ``4**ell``."""
    if ell < 0:
        raise ValueError("depth must be non-negative")
    return float(4**ell)


def _ratios(f_theta, f_vartheta) -> np.ndarray:
    ft = np.asarray(f_theta, dtype=float)
    fv = np.asarray(f_vartheta, dtype=float)
    if ft.shape != fv.shape or ft.ndim != 1:
        raise ValueError("factor arrays must be 1-d and of equal length")
    if np.any((ft == 0) & (fv == 0)):
        raise ValueError("a factor vanishes at both parameter values")
    if np.any(ft < 0) or np.any(fv < 0):
        raise ValueError("factor values must be non-negative")
    with np.errstate(divide="ignore"):
        return fv / ft


def _elementary_symmetric(x: np.ndarray) -> np.ndarray:
    """``e_0 .. e_n`` of the entries of ``x``."""
    e = np.zeros(len(x) + 1)
    e[0] = 1.0
    for k, v in enumerate(x, start=1):
        e[1:k + 1] = e[1:k + 1] + v * e[0:k]
    return e


def predicted_overhead_randomized(f_theta, f_vartheta, ell: int,
                                  num_permutations: int | None = None,
                                  stream: RandomStream | None = None) -> float:
    """Expected merge overhead when factors are shuffled onto a balanced tree.

    Evaluates ``2**ell * (1 + 2 r * sum_j E[prod_{i <= j n / 2**ell} R_perm(i)])``
    with ``R_i = f_i(vartheta) / f_i(theta)`` and
    ``r = h(theta) / (h(theta) + h(vartheta))``.

    With ``num_permutations=None`` the expectation over permutations is exact:
    the mean of a product over a random ``m``-subset is ``e_m(R) / C(n, m)``.
    Otherwise it is a Monte Carlo average over that many permutations drawn
    from ``stream``.  Requires ``n`` divisible by ``2**ell``.
    """
    R = _ratios(f_theta, f_vartheta)
    n = len(R)
    leaves = 1 << ell
    if n % leaves:
        raise ValueError("formula requires n divisible by 2**ell")
    if np.any(np.isinf(R)):
        raise ValueError("factor ratio is infinite")
    batch = n // leaves
    h_ratio = float(np.prod(R))
    r0 = 1.0 / (1.0 + h_ratio)
    ms = [j * batch for j in range(1, leaves)]
    if num_permutations is None:
        e = _elementary_symmetric(R)
        total = sum(e[m] / math.comb(n, m) for m in ms)
    else:
        if stream is None:
            raise ValueError("Monte Carlo evaluation needs a stream")
        total = 0.0
        for _ in range(num_permutations):
            cum = np.cumprod(R[stream.permutation(n)])
            total += sum(cum[m - 1] for m in ms)
        total /= num_permutations
    return leaves * (1.0 + 2.0 * r0 * total)


def predicted_overhead_exhaustive(f_theta, f_vartheta, ell: int) -> float:
    """Same expression as :func:`predicted_overhead_randomized`, averaged
    over all ``n!`` permutations explicitly (small ``n`` only)."""
    R = _ratios(f_theta, f_vartheta)
    n = len(R)
    leaves = 1 << ell
    if n % leaves:
        raise ValueError("formula requires n divisible by 2**ell")
    if n > 9:
        raise ValueError("exhaustive enumeration limited to n <= 9")
    batch = n // leaves
    r0 = 1.0 / (1.0 + float(np.prod(R)))
    acc = 0.0
    count = 0
    for perm in itertools.permutations(range(n)):
        cum = np.cumprod(R[list(perm)])
        acc += sum(cum[j * batch - 1] for j in range(1, leaves))
        count += 1
    return leaves * (1.0 + 2.0 * r0 * acc / count)


def overhead_for_assignment(tree: PartitionTree, f_theta, f_vartheta) -> float:
    """Exact merge overhead of one fixed assignment with certain leaf coins.

    Each merge node contributes ``tau * (omega_left + omega_right)`` where
    ``tau = 1 / (r1 r2 + (1 - r1)(1 - r2))`` is its expected loop count.
    """
    R = _ratios(f_theta, f_vartheta)

    def walk(members: list[np.ndarray]) -> tuple[float, float]:
        # returns (heads probability, expected leaf outputs)
        if len(members) == 1:
            odds = float(np.prod(R[members[0]]))
            return (1.0 if math.isinf(odds) else odds / (1.0 + odds)), 1.0
        half = len(members) // 2
        r1, w1 = walk(members[:half])
        r2, w2 = walk(members[half:])
        agree = r1 * r2 + (1.0 - r1) * (1.0 - r2)
        if agree == 0.0:
            raise ValueError("children never agree")
        return r1 * r2 / agree, (w1 + w2) / agree

    return walk(tree.leaves())[1]
