"""Barker-within-Gibbs driver, chain traces and diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .factories import MAX_FLIPS, DCBF, FactorPair, PortkeyConfig, flip_two_coin, product_pair
from .partition import PartitionTree, shuffle_assignment
from .rng import CostLedger, FlipOutcome, RandomStream, WeightedCoin, now_ns, product_flip

SKIPPED = "skipped"
FACTORY_OUTCOMES = ("heads", "tails", "escaped")
TRACE_TAIL = ["outcome", "leaf_outputs", "leaf_loops", "merge_loops", "time_ns"]
SUMMARY_COLUMNS = ["n", "ell", "omega_hat", "phi_hat", "acf1", "acf4", "acf16", "ess",
                   "mean_time_ns"]


@dataclass(frozen=True)
class UniformProposal:
    """Symmetric proposal ``Unif(theta - half_width, theta + half_width)``."""

    half_width: float

    def __post_init__(self):
        if not self.half_width > 0.0:
            raise ValueError("proposal half-width must be positive")

    def draw(self, theta: float, stream: RandomStream) -> float:
        return theta + self.half_width * (2.0 * stream.uniform() - 1.0)


@dataclass(frozen=True)
class ChainConfig:
    iterations: int
    burn_in: int = 0
    delta: float = 8.0
    portkey: PortkeyConfig = PortkeyConfig()
    ell: int | None = None
    seed: int = 0
    thin: int = 1

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")


@dataclass
class StepResult:
    """Outcome of one Barker update.

    ``outcome`` is a FlipOutcome, or ``"skipped"`` when the proposal has
    zero posterior density and is rejected without running a factory.
    """

    theta: float
    proposal: float
    outcome: object
    time_ns: int = 0

    @property
    def accepted(self) -> bool:
        return self.outcome is FlipOutcome.HEADS


LeafFactory = Callable[[float, float, Sequence[np.ndarray]], "Sequence[FactorPair] | None"]


def grouped_factors(factor_pairs: Callable[[float, float], "Sequence[FactorPair] | None"]
                    ) -> LeafFactory:
    """Adapt a per-factor pair function to a per-leaf one via :func:`product_pair`."""

    def leaves(theta, vartheta, groups):
        pairs = factor_pairs(theta, vartheta)
        if pairs is None:
            return None
        return [product_pair([pairs[i] for i in g]) for g in groups]

    return leaves


def barker_step(theta: float, leaf_pairs: LeafFactory, proposal: UniformProposal,
                tree: PartitionTree, portkey: PortkeyConfig, stream: RandomStream,
                ledger: CostLedger, shuffle_stream: RandomStream | None = None,
                parallel_levels: int = 0, max_flips: int = MAX_FLIPS) -> StepResult:
    """One Barker update of a scalar parameter through a DCBF.

    ``leaf_pairs(theta, vartheta, groups)`` returns one FactorPair per leaf
    for the factor index groups of the (optionally reshuffled) tree, or
    ``None`` when ``vartheta`` lies outside the prior support.  The proposal
    is accepted iff the factory returns heads; tails and escapes reject.
    More than ``max_flips`` leaf flips in one update raise LoopCapExceeded.
    """
    t0 = now_ns()
    vartheta = proposal.draw(theta, stream)
    if shuffle_stream is not None:
        tree = shuffle_assignment(tree, shuffle_stream)
    leaves = leaf_pairs(theta, vartheta, tree.leaves())
    if leaves is None:
        return StepResult(theta, vartheta, SKIPPED, now_ns() - t0)
    out = DCBF(tree, leaves, portkey, parallel_levels, max_flips).flip(stream, ledger)
    new = vartheta if out is FlipOutcome.HEADS else theta
    return StepResult(new, vartheta, out, now_ns() - t0)


def outcome_name(outcome) -> str:
    if isinstance(outcome, FlipOutcome):
        return outcome.name.lower()
    return str(outcome)


class ChainTrace:
    """Per-iteration record of a chain in the trace CSV layout.

    Columns: ``iter``, the parameter columns, then
    ``outcome,leaf_outputs,leaf_loops,merge_loops,time_ns``.  With
    ``timing=False`` the time column is written as 0 so that output bytes
    depend only on the seed.
    """

    def __init__(self, param_names: Sequence[str], n: int, ell: int, timing: bool = True):
        self.param_names = list(param_names)
        self.n = n
        self.ell = ell
        self.timing = timing
        self.iters: list[int] = []
        self.params: list[list[float]] = []
        self.outcomes: list[str] = []
        self.leaf_outputs: list[int] = []
        self.leaf_loops: list[int] = []
        self.merge_loops: list[int] = []
        self.time_ns: list[int] = []

    def __len__(self) -> int:
        return len(self.iters)

    def append(self, it: int, params: Sequence[float], result: StepResult | None,
               ledger: CostLedger | None, time_ns: int | None = None) -> None:
        self.iters.append(int(it))
        self.params.append([float(p) for p in params])
        self.outcomes.append(outcome_name(result.outcome) if result else SKIPPED)
        led = ledger if ledger is not None else CostLedger()
        self.leaf_outputs.append(led.leaf_outputs)
        self.leaf_loops.append(led.leaf_loops)
        self.merge_loops.append(led.merge_loops)
        if time_ns is None:
            time_ns = result.time_ns if result is not None else 0
        self.time_ns.append(int(time_ns) if self.timing else 0)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[self.param_names.index(name)] for row in self.params])

    @property
    def header(self) -> list[str]:
        return ["iter", *self.param_names, *TRACE_TAIL]

    def rows(self):
        for i in range(len(self)):
            yield [str(self.iters[i]), *(repr(v) for v in self.params[i]),
                   self.outcomes[i], str(self.leaf_outputs[i]), str(self.leaf_loops[i]),
                   str(self.merge_loops[i]), str(self.time_ns[i])]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path, n: int = 0, ell: int = 0) -> "ChainTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            names = header[1:-len(TRACE_TAIL)]
            tr = cls(names, n, ell)
            k = len(names)
            for row in reader:
                tr.iters.append(int(row[0]))
                tr.params.append([float(v) for v in row[1:1 + k]])
                tr.outcomes.append(row[1 + k])
                tr.leaf_outputs.append(int(row[2 + k]))
                tr.leaf_loops.append(int(row[3 + k]))
                tr.merge_loops.append(int(row[4 + k]))
                tr.time_ns.append(int(row[5 + k]))
        return tr

    def acceptance_rate(self) -> float:
        return sum(o in ("heads", "accepted") for o in self.outcomes) / max(len(self), 1)

    def summary(self) -> dict:
        """Summary row; statistics refer to the last parameter column."""
        ran = [i for i, o in enumerate(self.outcomes) if o in FACTORY_OUTCOMES]
        nan = float("nan")
        omega = sum(self.leaf_outputs[i] for i in ran) / len(ran) if ran else nan
        phi = sum(self.leaf_loops[i] for i in ran) / len(ran) if ran else nan
        x = self.column(self.param_names[-1]) if len(self) else np.array([])
        stats = {}
        for lag in (1, 4, 16):
            stats[f"acf{lag}"] = _safe(lambda: acf(x, lag))
        stats["ess"] = _safe(lambda: ess(x))
        mean_time = float(np.mean(self.time_ns)) if len(self) else nan
        return {"n": self.n, "ell": self.ell, "omega_hat": omega, "phi_hat": phi,
                **stats, "mean_time_ns": mean_time}


def _safe(fn) -> float:
    try:
        return float(fn())
    except ValueError:
        return float("nan")


def format_summary_row(row: dict) -> list[str]:
    out = []
    for k in SUMMARY_COLUMNS:
        v = row[k]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return out


def write_summary(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(format_summary_row(r))


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- diagnostics --------------------------------------------------------------

def _autocorrelations(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    n = len(d)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0.0:
        raise ValueError("autocorrelation undefined for a constant trace")
    return acov / acov[0]


def acf(trace, lag: int) -> float:
    """Sample autocorrelation at ``lag`` (biased autocovariance estimator)."""
    x = np.asarray(trace, dtype=float)
    if lag < 0:
        raise ValueError("lag must be non-negative")
    if len(x) < 10 * max(lag, 1):
        raise ValueError(f"trace of length {len(x)} too short for lag {lag}")
    return float(_autocorrelations(x)[lag])


def ess(trace) -> float:
    """Effective sample size by Geyer's initial positive sequence."""
    x = np.asarray(trace, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("trace too short for an ESS estimate")
    rho = _autocorrelations(x)
    tau = -1.0
    prev = math.inf
    for m in range(n // 2):
        g = rho[2 * m] + rho[2 * m + 1]
        if g <= 0.0:
            break
        g = min(g, prev)  # initial monotone sequence
        tau += 2.0 * g
        prev = g
    return n / tau


# -- vanilla 2-coin cost ---------------------------------------------------------

def vanilla_two_coin_benchmark(n: int, p_per_factor: float, stream: RandomStream,
                               trials: int = 20_000) -> tuple[float, float]:
    """Mean loop count (and its standard error) of the monolithic 2-coin.

    Both sides use ``c = 1`` and the product of ``n`` independent
    ``p_per_factor`` coins, flipped one after another.
    """
    if n == 0:
        return 1.0, 0.0
    factors = [WeightedCoin.tractable(1.0, p_per_factor).flip for _ in range(n)]
    side = WeightedCoin(1.0, product_flip(factors), p=p_per_factor**n)
    pair = FactorPair(side, side)
    led = CostLedger()
    for _ in range(trials):
        flip_two_coin(pair, 1.0, stream, led)
    mean = led.leaf_loops / trials
    var = max(led.sq_loops / trials - mean * mean, 0.0) * trials / (trials - 1)
    return mean, math.sqrt(var / trials)


def fit_log_slope(xs, ys) -> float:
    """Least-squares slope of ``log(ys)`` against ``xs``."""
    return float(np.polyfit(np.asarray(xs, float), np.log(np.asarray(ys, float)), 1)[0])
