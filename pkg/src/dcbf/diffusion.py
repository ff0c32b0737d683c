"""Bayesian inference for the tanh-drift diffusion ``dX = tanh(theta - X) dt + dW``.

The path between observations is kept as a lazily refined skeleton: a sorted
set of revealed points, with anything in between a Brownian bridge.  Bridges
are drawn exactly by retrospective rejection against Brownian bridges, and
the parameter update is a Barker step driven by a DCBF over the Girsanov
factors of the individual intervals.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .factories import MAX_FLIPS, FactorPair, PortkeyConfig
from .poisson_coin import BoundedPath, batched_product_flip, flip_poisson_coin
from .rng import CostLedger, RandomStream, WeightedCoin, now_ns

PHI_LOWER = -0.5
PHI_UPPER = 0.5
DPHI_BOUND = 4.0 / (3.0 * math.sqrt(3.0))
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class RejectionCapExceeded(RuntimeError):
    """An exact rejection sampler ran out of attempts."""


class TanhModel:
    """Drift ``tanh(theta - x)`` with unit volatility.

    ``phi = (beta**2 + beta') / 2`` simplifies to ``tanh(theta - a)**2 - 1/2``,
    which lies in ``[-1/2, 1/2)``.
    """

    phi_bounds = (PHI_LOWER, PHI_UPPER)
    dphi_bound = DPHI_BOUND

    @staticmethod
    def drift(theta, x):
        return np.tanh(theta - x)

    @staticmethod
    def potential(theta: float, x: float) -> float:
        """``B_theta(x) = -log cosh(theta - x)``, an antiderivative of the drift."""
        u = abs(theta - x)
        return -(u + math.log1p(math.exp(-2.0 * u)) - math.log(2.0))

    @staticmethod
    def phi(theta, a):
        t = np.tanh(theta - a)
        return t * t - 0.5

    @staticmethod
    def dphi(theta, a):
        u = theta - a
        return 2.0 * np.tanh(u) / np.cosh(u) ** 2

    @staticmethod
    def log_prior(theta: float) -> float:
        return -0.5 * theta * theta - _LOG_SQRT_2PI


def _phi(theta: float, a: float) -> float:
    t = math.tanh(theta - a)
    return t * t - 0.5


class PathSkeleton:
    """Revealed points of one path segment on local times ``[0, dt]``.

    ``value(t)`` returns the path at ``t``, drawing it from the Brownian
    bridge between the nearest revealed neighbours when ``t`` is new.  The
    draw uses ``self.stream``, which the caller sets before evaluating.
    """

    __slots__ = ("times", "values", "stream")

    def __init__(self, x0: float, x1: float, dt: float,
                 stream: RandomStream | None = None):
        if not dt > 0.0:
            raise ValueError("segment length must be positive")
        self.times = [0.0, float(dt)]
        self.values = [float(x0), float(x1)]
        self.stream = stream

    @property
    def dt(self) -> float:
        return self.times[-1]

    @property
    def endpoints(self) -> tuple[float, float]:
        return self.values[0], self.values[-1]

    def __len__(self) -> int:
        return len(self.times)

    def value(self, t: float) -> float:
        times = self.times
        k = bisect.bisect_left(times, t)
        if k < len(times) and times[k] == t:
            return self.values[k]
        if k == 0 or k == len(times):
            raise ValueError(f"time {t} outside segment [0, {times[-1]}]")
        a, b = times[k - 1], times[k]
        xa, xb = self.values[k - 1], self.values[k]
        w = (t - a) / (b - a)
        mean = xa + w * (xb - xa)
        sd = math.sqrt((t - a) * (b - t) / (b - a))
        x = mean + sd * self.stream.normal()
        times.insert(k, t)
        self.values.insert(k, x)
        return x


@dataclass
class DiffusionDataset:
    """Observations ``values[i]`` at strictly increasing ``times[i]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observations must be finite")

    @property
    def n(self) -> int:
        """Number of intervals between observations."""
        return len(self.times) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x"])
            for t, x in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(x))])

    @classmethod
    def from_csv(cls, path) -> "DiffusionDataset":
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["t"]) for r in rows], [float(r["x"]) for r in rows])


def _bridge_coin(skel: PathSkeleton, theta: float) -> BoundedPath:
    return BoundedPath(lambda t: _phi(theta, skel.value(t)), PHI_LOWER, PHI_UPPER,
                       skel.dt)


def sample_bridge(x0: float, x1: float, dt: float, theta: float,
                  stream: RandomStream, ledger: CostLedger | None = None,
                  max_attempts: int = 100_000) -> PathSkeleton:
    """Exact draw from the diffusion bridge from ``x0`` to ``x1`` over ``dt``.

    Brownian-bridge proposals are accepted with probability
    ``exp(-int (phi_theta + 1/2))`` through a Poisson coin, so at least
    ``exp(-dt)`` of proposals succeed.  The returned skeleton holds the
    points revealed by the accepting coin.
    """
    ledger = ledger if ledger is not None else CostLedger()
    for _ in range(max_attempts):
        skel = PathSkeleton(x0, x1, dt, stream)
        if flip_poisson_coin(_bridge_coin(skel, theta), stream, ledger,
                             short_circuit=True):
            return skel
    raise RejectionCapExceeded(
        f"bridge {x0:.4g} -> {x1:.4g} over {dt} not accepted in {max_attempts} attempts")


def _transition(x: float, dt: float, theta: float, stream: RandomStream,
                ledger: CostLedger, max_attempts: int) -> float:
    sd = math.sqrt(dt)
    for _ in range(max_attempts):
        y = x + sd * stream.normal()
        # endpoint weight exp(B(y)) = sech(theta - y) <= 1
        if stream.uniform() >= 1.0 / math.cosh(min(abs(theta - y), 700.0)):
            continue
        skel = PathSkeleton(x, y, dt, stream)
        if flip_poisson_coin(_bridge_coin(skel, theta), stream, ledger,
                             short_circuit=True):
            return y
    raise RejectionCapExceeded(f"transition from {x:.4g} not accepted in "
                               f"{max_attempts} attempts")


def simulate_tanh_path(theta: float, times, stream: RandomStream, x0: float = 0.0,
                       max_attempts: int = 1_000_000) -> DiffusionDataset:
    """Exact draw of the diffusion at ``times`` started from ``x0`` at ``times[0]``."""
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        raise ValueError("need at least one time")
    ledger = CostLedger()
    xs = [float(x0)]
    for dt in np.diff(times):
        xs.append(_transition(xs[-1], float(dt), theta, stream, ledger, max_attempts))
    return DiffusionDataset(times, np.array(xs))


def regular_times(n: int, dt: float = 0.25) -> np.ndarray:
    return dt * np.arange(n + 1)


# -- parameter update ------------------------------------------------------

def _q_path(skel: PathSkeleton, hi: float, lo: float, bound: float) -> BoundedPath:
    # w = 0 v (phi_hi - phi_lo), the integrand of q(lo, hi)
    def w(t):
        d = _phi(hi, skel.value(t)) - _phi(lo, skel.value(t))
        return d if d > 0.0 else 0.0
    return BoundedPath(w, 0.0, bound, skel.dt)


def _skeleton_flip(skels: Sequence[PathSkeleton], inner):
    def flip(stream, ledger):
        for s in skels:
            s.stream = stream
        return inner(stream, ledger)
    return flip


def _log_c(skel: PathSkeleton, theta: float, prior_share: float) -> float:
    x0, x1 = skel.endpoints
    return (TanhModel.potential(theta, x1) - TanhModel.potential(theta, x0)
            + prior_share * TanhModel.log_prior(theta))


def girsanov_leaf_pair(segment: PathSkeleton, theta: float, vartheta: float,
                       prior_share: float) -> FactorPair:
    """Factor pair for one interval's odds ``L_i(vartheta) : L_i(theta)``.

    The numerator scale is ``exp(B_vartheta(x_i) - B_vartheta(x_{i-1}))``
    times ``prior(vartheta) ** prior_share``; its coin lands heads with
    probability ``q(theta, vartheta) = exp(-int 0 v (phi_vartheta - phi_theta))``.
    The denominator swaps the roles of the two parameters.
    """
    bound = abs(vartheta - theta) * DPHI_BOUND
    coins = []
    for hi, lo in ((vartheta, theta), (theta, vartheta)):
        c = math.exp(_log_c(segment, hi, prior_share))
        if bound == 0.0:
            coins.append(WeightedCoin.constant(c))
            continue
        path = _q_path(segment, hi, lo, bound)
        coins.append(WeightedCoin(
            c, _skeleton_flip([segment], lambda s, l, p=path: flip_poisson_coin(p, s, l))))
    return FactorPair(coins[0], coins[1])


def leaf_pairs(segments: Sequence[PathSkeleton], groups: Sequence[np.ndarray],
               theta: float, vartheta: float, batch: bool = False) -> list[FactorPair]:
    """One factor pair per leaf, multiplying the interval factors in each group.

    With ``batch`` the product of Poisson coins in a leaf skips empty
    processes geometrically instead of simulating each one.
    """
    n = len(segments)
    bound = abs(vartheta - theta) * DPHI_BOUND
    out = []
    for members in groups:
        skels = [segments[i] for i in members]
        coins = []
        for hi, lo in ((vartheta, theta), (theta, vartheta)):
            logc = sum(_log_c(s, hi, 1.0 / n) for s in skels)
            coins.append([logc, None])
            if bound > 0.0:
                paths = [_q_path(s, hi, lo, bound) for s in skels]
                if batch:
                    inner = batched_product_flip(paths)
                else:
                    def inner(stream, ledger, paths=paths):
                        for p in paths:
                            if not flip_poisson_coin(p, stream, ledger):
                                return 0
                        return 1
                coins[-1][1] = _skeleton_flip(skels, inner)
        top = max(coins[0][0], coins[1][0])
        made = [WeightedCoin.constant(math.exp(lc - top)) if f is None
                else WeightedCoin(math.exp(lc - top), f) for lc, f in coins]
        out.append(FactorPair(made[0], made[1]))
    return out


@dataclass
class DiffusionConfig:
    """Settings of the diffusion sampler.

    ``leaf_escape=None`` uses escape probability ``1/n`` per leaf loop.
    ``ell=None`` uses ``floor(log4 n)``.
    """

    delta: float = 8.0
    ell: int | None = None
    leaf_escape: float | None = None
    batch: bool = False
    parallel_levels: int = 0
    max_flips: int = MAX_FLIPS

    def depth(self, n: int) -> int:
        from .partition import default_depth
        return default_depth(n) if self.ell is None else self.ell

    def portkey(self, n: int) -> PortkeyConfig:
        esc = 1.0 / n if self.leaf_escape is None else self.leaf_escape
        return PortkeyConfig.leaf_escape(esc)


@dataclass
class DiffusionState:
    theta: float
    segments: list = field(default_factory=list)


def refresh_bridges(state: DiffusionState, dataset: DiffusionDataset,
                    stream: RandomStream, ledger: CostLedger | None = None) -> None:
    """Redraw every segment exactly from its bridge law under ``state.theta``."""
    dts = np.diff(dataset.times)
    xs = dataset.values
    state.segments = [sample_bridge(xs[i], xs[i + 1], float(dts[i]), state.theta,
                                    stream, ledger) for i in range(dataset.n)]


def gibbs_sweep_diffusion(state: DiffusionState, dataset: DiffusionDataset,
                          config: DiffusionConfig, stream: RandomStream,
                          ledger: CostLedger, shuffle_stream: RandomStream,
                          tree=None):
    """Refresh all bridges, then one Barker update of ``theta``.

    Returns the :class:`~dcbf.mcmc.StepResult` of the parameter update.
    """
    from .mcmc import UniformProposal, barker_step
    from .partition import build_tree

    n = dataset.n
    refresh_bridges(state, dataset, stream)
    if tree is None:
        tree = build_tree(n, config.depth(n))
    proposal = UniformProposal(config.delta / math.sqrt(n))
    segments = state.segments

    def leaves(theta, vartheta, groups):
        return leaf_pairs(segments, groups, theta, vartheta, config.batch)

    result = barker_step(state.theta, leaves, proposal, tree, config.portkey(n),
                         stream, ledger, shuffle_stream=shuffle_stream,
                         parallel_levels=config.parallel_levels,
                         max_flips=config.max_flips)
    state.theta = result.theta
    return result


def run_diffusion_chain(dataset: DiffusionDataset, config: DiffusionConfig,
                        iterations: int, seed: int, theta0: float = 0.0,
                        timing: bool = True):
    """Run the sampler and return a :class:`~dcbf.mcmc.ChainTrace`.

    The recorded time is that of the whole sweep, bridges included.
    """
    from .mcmc import ChainTrace
    from .partition import build_tree

    root = RandomStream(seed)
    stream, shuffle_stream = root.spawn(), root.spawn()
    tree = build_tree(dataset.n, config.depth(dataset.n))
    state = DiffusionState(theta0)
    trace = ChainTrace(["theta_1"], n=dataset.n, ell=tree.depth, timing=timing)
    for it in range(iterations):
        ledger = CostLedger()
        t0 = now_ns()
        res = gibbs_sweep_diffusion(state, dataset, config, stream, ledger,
                                    shuffle_stream, tree)
        trace.append(it, [state.theta], res, ledger, now_ns() - t0)
    return trace


# -- fine-grid oracles ------------------------------------------------------

def euler_transitions(x0: float, dt: float, theta: float, size: int,
                      step: float, rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama endpoints after ``dt`` for ``size`` independent paths."""
    m = int(round(dt / step))
    h = dt / m
    x = np.full(size, float(x0))
    sq = math.sqrt(h)
    for _ in range(m):
        x += np.tanh(theta - x) * h + sq * rng.standard_normal(size)
    return x


def euler_da_sampler(dataset: DiffusionDataset, iterations: int, rng: np.random.Generator,
                     step: float = 1e-3, theta0: float = 0.0, rw_scale: float = 0.5,
                     theta_moves: int = 5) -> np.ndarray:
    """Data-augmentation MH on an Euler grid, as a reference posterior for theta.

    Each sweep proposes every interval's path independently from a Brownian
    bridge on the grid and accepts it with the Euler-to-Brownian density
    ratio, then applies ``theta_moves`` random-walk updates of ``theta``.
    """
    n = dataset.n
    dts = np.diff(dataset.times)
    m = int(round(dts[0] / step))
    if not np.allclose(dts, dts[0]):
        raise ValueError("oracle assumes a regular observation grid")
    h = dts[0] / m
    grid = np.linspace(0.0, 1.0, m + 1)
    x0, x1 = dataset.values[:-1, None], dataset.values[1:, None]

    def bridges(size):
        z = rng.standard_normal((size, m)) * math.sqrt(h)
        w = np.concatenate([np.zeros((size, 1)), np.cumsum(z, axis=1)], axis=1)
        w -= grid[None, :] * w[:, -1:]
        return x0 + grid[None, :] * (x1 - x0) + w

    def loglik(paths, theta):
        xs = paths[:, :-1]
        b = np.tanh(theta - xs)
        return np.sum(b * np.diff(paths, axis=1) - 0.5 * b * b * h, axis=1)

    paths = bridges(n)
    theta = theta0
    out = np.empty(iterations)
    ll = loglik(paths, theta)
    for it in range(iterations):
        prop = bridges(n)
        llp = loglik(prop, theta)
        acc = np.log(rng.uniform(size=n)) < llp - ll
        paths[acc] = prop[acc]
        ll[acc] = llp[acc]
        cur = ll.sum() - 0.5 * theta * theta
        for _ in range(theta_moves):
            t = theta + rw_scale * rng.standard_normal()
            llt = loglik(paths, t)
            new = llt.sum() - 0.5 * t * t
            if math.log(rng.uniform()) < new - cur:
                theta, cur, ll = t, new, llt
        out[it] = theta
    return out
