"""Level-set Cox process on a square, with augmented and collapsed samplers.

The window ``S = [0, side]^2`` has area ``n = side**2`` and is covered by ``n``
unit tiles.  The latent field lives on a finer lattice of square cells (side
``cell``, default 1/2, so four cells per tile) with a 4-neighbour Gaussian
Markov random field prior of precision ``tau * (kappa2 * I + D - A)``.  The
intensity is ``theta[l]`` on cells whose field value falls in level ``l``.

Two samplers are provided:

* AGS conditions on an auxiliary Poisson process ``psi`` with rate
  ``nu * max(theta) - lambda(s)`` (thinning augmentation) and updates
  ``theta`` by random-walk Metropolis.
* CGS integrates ``psi`` out of the ``theta`` update and runs a Barker step
  per level through a DCBF over the unit tiles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .factories import MAX_FLIPS, FactorPair, PortkeyConfig
from .mcmc import ChainTrace, StepResult, UniformProposal, barker_step
from .partition import build_tree, default_depth
from .poisson_coin import BoundedPath, flip_poisson_coin
from .rng import CostLedger, RandomStream, WeightedCoin, now_ns, product_flip


@dataclass(frozen=True)
class LevelSetModel:
    """Fixed parts of the model.

    ``thresholds`` are the interior level boundaries, so there are
    ``len(thresholds) + 1`` levels; level ``l`` holds ``t[l-1] <= z < t[l]``.
    """

    thresholds: tuple = (0.0,)
    prior_lower: float = 0.0
    prior_upper: float = 5.0
    tau: float = 1.0
    kappa2: float = 0.01
    nu: float = 5.0
    cell: float = 0.5

    def __post_init__(self):
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("thresholds must be increasing")
        if not 0.0 <= self.prior_lower < self.prior_upper:
            raise ValueError("prior range must be a positive interval")
        if not self.nu > 1.0:
            raise ValueError("nu must exceed 1")
        if abs(1.0 / self.cell - round(1.0 / self.cell)) > 1e-12:
            raise ValueError("cell side must divide the unit tile")

    @property
    def L(self) -> int:
        return len(self.thresholds) + 1

    @property
    def cells_per_tile_side(self) -> int:
        return int(round(1.0 / self.cell))

    def levels(self, z: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.thresholds), z, side="right")

    def in_support(self, theta) -> bool:
        t = np.asarray(theta)
        return bool(np.all((t > self.prior_lower) & (t <= self.prior_upper)))


@dataclass
class CoxDataset:
    """Points in the square ``[0, side]^2``."""

    side: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if np.any(self.points < 0.0) or np.any(self.points >= self.side):
            raise ValueError("points must lie inside the window")

    @property
    def n(self) -> int:
        return self.side * self.side

    def cell_counts(self, cell: float) -> np.ndarray:
        m = int(round(self.side / cell))
        idx = np.floor(self.points / cell).astype(np.int64)
        counts = np.zeros((m, m), dtype=np.int64)
        np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
        return counts

    def to_files(self, points_path, geometry_path) -> None:
        with open(points_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sx", "sy"])
            for x, y in self.points:
                w.writerow([repr(float(x)), repr(float(y))])
        Path(geometry_path).write_text(
            f"side={self.side}\nx0=0.0\ny0=0.0\narea={self.n}\n")

    @classmethod
    def from_files(cls, points_path, geometry_path) -> "CoxDataset":
        geo = read_key_values(geometry_path)
        with open(points_path, newline="") as fh:
            pts = [(float(r["sx"]), float(r["sy"])) for r in csv.DictReader(fh)]
        return cls(int(geo["side"]), np.array(pts).reshape(-1, 2))


def read_key_values(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_field(path, z: np.ndarray) -> None:
    """Latent field checkpoint: one CSV row per lattice column index."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in z:
            w.writerow([repr(float(v)) for v in row])


def read_field(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def split_field(side: int, cell: float = 0.5) -> np.ndarray:
    """Field ``z(s) = s_x - side/2`` at cell centres: a vertical split at mid-width."""
    m = int(round(side / cell))
    x = (np.arange(m) + 0.5) * cell
    return np.repeat((x - side / 2.0)[:, None], m, axis=1)


def simulate_lscp(model: LevelSetModel, theta: Sequence[float], side: int,
                  stream: RandomStream, z: np.ndarray | None = None
                  ) -> tuple[CoxDataset, np.ndarray]:
    """Poisson points with intensity ``theta[level(z)]`` on ``[0, side]^2``.

    Without ``z`` the field is the vertical split of :func:`split_field`.
    """
    theta = np.asarray(theta, dtype=float)
    if len(theta) != model.L:
        raise ValueError(f"expected {model.L} intensities")
    if z is None:
        z = split_field(side, model.cell)
    lam = theta[model.levels(z)] * model.cell**2
    counts = stream.generator.poisson(lam)
    m = z.shape[0]
    ix, iy = np.nonzero(counts)
    reps = counts[ix, iy]
    cx, cy = np.repeat(ix, reps), np.repeat(iy, reps)
    k = len(cx)
    u = stream.generator.random((k, 2))
    pts = np.column_stack([(cx + u[:, 0]) * model.cell, (cy + u[:, 1]) * model.cell])
    pts = np.minimum(pts, np.nextafter(float(side), 0.0))
    assert m * model.cell == side
    return CoxDataset(side, pts), z


# -- AGS pieces --------------------------------------------------------------

def aux_rate(theta, nu: float) -> float:
    """Rate ``nu * max(theta) - min(theta)`` of the auxiliary process."""
    theta = np.asarray(theta, dtype=float)
    return nu * float(theta.max()) - float(theta.min())


def ags_estimator(theta, psi_level_counts, area: float, nu: float) -> float:
    """Unbiased estimate of ``exp(-int lambda)`` from auxiliary-process counts.

    ``psi_level_counts[l]`` is the number of points of a rate
    ``nu * max(theta) - min(theta)`` Poisson process falling in level ``l``;
    ``area`` is the window area.
    """
    return math.exp(log_ags_estimator(theta, psi_level_counts, area, nu))


def log_ags_estimator(theta, psi_level_counts, area: float, nu: float) -> float:
    theta = np.asarray(theta, dtype=float)
    hi, lo = float(theta.max()), float(theta.min())
    out = -area * lo
    denom = nu * hi - lo
    for t, k in zip(theta, psi_level_counts):
        if k:
            out += k * math.log((nu * hi - t) / denom)
    return out


@dataclass
class CoxState:
    theta: np.ndarray
    z: np.ndarray
    psi: np.ndarray = None  # auxiliary point counts per cell

    def copy(self) -> "CoxState":
        return CoxState(self.theta.copy(), self.z.copy(),
                        None if self.psi is None else self.psi.copy())


def sample_psi(state: CoxState, model: LevelSetModel, stream: RandomStream) -> None:
    """Draw the auxiliary counts from their full conditional.

    Given ``theta`` and ``z`` the auxiliary process is Poisson with rate
    ``nu * max(theta) - lambda(s)``, so per-cell counts are independent.
    """
    lam = state.theta[model.levels(state.z)]
    rate = (model.nu * state.theta.max() - lam) * model.cell**2
    state.psi = stream.generator.poisson(rate)


def _gmrf_conditional(z: np.ndarray, model: LevelSetModel):
    pad = np.pad(z, 1)
    nb = pad[:-2, 1:-1] + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:]
    deg = np.full(z.shape, 4.0)
    deg[0, :] -= 1
    deg[-1, :] -= 1
    deg[:, 0] -= 1
    deg[:, -1] -= 1
    prec = model.tau * (model.kappa2 + deg)
    mean = nb / (model.kappa2 + deg)
    return mean, prec


def update_z(state: CoxState, counts: np.ndarray, model: LevelSetModel, scale: float,
             stream: RandomStream) -> float:
    """Checkerboard random-walk Metropolis sweep over the latent field.

    The target is the GMRF prior times the augmented likelihood given
    ``psi``: each cell contributes ``N_y log lambda + N_psi log(nu max(theta) - lambda)``.
    Returns the acceptance fraction.
    """
    z = state.z
    m = z.shape[0]
    parity = np.add.outer(np.arange(m), np.arange(m)) % 2
    top = model.nu * state.theta.max()
    log_lam = np.log(state.theta)
    log_aux = np.log(top - state.theta)
    accepted = 0
    g = stream.generator
    for color in (0, 1):
        mask = parity == color
        mean, prec = _gmrf_conditional(z, model)
        zc = z[mask]
        prop = zc + scale * g.standard_normal(zc.shape)
        mu, q = mean[mask], prec[mask]
        dprior = -0.5 * q * ((prop - mu) ** 2 - (zc - mu) ** 2)
        lo, ln = model.levels(zc), model.levels(prop)
        ny, npsi = counts[mask], state.psi[mask]
        dlik = ny * (log_lam[ln] - log_lam[lo]) + npsi * (log_aux[ln] - log_aux[lo])
        acc = np.log(g.random(zc.shape)) < dprior + dlik
        zc[acc] = prop[acc]
        z[mask] = zc
        accepted += int(acc.sum())
    return accepted / z.size


def ags_log_target(theta: np.ndarray, level_counts: np.ndarray, psi_counts: np.ndarray,
                   area: float, model: LevelSetModel) -> float:
    """Log augmented density in ``theta`` (uniform prior) given ``z`` and ``psi``.

    Likelihood of the data with ``exp(-int lambda)`` replaced by its
    estimate, times the density of ``psi`` under its ``theta``-dependent
    rate.  ``level_counts`` and ``psi_counts`` are per-level totals.
    """
    if not model.in_support(theta):
        return -math.inf
    rate = aux_rate(theta, model.nu)
    return float(np.sum(level_counts * np.log(theta))
                 + log_ags_estimator(theta, psi_counts, area, model.nu)
                 - rate * area + np.sum(psi_counts) * math.log(rate))


def update_psi_independence(state: CoxState, model: LevelSetModel,
                            stream: RandomStream) -> float:
    """Sitewise independence Metropolis for the auxiliary counts.

    Each cell's count is proposed afresh from its prior law, Poisson with
    mean ``aux_rate * cell_area``; the acceptance ratio is the ratio of
    estimator factors.  Returns the acceptance fraction.
    """
    theta = state.theta
    rate = aux_rate(theta, model.nu)
    g = stream.generator
    prop = g.poisson(rate * model.cell**2, size=state.psi.shape)
    log_w = np.log((model.nu * theta.max() - theta) / rate)[model.levels(state.z)]
    acc = np.log(g.random(prop.shape)) < (prop - state.psi) * log_w
    state.psi = np.where(acc, prop, state.psi)
    return float(acc.mean())


def _level_totals(values: np.ndarray, levels: np.ndarray, L: int) -> np.ndarray:
    return np.bincount(levels.ravel(), weights=values.ravel(), minlength=L)


def ags_theta_update(state: CoxState, counts: np.ndarray, model: LevelSetModel,
                     scales: Sequence[float], area: float,
                     stream: RandomStream) -> list[StepResult]:
    """Random-walk Metropolis for each ``theta[l]`` given ``z`` and ``psi``."""
    levels = model.levels(state.z)
    ny = _level_totals(counts, levels, model.L)
    npsi = _level_totals(state.psi, levels, model.L)
    results = []
    for l in range(model.L):
        t0 = now_ns()
        cur = ags_log_target(state.theta, ny, npsi, area, model)
        prop = state.theta.copy()
        prop[l] += scales[l] * (2.0 * stream.uniform() - 1.0)
        new = ags_log_target(prop, ny, npsi, area, model)
        ok = new > -math.inf and math.log(1.0 - stream.uniform()) < new - cur
        if ok:
            state.theta = prop
        results.append(StepResult(float(state.theta[l]), float(prop[l]),
                                  "accepted" if ok else "rejected", now_ns() - t0))
    return results


# -- CGS pieces --------------------------------------------------------------

@dataclass
class TileStats:
    """Per-tile summaries for one level ``l``.

    ``mask[i, k]`` says whether cell ``k`` of tile ``i`` lies in ``S_l``;
    ``count`` is the number of data points in ``T_i`` and ``S_l``;
    ``area`` the area of ``T_i`` and ``S_l``; ``centroid`` whether the tile
    centroid lies in ``S_l``.
    """

    mask: np.ndarray
    count: np.ndarray
    area: np.ndarray
    centroid: np.ndarray
    cell_area: float


def tile_stats(z: np.ndarray, counts: np.ndarray, level: int, model: LevelSetModel
               ) -> TileStats:
    k = model.cells_per_tile_side
    m = z.shape[0]
    side = m // k
    inl = model.levels(z) == level
    blocks = inl.reshape(side, k, side, k).transpose(0, 2, 1, 3).reshape(side * side, k * k)
    cnt = (counts * inl).reshape(side, k, side, k).sum(axis=(1, 3)).ravel()
    # the tile centroid is a cell corner for even k; it belongs to the cell
    # whose lower-left corner it is (half-open cells)
    c = k // 2
    centroid = inl[c::k, c::k].ravel()
    cell_area = model.cell**2
    return TileStats(blocks, cnt, blocks.sum(axis=1) * cell_area, centroid, cell_area)


def _indicator_path(mask: np.ndarray, height: float) -> BoundedPath:
    # the tile's cells laid end to end on [0, 1), each of length cell_area
    k = len(mask)
    flags = [bool(b) for b in mask]

    def w(t):
        return height if flags[min(int(t * k), k - 1)] else 0.0

    return BoundedPath(w, 0.0, height, 1.0)


def _tile_coin(mask: np.ndarray, height: float) -> WeightedCoin:
    """Coin of probability ``exp(-height * area(mask))`` (scale 1)."""
    if height <= 0.0 or not mask.any():
        return WeightedCoin.constant(1.0)
    path = _indicator_path(mask, height)
    return WeightedCoin(1.0, lambda s, l: flip_poisson_coin(path, s, l))


def _use_flipped(form: str, centroid: bool) -> bool:
    if form == "centroid":
        return bool(centroid)
    if form in ("direct", "flipped"):
        return form == "flipped"
    raise ValueError(f"unknown form {form!r}")


def cgs_theta_leaf_pair(mask: np.ndarray, count: int, theta: float, vartheta: float,
                        centroid: bool, form: str = "centroid") -> FactorPair:
    """Factor pair for tile ``i``'s odds ``f_i(vartheta) : f_i(theta)`` at one level.

    ``f_i(t) = t**N * exp(-t A)`` with ``N = count`` and ``A`` the area of the
    cells flagged in ``mask`` (each of area ``1 / len(mask)``).  In direct
    form the coins carry ``exp(-max(0, vartheta - theta) A)`` and its mirror;
    in flipped form they represent ``1 / f`` through the complement area
    ``1 - A`` and the pair is marked ``flipped``.
    """
    mask = np.asarray(mask, dtype=bool)
    diff = vartheta - theta
    if not _use_flipped(form, centroid):
        return FactorPair(
            WeightedCoin(vartheta**count, _tile_coin(mask, max(0.0, diff)).flip,
                         certain=diff <= 0 or not mask.any()),
            WeightedCoin(theta**count, _tile_coin(mask, max(0.0, -diff)).flip,
                         certain=diff >= 0 or not mask.any()))
    comp = ~mask
    # 1/f(t) = t**-N e^{t} e^{-t Abar}; the common e^{-min(t, t') Abar} is dropped
    numer = _tile_coin(comp, max(0.0, diff))
    denom = _tile_coin(comp, max(0.0, -diff))
    return FactorPair(
        WeightedCoin(vartheta**-count * math.exp(vartheta), numer.flip, certain=numer.certain),
        WeightedCoin(theta**-count * math.exp(theta), denom.flip, certain=denom.certain),
        flipped=True)


def cgs_leaf_pairs(stats: TileStats, groups: Sequence[np.ndarray], theta: float,
                   vartheta: float, form: str = "centroid") -> list[FactorPair]:
    """Per-leaf products of :func:`cgs_theta_leaf_pair`, computed in bulk.

    Equivalent to multiplying the tile pairs with
    :func:`~dcbf.factories.product_pair`; only tiles whose coin is not
    certain get a flip procedure.
    """
    n = len(stats.count)
    if form == "centroid":
        flipped = stats.centroid
    else:
        flipped = np.full(n, _use_flipped(form, False))
    N = stats.count.astype(float)
    lt, lv = math.log(theta), math.log(vartheta)
    # direct-form scales: heads side first
    log_num = np.where(flipped, -N * lt + theta, N * lv)
    log_den = np.where(flipped, -N * lv + vartheta, N * lt)
    diff = vartheta - theta
    comp_area = 1.0 - stats.area
    # heads-side coin height: direct tiles use A when vartheta > theta,
    # flipped tiles use 1 - A when theta > vartheta
    num_active = np.where(flipped, (diff < 0) & (comp_area > 0), (diff > 0) & (stats.area > 0))
    den_active = np.where(flipped, (diff > 0) & (comp_area > 0), (diff < 0) & (stats.area > 0))
    height = abs(diff)
    out = []
    for g in groups:
        a, b = float(log_num[g].sum()), float(log_den[g].sum())
        top = max(a, b)
        coins = []
        for logc, active in ((a, num_active), (b, den_active)):
            flips = []
            for i in g[active[g]]:
                mask = ~stats.mask[i] if flipped[i] else stats.mask[i]
                path = _indicator_path(mask, height)
                flips.append(lambda s, l, p=path: flip_poisson_coin(p, s, l))
            c = math.exp(logc - top)
            coins.append(WeightedCoin(c, product_flip(flips)) if flips
                         else WeightedCoin.constant(c))
        out.append(FactorPair(coins[0], coins[1]))
    return out


def level_conditional(z: np.ndarray, counts: np.ndarray, model: LevelSetModel
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Point counts ``N_l`` and areas ``A_l`` per level; ``theta[l] | z, y`` is
    a Gamma(N_l + 1, A_l) truncated to the prior range."""
    levels = model.levels(z)
    N = _level_totals(counts, levels, model.L)
    A = np.bincount(levels.ravel(), minlength=model.L) * model.cell**2
    return N, A


# -- driver ------------------------------------------------------------------

@dataclass
class CoxConfig:
    """Sampler settings.

    ``delta`` are CGS proposal half-widths in units of ``1/sqrt(n)``;
    ``ags_scale`` are the AGS random-walk half-widths (absolute).  ``None``
    values are set during adaptation.  ``leaf_escape=None`` calibrates the
    leaf escape probability so that about ``escape_target`` of Barker
    updates escape.  ``psi_update`` picks the AGS auxiliary move: sitewise
    independence Metropolis, or an exact draw from the full conditional.
    ``fix_field`` holds ``z`` at its initial value.
    """

    model: LevelSetModel = field(default_factory=LevelSetModel)
    delta: list | None = None
    ags_scale: list | None = None
    z_scale: float | None = None
    ell: int | None = None
    leaf_escape: float | None = None
    escape_target: float = 0.10
    form: str = "centroid"
    adapt_iters: int = 1000
    parallel_levels: int = 0
    barker_target: float = 0.30
    mh_target: float = 0.44
    psi_update: str = "independence"
    fix_field: bool = False
    max_flips: int = MAX_FLIPS

    def __post_init__(self):
        if self.psi_update not in ("independence", "exact"):
            raise ValueError("psi_update must be 'independence' or 'exact'")
        if self.form not in ("centroid", "direct", "flipped"):
            raise ValueError(f"unknown form {self.form!r}")


def cgs_theta_update(state: CoxState, counts: np.ndarray, config: CoxConfig,
                     tree, portkey: PortkeyConfig, stream: RandomStream,
                     shuffle_stream: RandomStream, ledgers: Sequence[CostLedger]
                     ) -> list[StepResult]:
    """Barker update of each ``theta[l]`` given ``z`` through a DCBF over tiles."""
    model = config.model
    n = tree.n
    results = []
    for l in range(model.L):
        stats = tile_stats(state.z, counts, l, model)

        def leaves(theta, vartheta, groups, stats=stats):
            if not model.prior_lower < vartheta <= model.prior_upper:
                return None
            return cgs_leaf_pairs(stats, groups, theta, vartheta, config.form)

        prop = UniformProposal(config.delta[l] / math.sqrt(n))
        res = barker_step(float(state.theta[l]), leaves, prop, tree, portkey, stream,
                          ledgers[l], shuffle_stream=shuffle_stream,
                          parallel_levels=config.parallel_levels,
                          max_flips=config.max_flips)
        state.theta[l] = res.theta
        results.append(res)
    return results


def cgs_sweep(state: CoxState, dataset: CoxDataset, config: CoxConfig,
              stream: RandomStream, ledgers: Sequence[CostLedger],
              shuffle_stream: RandomStream, tree=None, portkey=None,
              counts=None) -> tuple[list[StepResult], float]:
    """``theta`` by DCBF-Barker with ``psi`` integrated out, then ``psi``, then ``z``."""
    model = config.model
    counts = dataset.cell_counts(model.cell) if counts is None else counts
    if tree is None:
        tree = build_tree(dataset.n, _depth(config, dataset.n))
    if portkey is None:
        esc = config.leaf_escape or 0.0
        portkey = PortkeyConfig.leaf_escape(esc)
    res = cgs_theta_update(state, counts, config, tree, portkey, stream,
                           shuffle_stream, ledgers)
    sample_psi(state, model, stream)
    return res, _field_step(state, counts, config, stream)


def ags_sweep(state: CoxState, dataset: CoxDataset, config: CoxConfig,
              stream: RandomStream, counts=None) -> tuple[list[StepResult], float]:
    """``theta`` by random-walk Metropolis given ``psi``, then ``psi``, then ``z``."""
    model = config.model
    counts = dataset.cell_counts(model.cell) if counts is None else counts
    res = ags_theta_update(state, counts, model, config.ags_scale, float(dataset.n),
                           stream)
    if config.psi_update == "independence":
        update_psi_independence(state, model, stream)
    else:
        sample_psi(state, model, stream)
    return res, _field_step(state, counts, config, stream)


def _field_step(state, counts, config: CoxConfig, stream) -> float:
    if config.fix_field:
        return float("nan")
    return update_z(state, counts, config.model, config.z_scale, stream)


def _depth(config: CoxConfig, n: int) -> int:
    return default_depth(n) if config.ell is None else config.ell


def _robbins_monro(log_scale, accepted, target, it):
    return log_scale + (float(accepted) - target) / math.sqrt(it + 1.0)


def adapt(state: CoxState, dataset: CoxDataset, config: CoxConfig, sampler: str,
          stream: RandomStream, shuffle_stream: RandomStream) -> CoxConfig:
    """Tune proposal scales (and the CGS leaf escape) before recording.

    Returns a copy of ``config`` with every ``None`` setting filled in.
    """
    model = config.model
    n = dataset.n
    counts = dataset.cell_counts(model.cell)
    L = model.L
    N, A = level_conditional(state.z, counts, model)
    post_sd = np.sqrt(N + 1.0) / np.maximum(A, 1e-12)
    cfg = replace(config)
    tune_z = cfg.z_scale is None and not cfg.fix_field
    tune_ags = sampler == "ags" and cfg.ags_scale is None
    tune_cgs = sampler == "cgs" and cfg.delta is None
    log_z = math.log(cfg.z_scale or 0.5)
    log_ags = list(np.log(2.0 * post_sd)) if tune_ags else None
    log_delta = list(np.log(2.0 * post_sd * math.sqrt(n))) if tune_cgs else None
    if cfg.ags_scale is None and sampler == "ags":
        cfg.ags_scale = list(np.exp(log_ags))
    if cfg.delta is None and sampler == "cgs":
        cfg.delta = list(np.exp(log_delta))
    cfg.z_scale = math.exp(log_z)
    tree = build_tree(n, _depth(cfg, n))
    nopk = PortkeyConfig()
    ledgers = [CostLedger() for _ in range(L)]
    for it in range(cfg.adapt_iters):
        if sampler == "cgs":
            res, zacc = cgs_sweep(state, dataset, cfg, stream, ledgers, shuffle_stream,
                                  tree, nopk, counts)
            if tune_cgs:
                for l in range(L):
                    if res[l].outcome != "skipped":
                        log_delta[l] = _robbins_monro(log_delta[l], res[l].accepted,
                                                      cfg.barker_target, it)
                cfg.delta = list(np.exp(log_delta))
        else:
            res, zacc = ags_sweep(state, dataset, cfg, stream, counts)
            if tune_ags:
                for l in range(L):
                    log_ags[l] = _robbins_monro(log_ags[l], res[l].outcome == "accepted",
                                                cfg.mh_target, it)
                cfg.ags_scale = list(np.exp(log_ags))
        if tune_z:
            log_z = log_z + (zacc - cfg.mh_target) / math.sqrt(it + 1.0)
            cfg.z_scale = math.exp(log_z)
    if sampler == "cgs" and cfg.leaf_escape is None:
        cfg.leaf_escape = calibrate_escape(state, counts, cfg, tree, stream, shuffle_stream)
    return cfg


def calibrate_escape(state: CoxState, counts: np.ndarray, config: CoxConfig, tree,
                     stream: RandomStream, shuffle_stream: RandomStream,
                     pilot: int = 200) -> float:
    """Leaf escape probability giving about ``escape_target`` escapes per update.

    A pilot run without escapes measures the mean number of leaf loops per
    update, ``phi``; escaping each loop with probability ``e`` then ends an
    update early with probability about ``1 - (1 - e)**phi``.
    """
    trial = state.copy()
    ledgers = [CostLedger() for _ in range(config.model.L)]
    for _ in range(pilot):
        cgs_theta_update(trial, counts, config, tree, PortkeyConfig(), stream,
                         shuffle_stream, ledgers)
    flips = ledgers[-1].root_flips
    if flips == 0:
        return 0.0
    phi = ledgers[-1].leaf_loops / flips
    return 1.0 - (1.0 - config.escape_target) ** (1.0 / max(phi, 1.0))


def initial_state(dataset: CoxDataset, model: LevelSetModel, theta0, z0, stream) -> CoxState:
    state = CoxState(np.array(theta0, dtype=float), np.array(z0, dtype=float))
    sample_psi(state, model, stream)
    return state


def run_cox_chain(dataset: CoxDataset, config: CoxConfig, sampler: str,
                  iterations: int, seed: int, theta0=None, z0=None,
                  timing: bool = True) -> tuple[ChainTrace, CoxConfig, CoxState]:
    """Adapt, then record ``iterations`` sweeps of the chosen sampler.

    Trace rows carry both intensities, the cost/outcome columns of the
    last level's update and the time of the whole sweep.  ``z0`` defaults to the vertical split field and
    ``theta0`` to ``(1/3, 5/3)``.
    """
    if sampler not in ("cgs", "ags"):
        raise ValueError("sampler must be 'cgs' or 'ags'")
    model = config.model
    root = RandomStream(seed)
    stream, shuffle_stream = root.spawn(), root.spawn()
    theta0 = [1.0 / 3.0, 5.0 / 3.0] if theta0 is None else theta0
    z0 = split_field(dataset.side, model.cell) if z0 is None else z0
    state = initial_state(dataset, model, theta0, z0, stream)
    cfg = adapt(state, dataset, config, sampler, stream, shuffle_stream)
    counts = dataset.cell_counts(model.cell)
    tree = build_tree(dataset.n, _depth(cfg, dataset.n))
    portkey = PortkeyConfig.leaf_escape(cfg.leaf_escape or 0.0)
    names = [f"theta_{l + 1}" for l in range(model.L)]
    trace = ChainTrace(names, n=dataset.n, ell=tree.depth if sampler == "cgs" else 0,
                       timing=timing)
    for it in range(iterations):
        t0 = now_ns()
        if sampler == "cgs":
            ledgers = [CostLedger() for _ in range(model.L)]
            res, _ = cgs_sweep(state, dataset, cfg, stream, ledgers, shuffle_stream,
                               tree, portkey, counts)
            trace.append(it, state.theta, res[-1], ledgers[-1], now_ns() - t0)
        else:
            res, _ = ags_sweep(state, dataset, cfg, stream, counts)
            trace.append(it, state.theta, res[-1], None, now_ns() - t0)
    return trace, cfg, state
