"""Command-line harness for the factory, overhead, diffusion and Cox experiments.

Every experiment writes ``summary.csv`` (columns ``SUMMARY_COLUMNS``) to
``--out``.  Chain experiments also write ``trace.csv``; the others write
``results.csv`` with per-setting estimates next to their reference values.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .cox import (CoxConfig, CoxDataset, LevelSetModel, read_key_values, run_cox_chain,
                  simulate_lscp, write_field)
from .diffusion import (DiffusionConfig, DiffusionDataset, RejectionCapExceeded,
                        regular_times, run_diffusion_chain, simulate_tanh_path)
from .factories import (MAX_FLIPS, DCBF, FactorPair, flip_two_coin, measure_overhead,
                        overhead_stderr, two_coin_law)
from .mcmc import fit_log_slope, vanilla_two_coin_benchmark, write_summary
from .partition import (build_tree, default_depth, predicted_overhead_balanced,
                        predicted_overhead_randomized, shuffle_assignment)
from .poisson_coin import BoundViolation
from .rng import CostLedger, DegenerateInputError, LoopCapExceeded, RandomStream, now_ns

EXPERIMENTS = ("factory-check", "overhead-balanced", "overhead-scaling", "vanilla-blowup",
               "diffusion", "cox")

# (c1, p1, c2, p2) settings for the 2-coin check
FACTORY_GRID = [
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

DATA_STREAM = 1
NAN = float("nan")

# stderr prefix and exit status for aborted runs
ABORT_STATUS = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dcbf-bench",
        description="Run a DCBF experiment and write CSV results.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--n", type=int, help="number of factors / observations / tiles")
    p.add_argument("--ell", type=int, help="tree depth (default floor(log4 n))")
    p.add_argument("--delta", type=float, help="proposal half-width times sqrt(n)")
    p.add_argument("--portkey", type=float,
                   help="leaf continuation probability varpi in (0, 1]; 1 disables escapes")
    p.add_argument("--iters", type=int, help="flips, trials or recorded sweeps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--parallel", type=int, nargs="?", const=1, default=0,
                   help="fork the top PARALLEL tree levels onto threads")
    p.add_argument("--config", help="key=value file; its entries override flags")
    p.add_argument("--sampler", choices=("cgs", "ags"), default="cgs")
    p.add_argument("--timing", choices=("wall", "off"), default="wall",
                   help="'off' writes zero times so output depends only on the seed")
    p.add_argument("--adapt", type=int, default=1000, help="Cox adaptation sweeps")
    p.add_argument("--data", help="dataset CSV to use instead of simulating one")
    p.add_argument("--geometry", help="Cox window key=value file for --data")
    p.add_argument("--max-flips", type=int, default=MAX_FLIPS,
                   help="leaf flips allowed per root flip before aborting")
    p.add_argument("--p", type=float, default=0.9, help="per-factor coin probability")
    p.add_argument("--batch", action="store_true", help="batch empty Poisson coins")
    p.add_argument("--psi-update", choices=("independence", "exact"),
                   default="independence", help="AGS auxiliary-process move")
    return p


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Overwrite parsed flags with the entries of ``--config``."""
    if not args.config:
        return
    actions = {a.dest: a for a in parser._actions}
    for key, raw in read_key_values(args.config).items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config", "experiment"):
            parser.error(f"unknown config key {key!r}")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if raw.lower() not in _BOOL:
                parser.error(f"config key {key!r} needs a boolean")
            value = _BOOL[raw.lower()]
        else:
            try:
                value = act.type(raw) if act.type else raw
            except ValueError:
                parser.error(f"bad value {raw!r} for config key {key!r}")
            if act.choices and value not in act.choices:
                parser.error(f"config key {key!r} must be one of {list(act.choices)}")
        setattr(args, dest, value)


def validate(args, parser) -> None:
    for name in ("n", "iters", "adapt", "max_flips"):
        v = getattr(args, name)
        if v is not None and v <= 0 and not (name == "adapt" and v == 0):
            parser.error(f"--{name.replace('_', '-')} must be positive")
    if args.ell is not None and args.ell < 0:
        parser.error("--ell must be non-negative")
    if args.delta is not None and not args.delta > 0:
        parser.error("--delta must be positive")
    if args.portkey is not None and not 0.0 < args.portkey <= 1.0:
        parser.error("--portkey must lie in (0, 1]")
    if not 0.0 < args.p <= 1.0:
        parser.error("--p must lie in (0, 1]")
    if args.parallel < 0:
        parser.error("--parallel must be non-negative")


def _elapsed(args, t0: int) -> int:
    return now_ns() - t0 if args.timing == "wall" else 0


def _summary(n, ell, omega=NAN, phi=NAN, mean_time=NAN) -> dict:
    return {"n": n, "ell": ell, "omega_hat": omega, "phi_hat": phi, "acf1": NAN,
            "acf4": NAN, "acf16": NAN, "ess": NAN, "mean_time_ns": mean_time}


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in r])


# -- experiments ------------------------------------------------------------------

def run_factory_check(args, out: Path) -> None:
    flips = args.iters or 100_000
    stream = RandomStream(args.seed)
    total = CostLedger()
    rows = []
    t0 = now_ns()
    for c1, p1, c2, p2 in FACTORY_GRID:
        pair = FactorPair.tractable(c1, p1, c2, p2)
        led = CostLedger()
        for _ in range(flips):
            flip_two_coin(pair, 1.0, stream, led, args.max_flips)
        q, _, _, enl = two_coin_law(c1, p1, c2, p2)
        rate = led.heads / flips
        se_q = math.sqrt(q * (1.0 - q) / flips)
        loops = led.leaf_loops / flips
        _, se_l = overhead_stderr(led)
        rows.append([c1, p1, c2, p2, flips, rate, q, _z(rate - q, se_q), loops, enl,
                     _z(loops - enl, se_l)])
        total.merge(led)
    _write_rows(out / "results.csv",
                ["c1", "p1", "c2", "p2", "flips", "heads_rate", "expected_heads",
                 "z_heads", "mean_loops", "expected_loops", "z_loops"], rows)
    n_flips = flips * len(FACTORY_GRID)
    write_summary(out / "summary.csv",
                  [_summary(1, 0, 1.0, total.leaf_loops / n_flips,
                            _elapsed(args, t0) / n_flips)])


def _z(diff: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


def run_overhead_balanced(args, out: Path) -> None:
    ell = 2 if args.ell is None else args.ell
    flips = args.iters or 100_000
    tree = build_tree(1 << ell, ell)
    leaves = [FactorPair.from_odds(1.0, 1.0) for _ in range(1 << ell)]
    dc = DCBF(tree, leaves, max_flips=args.max_flips)
    stream, led = RandomStream(args.seed), CostLedger()
    t0 = now_ns()
    for _ in range(flips):
        dc.flip(stream, led)
    elapsed = _elapsed(args, t0)
    omega, phi = measure_overhead(led)
    se, _ = overhead_stderr(led)
    _write_rows(out / "results.csv", ["ell", "flips", "omega_hat", "omega_se", "predicted"],
                [[ell, flips, omega, se, predicted_overhead_balanced(ell)]])
    write_summary(out / "summary.csv", [_summary(tree.n, ell, omega, phi, elapsed / flips)])


def scaling_factors(n: int, stream: RandomStream) -> np.ndarray:
    """Per-factor odds ``R_i`` with ``log R_i ~ N(0, 1/n)``, so ``log prod R ~ N(0, 1)``."""
    return np.exp(stream.generator.standard_normal(n) / math.sqrt(n))


def run_overhead_scaling(args, out: Path) -> None:
    n_max = args.n or 256
    flips = args.iters or 20_000
    root = RandomStream(args.seed)
    rows, summaries = [], []
    n = 4
    while n <= n_max:
        ell = default_depth(n) if args.ell is None else args.ell
        if (1 << ell) > n or n % (1 << ell):
            n *= 4
            continue
        R = scaling_factors(n, root.spawn())
        stream, shuffle = root.spawn(), root.spawn()
        base = build_tree(n, ell)
        led = CostLedger()
        t0 = now_ns()
        for _ in range(flips):
            tree = shuffle_assignment(base, shuffle)
            leaves = [FactorPair.from_odds(float(np.prod(R[g])), 1.0) for g in tree.leaves()]
            DCBF(tree, leaves, max_flips=args.max_flips).flip(stream, led)
        elapsed = _elapsed(args, t0)
        omega, phi = measure_overhead(led)
        se, _ = overhead_stderr(led)
        pred = predicted_overhead_randomized(np.ones(n), R, ell)
        rows.append([n, ell, flips, omega, se, pred, predicted_overhead_balanced(ell)])
        summaries.append(_summary(n, ell, omega, phi, elapsed / flips))
        n *= 4
    _write_rows(out / "results.csv", ["n", "ell", "flips", "omega_hat", "omega_se",
                                      "predicted_randomized", "balanced"], rows)
    write_summary(out / "summary.csv", summaries)


def run_vanilla_blowup(args, out: Path) -> None:
    n_max = args.n or 30
    trials = args.iters or 20_000
    ns = list(range(5, n_max + 1, 5)) or [n_max]
    root = RandomStream(args.seed)
    rows, summaries = [], []
    for n in ns:
        t0 = now_ns()
        enl, se = vanilla_two_coin_benchmark(n, args.p, root.spawn(), trials)
        rows.append([n, trials, enl, se, args.p ** -n])
        summaries.append(_summary(n, 0, 1.0, enl, _elapsed(args, t0) / trials))
    _write_rows(out / "results.csv", ["n", "trials", "enl", "enl_se", "expected"], rows)
    write_summary(out / "summary.csv", summaries)
    if len(ns) > 1:
        slope = fit_log_slope(ns, [r[2] for r in rows])
        print(f"log-ENL slope {slope:.6f} (reference {-math.log(args.p):.6f})")


def run_diffusion(args, out: Path) -> None:
    if args.data:
        data = DiffusionDataset.from_csv(args.data)
    else:
        n = args.n or 16
        data = simulate_tanh_path(0.0, regular_times(n), RandomStream(args.seed, DATA_STREAM))
    data.to_csv(out / "data.csv")
    leaf_escape = None if args.portkey is None else 1.0 - args.portkey
    cfg = DiffusionConfig(delta=8.0 if args.delta is None else args.delta, ell=args.ell,
                          leaf_escape=leaf_escape, batch=args.batch,
                          parallel_levels=args.parallel, max_flips=args.max_flips)
    trace = run_diffusion_chain(data, cfg, args.iters or 10_000, args.seed,
                                timing=args.timing == "wall")
    trace.to_csv(out / "trace.csv")
    write_summary(out / "summary.csv", [trace.summary()])


def run_cox(args, out: Path) -> None:
    model = LevelSetModel()
    if args.data:
        if not args.geometry:
            raise SystemExit("dcbf-bench: error: --data for cox needs --geometry")
        data = CoxDataset.from_files(args.data, args.geometry)
    else:
        n = args.n or 256
        side = math.isqrt(n)
        if side * side != n:
            raise SystemExit("dcbf-bench: error: cox needs --n to be a perfect square")
        data, _ = simulate_lscp(model, [1.0 / 3.0, 5.0 / 3.0], side,
                                RandomStream(args.seed, DATA_STREAM))
    data.to_files(out / "points.csv", out / "geometry.txt")
    delta = None if args.delta is None else [args.delta] * model.L
    leaf_escape = None if args.portkey is None else 1.0 - args.portkey
    cfg = CoxConfig(model=model, delta=delta, ell=args.ell, leaf_escape=leaf_escape,
                    adapt_iters=args.adapt, parallel_levels=args.parallel,
                    psi_update=args.psi_update, max_flips=args.max_flips)
    trace, tuned, state = run_cox_chain(data, cfg, args.sampler, args.iters or 10_000,
                                        args.seed, timing=args.timing == "wall")
    trace.to_csv(out / "trace.csv")
    write_field(out / "field.csv", state.z)
    write_summary(out / "summary.csv", [trace.summary()])
    _write_rows(out / "tuning.csv", ["key", "value"], _tuning_rows(tuned))


def _tuning_rows(cfg: CoxConfig):
    rows = [["z_scale", cfg.z_scale], ["leaf_escape", cfg.leaf_escape or 0.0]]
    for name in ("delta", "ags_scale"):
        for l, v in enumerate(getattr(cfg, name) or []):
            rows.append([f"{name}_{l + 1}", float(v)])
    return rows


RUNNERS = {
    "factory-check": run_factory_check,
    "overhead-balanced": run_overhead_balanced,
    "overhead-scaling": run_overhead_scaling,
    "vanilla-blowup": run_vanilla_blowup,
    "diffusion": run_diffusion,
    "cox": run_cox,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    apply_config(args, parser)
    validate(args, parser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        RUNNERS[args.experiment](args, out)
    except (BoundViolation, LoopCapExceeded, RejectionCapExceeded,
            DegenerateInputError) as exc:
        print(f"dcbf-bench: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ABORT_STATUS
    return 0


if __name__ == "__main__":
    sys.exit(main())
