"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion k: PASS|FAIL`` line with the measured
quantities, then asserts.  Run the lot with ``pytest tests/test_acceptance.py -v``;
the slow diffusion and Cox runs carry the ``slow`` marker.
"""

import filecmp
import math
import time

import numpy as np
import pytest

from dcbf import cli
from dcbf.cox import CoxConfig, LevelSetModel, run_cox_chain, simulate_lscp
from dcbf.diffusion import (DiffusionConfig, euler_da_sampler, regular_times,
                            run_diffusion_chain, simulate_tanh_path)
from dcbf.factories import (DCBF, FactorPair, PortkeyConfig, flip_two_coin,
                            measure_overhead, overhead_stderr, product_pair, two_coin_law)
from dcbf.mcmc import acf, ess, fit_log_slope, vanilla_two_coin_benchmark
from dcbf.partition import (build_tree, predicted_overhead_balanced,
                            predicted_overhead_exhaustive, shuffle_assignment)
from dcbf.poisson_coin import BoundedPath, flip_poisson_coin
from dcbf.rng import CostLedger, RandomStream

from oracles import exhaustive_overhead, merge_oracle, three_sigma, two_coin_oracle


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return emit


def _within(x, want, se, k=3.0):
    return abs(x - want) <= k * se


def test_criterion_01_two_coin_exactness(report):
    flips = 100_000
    stream = RandomStream(101)
    bad = []
    t0 = time.perf_counter()
    for c1, p1, c2, p2 in cli.FACTORY_GRID:
        pair = FactorPair.tractable(c1, p1, c2, p2)
        led = CostLedger()
        for _ in range(flips):
            flip_two_coin(pair, 1.0, stream, led)
        q, _, _, enl = two_coin_law(c1, p1, c2, p2)
        rate = led.heads / flips
        loops = led.leaf_loops / flips
        _, se_loops = overhead_stderr(led)
        if not _within(rate, q, math.sqrt(q * (1 - q) / flips)):
            bad.append(f"heads {rate:.4f} vs {q:.4f} at {(c1, p1, c2, p2)}")
        if not _within(loops, enl, se_loops):
            bad.append(f"loops {loops:.4f} vs {enl:.4f} at {(c1, p1, c2, p2)}")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10.0
    report(1, ok, f"{len(cli.FACTORY_GRID)} settings x {flips} flips, "
                  f"{len(bad)} misses {bad}, {elapsed:.1f}s (< 10s)")


def test_criterion_02_dcbf_matches_barker_probability(report):
    rng = np.random.default_rng(102)
    flips = 50_000
    lines, ok = [], True
    t0 = time.perf_counter()
    for n, ell in ((2, 1), (4, 1), (4, 2), (8, 2), (8, 3)):
        c = rng.uniform(0.2, 2.0, size=(n, 2))
        p = rng.uniform(0.2, 1.0, size=(n, 2))
        factors = [FactorPair.tractable(c[i, 0], p[i, 0], c[i, 1], p[i, 1]) for i in range(n)]
        tree = build_tree(n, ell)
        leaves = [product_pair([factors[i] for i in g]) for g in tree.leaves()]
        h_v, h_t = np.prod(c[:, 0] * p[:, 0]), np.prod(c[:, 1] * p[:, 1])
        want = h_v / (h_v + h_t)
        dc, s, led = DCBF(tree, leaves), RandomStream(102, n * 10 + ell), CostLedger()
        for _ in range(flips):
            dc.flip(s, led)
        rate = led.heads / flips
        hit = abs(rate - want) <= three_sigma(want, flips)
        ok &= hit
        lines.append(f"n={n},l={ell}: {rate:.4f} vs {want:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30.0
    report(2, ok, "; ".join(lines) + f"; {elapsed:.1f}s (< 30s)")


def test_criterion_03_balanced_overhead(report):
    flips = 100_000
    lines, ok = [], True
    t0 = time.perf_counter()
    for ell in (1, 2, 3):
        n = 1 << ell
        dc = DCBF(build_tree(n, ell), [FactorPair.from_odds(1.0, 1.0)] * n)
        s, led = RandomStream(103, ell), CostLedger()
        for _ in range(flips):
            dc.flip(s, led)
        omega, _ = measure_overhead(led)
        want = predicted_overhead_balanced(ell)
        ok &= abs(omega / want - 1.0) <= 0.03
        lines.append(f"l={ell}: {omega:.3f} vs {want:.0f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60.0
    report(3, ok, "; ".join(lines) + f"; {elapsed:.1f}s (< 60s)")


def test_criterion_04_randomized_overhead(report):
    f_theta = np.ones(4)
    f_vartheta = np.array([0.25, 3.0, 0.8, 6.0])
    want = predicted_overhead_exhaustive(f_theta, f_vartheta, 1)
    brute = exhaustive_overhead(f_vartheta / f_theta, 1)
    base = build_tree(4, 1)
    s, sh, led = RandomStream(104), RandomStream(105), CostLedger()
    flips = 100_000
    t0 = time.perf_counter()
    for _ in range(flips):
        tree = shuffle_assignment(base, sh)
        leaves = [FactorPair.from_odds(float(np.prod(f_vartheta[g])), 1.0)
                  for g in tree.leaves()]
        DCBF(tree, leaves).flip(s, led)
    elapsed = time.perf_counter() - t0
    omega, _ = measure_overhead(led)
    se, _ = overhead_stderr(led)
    ok = _within(omega, want, se) and abs(want - brute) < 1e-9 and elapsed < 60.0
    report(4, ok, f"omega {omega:.4f} +- {se:.4f} vs {want:.4f} "
                  f"(tree walk {brute:.4f}), {elapsed:.1f}s (< 60s)")


def test_criterion_05_portkey_event_law(report):
    varpi = 0.8
    coins = [(1.0, 0.6, 0.5, 0.9), (2.0, 0.3, 1.0, 0.7)]
    tree = build_tree(2, 1)
    leaves = [FactorPair.tractable(*c) for c in coins]
    triples = [two_coin_oracle(*c, varpi=varpi)[:3] for c in coins]
    want = merge_oracle(triples[0], triples[1])[:3]
    dc, s, led = DCBF(tree, leaves, PortkeyConfig(leaf=varpi)), RandomStream(106), CostLedger()
    flips = 100_000
    t0 = time.perf_counter()
    for _ in range(flips):
        dc.flip(s, led)
    elapsed = time.perf_counter() - t0
    got = (led.heads / flips, led.tails / flips, led.escapes / flips)
    ok = all(abs(g - w) <= three_sigma(w, flips) for g, w in zip(got, want))
    ok &= elapsed < 30.0
    report(5, ok, f"(H, T, E) = ({got[0]:.4f}, {got[1]:.4f}, {got[2]:.4f}) vs "
                  f"({want[0]:.4f}, {want[1]:.4f}, {want[2]:.4f}), {elapsed:.1f}s (< 30s)")


def test_criterion_06_poisson_coin(report):
    path = BoundedPath.constant(1.0, 0.0, 1.0, horizon=1.0)
    s, led = RandomStream(107), CostLedger()
    flips = 100_000
    t0 = time.perf_counter()
    heads = sum(flip_poisson_coin(path, s, led) for _ in range(flips)) / flips
    elapsed = time.perf_counter() - t0
    evals = led.path_evals / flips
    q = math.exp(-1.0)
    ok = abs(heads - q) <= three_sigma(q, flips) and abs(evals - 1.0) <= 0.05
    ok &= elapsed < 10.0
    report(6, ok, f"heads {heads:.4f} vs {q:.4f}, evaluations/flip {evals:.4f}, "
                  f"{elapsed:.1f}s (< 10s)")


def test_criterion_07_vanilla_blowup(report):
    ns = list(range(5, 31, 5))
    root = RandomStream(108)
    t0 = time.perf_counter()
    enl = [vanilla_two_coin_benchmark(n, 0.9, root.spawn(), 20_000)[0] for n in ns]
    elapsed = time.perf_counter() - t0
    slope = fit_log_slope(ns, enl)
    want = -math.log(0.9)
    ok = abs(slope / want - 1.0) <= 0.10 and elapsed < 120.0
    report(7, ok, f"log-ENL slope {slope:.5f} vs {want:.5f}, {elapsed:.1f}s (< 120s)")


def _diffusion_data(n, seed=0):
    return simulate_tanh_path(0.0, regular_times(n), RandomStream(seed, cli.DATA_STREAM))


@pytest.mark.slow
def test_criterion_08a_diffusion_exactness(report):
    data = _diffusion_data(16)
    t0 = time.perf_counter()
    tr = run_diffusion_chain(data, DiffusionConfig(), 10_000, seed=7)
    x = tr.column("theta_1")
    ref = euler_da_sampler(data, 10_000, np.random.default_rng(108))[1000:]
    elapsed = time.perf_counter() - t0
    m, sd, rm, rsd = x.mean(), x.std(), ref.mean(), ref.std()
    ok = (abs(m) <= 3 * sd and abs(m - rm) <= 0.10 * abs(rm)
          and abs(sd - rsd) <= 0.10 * rsd and elapsed < 900.0)
    report("8a", ok, f"mean {m:.4f} sd {sd:.4f}; Euler oracle mean {rm:.4f} sd {rsd:.4f}; "
                     f"{elapsed:.0f}s (< 900s)")


@pytest.mark.slow
def test_criterion_08b_diffusion_scaling_proxy(report):
    ns = [16, 64, 256]
    sweeps = 10_000
    omega, cost = {}, {}
    t0 = time.perf_counter()
    for n in ns:
        tr = run_diffusion_chain(_diffusion_data(n), DiffusionConfig(), sweeps, seed=8)
        summ = tr.summary()
        omega[n] = summ["omega_hat"]
        cost[n] = sum(tr.time_ns) / ess(tr.column("theta_1"))
    elapsed = time.perf_counter() - t0
    ratio = omega[64] / omega[16]
    slope = fit_log_slope(np.log(ns), np.array([cost[n] for n in ns]))
    ok = 2.5 <= ratio <= 6.0 and slope <= 1.6 and elapsed < 4 * 3600
    detail = ", ".join(f"n={n}: omega {omega[n]:.2f}, ms/ESS {cost[n] / 1e6:.2f}" for n in ns)
    report("8b", ok, f"omega(64)/omega(16) {ratio:.2f} in [2.5, 6]; "
                     f"log time-per-ESS slope {slope:.3f} (<= 1.6); {detail}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_09_cox(report):
    model = LevelSetModel()
    sweeps = 10_000
    acf1 = {}
    t0 = time.perf_counter()
    lines, ok = [], True
    for side in (16, 32):
        data, _ = simulate_lscp(model, [1 / 3, 5 / 3], side, RandomStream(0, cli.DATA_STREAM))
        for sampler in ("cgs", "ags"):
            tr, _, _ = run_cox_chain(data, CoxConfig(), sampler, sweeps, seed=9)
            th = [tr.column("theta_1"), tr.column("theta_2")]
            acf1[side, sampler] = acf(th[1], 1)
            if side == 16 and sampler == "cgs":
                for x, truth in zip(th, (1 / 3, 5 / 3)):
                    hit = abs(x.mean() - truth) <= 3 * x.std()
                    ok &= hit
                    lines.append(f"CGS mean {x.mean():.3f} (sd {x.std():.3f}) vs {truth:.3f}")
    elapsed = time.perf_counter() - t0
    gap = {s: acf1[s, "ags"] - acf1[s, "cgs"] for s in (16, 32)}
    ok &= gap[16] >= 0.0
    ok &= gap[32] > gap[16]
    ok &= elapsed < 2 * 3600
    acfs = ", ".join(f"{s * s} {k}: {v:.3f}" for (s, k), v in acf1.items())
    report(9, ok, "; ".join(lines) + f"; lag-1 ACF theta_2 {acfs}; "
                  f"AGS-CGS gap {gap[16]:.3f} at 256, {gap[32]:.3f} at 1024; {elapsed:.0f}s")


CLI_RUNS = [
    ["factory-check", "--iters", "2000"],
    ["overhead-balanced", "--ell", "2", "--iters", "5000"],
    ["overhead-scaling", "--n", "64", "--iters", "500"],
    ["vanilla-blowup", "--n", "15", "--iters", "2000"],
    ["diffusion", "--n", "16", "--iters", "10000", "--seed", "7"],
    ["cox", "--n", "16", "--iters", "300", "--adapt", "100", "--sampler", "cgs"],
    ["cox", "--n", "16", "--iters", "300", "--adapt", "100", "--sampler", "ags"],
]


def test_criterion_10_determinism(report, tmp_path, capsys):
    diffs = []
    files = 0
    for i, argv in enumerate(CLI_RUNS):
        dirs = []
        for rep in range(2):
            out = tmp_path / f"{i}_{rep}"
            assert cli.main(argv + ["--timing", "off", "--out", str(out)]) == 0
            dirs.append(out)
        names = sorted(p.name for p in dirs[0].iterdir())
        files += len(names)
        match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
        if mismatch or errors:
            diffs.append(f"{argv[0]}: {mismatch + errors}")
    capsys.readouterr()
    report(10, not diffs, f"{len(CLI_RUNS)} runs, {files} files compared, "
                          f"differences: {diffs or 'none'}")
