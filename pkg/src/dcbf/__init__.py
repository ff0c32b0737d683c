"""Divide-and-conquer Bernoulli factories for exact Barker MCMC."""

from .factories import (DCBF, FactorPair, PortkeyConfig, flip_dcbf, flip_merge,
                        flip_two_coin, flip_two_coin_flipped, measure_overhead)
from .partition import (PartitionTree, build_tree, default_depth,
                        predicted_overhead_randomized, shuffle_assignment)
from .poisson_coin import BoundedPath, BoundViolation, flip_poisson_coin
from .rng import (CostLedger, DegenerateInputError, FlipOutcome, LoopCapExceeded,
                  RandomStream, WeightedCoin, split_stream)
from .mcmc import ChainTrace, UniformProposal, acf, barker_step, ess
from .diffusion import (DiffusionConfig, DiffusionDataset, euler_da_sampler,
                        regular_times, run_diffusion_chain, simulate_tanh_path)
from .cox import CoxConfig, CoxDataset, LevelSetModel, run_cox_chain, simulate_lscp

__version__ = "0.1.0"

__all__ = [
    "DCBF", "FactorPair", "PortkeyConfig", "flip_dcbf", "flip_merge", "flip_two_coin",
    "flip_two_coin_flipped", "measure_overhead", "PartitionTree", "build_tree",
    "default_depth", "predicted_overhead_randomized", "shuffle_assignment",
    "BoundedPath", "BoundViolation", "flip_poisson_coin", "CostLedger",
    "DegenerateInputError", "FlipOutcome", "LoopCapExceeded", "RandomStream",
    "WeightedCoin", "split_stream", "ChainTrace", "UniformProposal", "acf", "barker_step",
    "ess", "DiffusionConfig", "DiffusionDataset", "euler_da_sampler", "regular_times",
    "run_diffusion_chain", "simulate_tanh_path", "CoxConfig", "CoxDataset",
    "LevelSetModel", "run_cox_chain", "simulate_lscp",
]
