"""Evolutionary architecture search over topology, per-layer pruning rates,
and training hyperparameters, with adaptive pruning (BN recalibration),
parent-to-child weight inheritance, and an online accuracy predictor."""

from .config import RunConfig, load_config, parse_config, render_config
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .evolve import Candidate, EvolveConfig, SearchContext
from .genome import (EncodedGenome, Genome, SearchSpaceConfig, crossover,
                     decode, encode, mutate, random_genome)
from .network import NetworkSpec, build, check_constraint, render_spec
from .predictor import PredictorConfig, PredictorModel, crossval_ktau, \
    filter_children, fit, kendall_tau, predict
from .pruner import PrunedCandidate, propose_and_select, recalibrate_bn, \
    slice_weights
from .search import run_random_baseline, run_search, report

__all__ = [
    "Candidate", "Dataset", "EncodedGenome", "EvolveConfig", "Genome",
    "NetworkSpec", "PredictorConfig", "PredictorModel", "PrunedCandidate",
    "RunConfig", "SearchContext", "SearchSpaceConfig", "build",
    "check_constraint", "crossover", "crossval_ktau", "decode", "encode",
    "filter_children", "fit", "generate_synthetic", "kendall_tau",
    "load_config", "load_dataset", "mutate", "parse_config", "predict",
    "propose_and_select", "random_genome", "recalibrate_bn", "render_config",
    "render_spec", "report", "run_random_baseline", "run_search",
    "save_dataset", "slice_weights",
]

__version__ = "0.1.0"
