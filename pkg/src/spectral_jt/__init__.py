"""Spectral learning of latent junction trees."""

from .tensor import LabeledTensor, ModeLabel, Variable, identity, invert, multiply
from .structure import GraphicalModelSpec, RootedJunctionTree, build_junction_tree, root_and_normalize, validate
from .model import LatentJTModel, embed_clique, exact_marginal, random_model, sample
from .spectral import (
    EmpiricalMoments,
    ObservableParams,
    ObservedSetPlan,
    PopulationMoments,
    diagnostics,
    infer,
    infer_batch,
    learn,
    plan_observed_sets,
)
from .em import EMConfig, em_train, online_em_train
from .experiments import BenchmarkConfig, gen_structure, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "LabeledTensor",
    "ModeLabel",
    "Variable",
    "identity",
    "invert",
    "multiply",
    "GraphicalModelSpec",
    "RootedJunctionTree",
    "build_junction_tree",
    "root_and_normalize",
    "validate",
    "LatentJTModel",
    "embed_clique",
    "exact_marginal",
    "random_model",
    "sample",
    "EmpiricalMoments",
    "PopulationMoments",
    "infer_batch",
    "EMConfig",
    "em_train",
    "online_em_train",
    "BenchmarkConfig",
    "gen_structure",
    "run_benchmark",
    "ObservableParams",
    "ObservedSetPlan",
    "diagnostics",
    "infer",
    "learn",
    "plan_observed_sets",
]
