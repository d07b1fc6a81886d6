"""Iterative proportional scaling via decomposable submodels."""

from .cycle_junction import CycleSpec, edge_marginals, fit_cycle_tree
from .engines import (
    AlreadyFittedError,
    FitConfig,
    FitReport,
    SupportError,
    evaluate_g,
    find_alpha0,
    fit_conventional,
    fit_submodel_ips,
    ips_step,
    submodel_step,
)
from .models import (
    GeneratingClass,
    PerfectSequence,
    SpanningFamily,
    cycle_model,
    find_perfect_sequence,
    greedy_spanning,
    max_entropy_extension,
    validate_spanning,
)
from .tables import DenseTable, Schema, from_counts, kl_divergence, marginalize, normalize

__version__ = "0.1.0"

__all__ = [
    "AlreadyFittedError",
    "CycleSpec",
    "DenseTable",
    "FitConfig",
    "FitReport",
    "GeneratingClass",
    "PerfectSequence",
    "Schema",
    "SpanningFamily",
    "SupportError",
    "cycle_model",
    "edge_marginals",
    "evaluate_g",
    "find_alpha0",
    "find_perfect_sequence",
    "fit_conventional",
    "fit_cycle_tree",
    "fit_submodel_ips",
    "from_counts",
    "greedy_spanning",
    "ips_step",
    "kl_divergence",
    "marginalize",
    "max_entropy_extension",
    "normalize",
    "submodel_step",
    "validate_spanning",
]
