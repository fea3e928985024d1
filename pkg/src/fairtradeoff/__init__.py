"""Fairness-accuracy trade-offs on a quantized joint distribution."""

from .dataset import FeatureSchema, SampleTable, fit_normalization, load_samples, mixed_distance
from .decorrelate import (
    DecorrelationConfig,
    TransferReport,
    project_simplex,
    solve_decorrelation_aware,
    solve_decorrelation_unaware,
)
from .fairlp import FairnessBudget, fair_solution, pareto_sweep
from .quantizer import DiscreteJoint, build_joint, pac_max_cells, pac_sample_bound, train_codebook, views

__version__ = "0.1.0"

__all__ = [
    "DecorrelationConfig",
    "DiscreteJoint",
    "FairnessBudget",
    "FeatureSchema",
    "SampleTable",
    "TransferReport",
    "build_joint",
    "fair_solution",
    "fit_normalization",
    "load_samples",
    "mixed_distance",
    "pac_max_cells",
    "pac_sample_bound",
    "pareto_sweep",
    "project_simplex",
    "solve_decorrelation_aware",
    "solve_decorrelation_unaware",
    "train_codebook",
    "views",
]
