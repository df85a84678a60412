"""Parameter-delta checkpoint arithmetic: extract, apply, fuse and analyze deltas."""

__version__ = "0.1.0"

from .analysis import (
    AnalysisReport,
    ClassificationRules,
    DEFAULT_RULES,
    LayerClass,
    classify_tensor,
    cosine_map,
    histogram,
    norm_map,
)
from .checkpoint import Checkpoint, CompatReport, Kind, TensorMeta, open_checkpoint, read_tensor, validate_homologous, write_checkpoint
from .combine import CombineSpec, CombineTerm, MissingPolicy, OutDTypePolicy, apply_delta, extract_delta, fuse, linear_combine
from .dtypes import DType
from .generate import GenSpec, PlantSpec, generate
from .transfer import FitMode, RegressionResult, ScoreTable, SweepManifest, fit_gamma, hypothetical_scores, plan_sweep

__all__ = [
    "AnalysisReport",
    "Checkpoint",
    "ClassificationRules",
    "CombineSpec",
    "CombineTerm",
    "CompatReport",
    "DEFAULT_RULES",
    "DType",
    "FitMode",
    "GenSpec",
    "Kind",
    "LayerClass",
    "MissingPolicy",
    "OutDTypePolicy",
    "PlantSpec",
    "RegressionResult",
    "ScoreTable",
    "SweepManifest",
    "TensorMeta",
    "apply_delta",
    "classify_tensor",
    "cosine_map",
    "extract_delta",
    "fit_gamma",
    "fuse",
    "generate",
    "histogram",
    "hypothetical_scores",
    "linear_combine",
    "norm_map",
    "open_checkpoint",
    "plan_sweep",
    "read_tensor",
    "validate_homologous",
    "write_checkpoint",
]
