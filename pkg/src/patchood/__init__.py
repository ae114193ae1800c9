"""Mahalanobis-distance OOD detection for patch-based segmentation pipelines."""

from .aggregate import (
    PatchGrid,
    SubjectScore,
    build_uncertainty_mask,
    make_filter,
    make_grid,
    normalize_scores,
    subject_score,
)
from .gauss import GaussianModel, euclidean_sq, fit_gaussian, load_model, mahalanobis, save_model
from .metrics import DetectionReport, EvaluationRecord, detection_error, dice, esce, evaluate, tpr_boundary
from .reduce import PoolingConfig, avg_pool_once, reduce_to_vector
from .tensorio import DatasetManifest, Split, SubjectEntry, load_manifest, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "DetectionReport",
    "EvaluationRecord",
    "GaussianModel",
    "PatchGrid",
    "PoolingConfig",
    "Split",
    "SubjectEntry",
    "SubjectScore",
    "avg_pool_once",
    "build_uncertainty_mask",
    "detection_error",
    "dice",
    "esce",
    "euclidean_sq",
    "evaluate",
    "fit_gaussian",
    "load_manifest",
    "load_model",
    "mahalanobis",
    "make_filter",
    "make_grid",
    "normalize_scores",
    "read_tensor",
    "reduce_to_vector",
    "save_model",
    "subject_score",
    "tpr_boundary",
    "write_tensor",
]
