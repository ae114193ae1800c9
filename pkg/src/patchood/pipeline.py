"""Batch commands: fit on ID_TRAIN, score every other subject, evaluate, report.

Scores and reports all live in the run's output directory::

    <out>/<subject>.uncertainty[.<method>].npy   voxel mask
    <out>/<subject>.uncertainty[.<method>].json  {raw_score, normalized_score}
    <out>/scores.<method>.json                   run summary incl. failures
    <out>/report.<method>.json                   DetectionReport + method + config hash
    <out>/scatter.<method>.csv                   per-subject uncertainty vs Dice

The Mahalanobis masks carry no method suffix.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines
from .aggregate import (
    DEFAULT_SIGMA_SCALE,
    SubjectScore,
    build_uncertainty_mask,
    grid_from_origins,
    make_filter,
    normalize_scores,
    read_score_meta,
    subject_score,
    write_mask,
    write_score_meta,
)
from .errors import DimensionMismatch, MissingScores, PatchOODError, ShapeMismatch, TooFewSamples
from .gauss import GaussianModel, fit_gaussian, load_model, mahalanobis, save_model
from .metrics import EvaluationRecord, dice, evaluate, scatter_csv
from .reduce import reduce_to_vector
from .tensorio import DatasetManifest, Split, SubjectEntry, load_manifest, read_tensor

logger = logging.getLogger(__name__)

METHODS = ("mahalanobis", "max_softmax", "temp_scaling", "kl_uniform", "mc_dropout")
SCORED_SPLITS = (Split.ID_VAL, Split.ID_TEST, Split.OOD)


@dataclass(frozen=True)
class RunConfig:
    manifest: Path
    out: Path
    model: Path | None = None
    method: str = "mahalanobis"
    temperature: float = 10.0
    sigma_scale: float = DEFAULT_SIGMA_SCALE
    target_tpr: float = 0.95
    bins: int = 10
    workers: int = 1
    kl_invert: str = "affine"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.kl_invert not in baselines.KL_INVERSIONS:
            raise ValueError(f"kl_invert must be one of {baselines.KL_INVERSIONS}")

    @property
    def tag(self) -> str:
        if self.method == "temp_scaling":
            return f"temp_scaling_T{self.temperature:g}"
        if self.method == "kl_uniform" and self.kl_invert != "affine":
            return f"kl_uniform_{self.kl_invert}"
        return self.method

    @property
    def mask_suffix(self) -> str:
        return "" if self.method == "mahalanobis" else self.tag

    def meta_path(self, subject_id: str) -> Path:
        stem = f"{subject_id}.uncertainty" + (f".{self.mask_suffix}" if self.mask_suffix else "")
        return self.out / f"{stem}.json"


def _map(fn, items, workers: int) -> list:
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# fit


def cmd_fit(cfg: RunConfig, manifest: DatasetManifest | None = None) -> GaussianModel:
    """Pool every ID_TRAIN patch, fit the Gaussian and persist it to ``cfg.model``."""
    if cfg.model is None:
        raise ValueError("fit needs a model path")
    manifest = manifest or load_manifest(cfg.manifest)
    files = [f for s in manifest.by_split(Split.ID_TRAIN) for f in s.feature_files]
    if len(files) < 2:
        raise TooFewSamples(f"manifest has {len(files)} ID_TRAIN patch(es); need at least 2")

    pooling = manifest.pooling
    vectors = _map(lambda f: reduce_to_vector(read_tensor(f), pooling), files, cfg.workers)
    d = vectors[0].size
    for f, v in zip(files, vectors):
        if v.size != d:
            raise DimensionMismatch(f"{f}: pooled dimension {v.size} differs from first training patch ({d})")

    model = fit_gaussian(vectors, pooling)
    save_model(model, cfg.model)
    logger.info("fit: N=%d d=%d epsilon=%.3e -> %s", model.n_samples, model.d, model.epsilon, cfg.model)
    return model


# ---------------------------------------------------------------------------
# score


def _check_spatial(vol: np.ndarray, subject: SubjectEntry, what: str, lead: int) -> None:
    if tuple(vol.shape[lead:]) != tuple(subject.image_shape):
        raise ShapeMismatch(f"{what} spatial shape {vol.shape[lead:]} != image shape {subject.image_shape}")


def mahalanobis_mask(subject: SubjectEntry, model: GaussianModel, patch_size, weights) -> np.ndarray:
    if not subject.feature_files:
        raise ValueError("subject has no feature files")
    vectors = np.stack([reduce_to_vector(read_tensor(f), model.pooling) for f in subject.feature_files])
    scores = mahalanobis(vectors, model)
    grid = grid_from_origins(subject.image_shape, patch_size, subject.patch_origins)
    return build_uncertainty_mask(grid, scores, weights)


def baseline_mask(subject: SubjectEntry, cfg: RunConfig) -> np.ndarray:
    def need(path, what):
        if path is None:
            raise ValueError(f"method {cfg.method} needs {what} in the manifest")
        return path

    if cfg.method in ("max_softmax", "kl_uniform"):
        probs = read_tensor(need(subject.softmax_file, "softmax_file"))
        _check_spatial(probs, subject, "softmax", 1)
        if cfg.method == "max_softmax":
            return baselines.max_softmax_uncertainty(probs)
        return baselines.kl_from_uniform_uncertainty(probs, cfg.kl_invert)
    if cfg.method == "temp_scaling":
        logits = read_tensor(need(subject.logits_file, "logits_file"))
        _check_spatial(logits, subject, "logits", 1)
        return baselines.temp_scaled_uncertainty(logits, cfg.temperature)
    if cfg.method == "mc_dropout":
        samples = [read_tensor(f) for f in need(subject.mc_sample_files, "mc_sample_files")]
        shapes = {s.shape for s in samples}
        if len(shapes) != 1:
            raise ShapeMismatch(f"MC samples differ in shape: {sorted(shapes)}")
        class_axis = samples[0].ndim == len(subject.image_shape) + 1
        _check_spatial(samples[0], subject, "MC sample", 1 if class_axis else 0)
        return baselines.mc_dropout_uncertainty(np.stack(samples), class_axis=class_axis)
    raise ValueError(f"not a baseline method: {cfg.method}")


@dataclass
class ScoreSummary:
    method: str
    scores: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def cmd_score(cfg: RunConfig, manifest: DatasetManifest | None = None) -> ScoreSummary:
    """Write a mask and raw subject score for every non-training subject.

    A subject that fails is logged and skipped; the summary lists it and
    ``ScoreSummary.ok`` turns False.
    """
    manifest = manifest or load_manifest(cfg.manifest)
    cfg.out.mkdir(parents=True, exist_ok=True)
    model = None
    weights = None
    if cfg.method == "mahalanobis":
        if cfg.model is None:
            raise ValueError("mahalanobis scoring needs a model path")
        model = load_model(cfg.model)
        weights = make_filter(manifest.patch_size, cfg.sigma_scale)

    def run(subject: SubjectEntry):
        try:
            if model is not None:
                mask = mahalanobis_mask(subject, model, manifest.patch_size, weights)
            else:
                mask = baseline_mask(subject, cfg)
            score = SubjectScore(subject.id, subject_score(mask))
            write_mask(mask, score, cfg.out, cfg.mask_suffix)
            return subject.id, score.raw, None
        except (PatchOODError, OSError, ValueError) as exc:
            logger.error("score %s failed for subject %s: %s", cfg.tag, subject.id, exc)
            return subject.id, None, f"{type(exc).__name__}: {exc}"

    summary = ScoreSummary(cfg.tag)
    for sid, raw, err in _map(run, manifest.by_split(*SCORED_SPLITS), cfg.workers):
        if err is None:
            summary.scores[sid] = raw
        else:
            summary.failures[sid] = err
    doc = {"method": summary.method, "scores": summary.scores, "failures": summary.failures}
    (cfg.out / f"scores.{cfg.tag}.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if summary.failures:
        logger.warning("score %s: %d subject(s) failed", cfg.tag, len(summary.failures))
    return summary


# ---------------------------------------------------------------------------
# evaluate


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that determines a report's numbers (not paths or worker count)."""
    doc = {
        "method": cfg.tag,
        "sigma_scale": cfg.sigma_scale,
        "target_tpr": cfg.target_tpr,
        "bins": cfg.bins,
        "manifest_sha256": hashlib.sha256(Path(cfg.manifest).read_bytes()).hexdigest(),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def subject_dice(subject: SubjectEntry) -> float | None:
    if subject.prediction_file is None or subject.groundtruth_file is None:
        return None
    return dice(read_tensor(subject.prediction_file) > 0.5, read_tensor(subject.groundtruth_file) > 0.5)


def cmd_evaluate(cfg: RunConfig, manifest: DatasetManifest | None = None) -> dict:
    """Normalize stored scores with the ID_VAL range and write report JSON + scatter CSV.

    Returns the report document that was written.
    """
    manifest = manifest or load_manifest(cfg.manifest)
    subjects = manifest.by_split(*SCORED_SPLITS)
    missing = [s.id for s in subjects if not cfg.meta_path(s.id).is_file()]
    if missing:
        raise MissingScores(missing)

    raw = [read_score_meta(cfg.meta_path(s.id)) for s in subjects]
    val_raw = [r.raw for r, s in zip(raw, subjects) if s.split is Split.ID_VAL]
    if not val_raw:
        raise MissingScores(["<no ID_VAL subjects in manifest>"])
    normalized = normalize_scores(raw, val_raw)
    for s, score in zip(subjects, normalized):
        write_score_meta(cfg.meta_path(s.id), score)

    dices = _map(subject_dice, subjects, cfg.workers)
    records = [
        EvaluationRecord(s.id, s.split, score.normalized, dsc)
        for s, score, dsc in zip(subjects, normalized, dices)
    ]
    val_scores = [r.normalized_uncertainty for r in records if r.split is Split.ID_VAL]
    report = evaluate(records, val_scores, cfg.target_tpr, cfg.bins)

    doc = {
        "method": cfg.tag,
        "config_hash": config_hash(cfg),
        "target_tpr": cfg.target_tpr,
        "bins": cfg.bins,
        "n_val": len(val_scores),
        "n_test": sum(r.split is Split.ID_TEST for r in records),
        "n_ood": sum(r.split is Split.OOD for r in records),
        **report.to_dict(),
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / f"report.{cfg.tag}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (cfg.out / f"scatter.{cfg.tag}.csv").write_text(scatter_csv(records, cfg.tag), encoding="utf-8", newline="\n")
    logger.info(
        "evaluate %s: DE=%.3f FPR=%.3f ESCE=%s", cfg.tag, report.detection_error, report.fpr, doc["esce"]
    )
    return doc


# ---------------------------------------------------------------------------
# report


def _fmt(v, spec=".3f") -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)


def comparison_table(reports) -> str:
    """Side-by-side table of several report documents (one row per method)."""
    header = ("Method", "Det. Error", "FPR", "ESCE", "Dice")
    rows = []
    for r in reports:
        dice_cell = (
            "n/a"
            if r.get("admitted_dice_mean") is None
            else f"{r['admitted_dice_mean']:.3f} ± {_fmt(r.get('admitted_dice_sd'))}"
        )
        rows.append((r["method"], _fmt(r["detection_error"]), _fmt(r["fpr"]), _fmt(r.get("esce")), dice_cell))
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [line(header), "-+-".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def cmd_report(report_paths) -> str:
    reports = [json.loads(Path(p).read_text(encoding="utf-8")) for p in report_paths]
    return comparison_table(reports)


def with_method(cfg: RunConfig, method: str, **kw) -> RunConfig:
    return replace(cfg, method=method, **kw)
