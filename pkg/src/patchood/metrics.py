"""OOD-detection and calibration metrics: 95%-TPR boundary, FPR, detection error, ESCE, Dice."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyInput, MissingDice, ShapeMismatch
from .tensorio import Split

SCATTER_HEADER = ("subject_id", "split", "method", "normalized_uncertainty", "dice")


@dataclass(frozen=True)
class EvaluationRecord:
    subject_id: str
    split: Split
    normalized_uncertainty: float
    dice: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        if self.split is Split.ID_TRAIN:
            raise ValueError(f"{self.subject_id}: training subjects are not evaluated")
        if not math.isfinite(self.normalized_uncertainty):
            raise ValueError(f"{self.subject_id}: uncertainty is not finite")
        if self.dice is not None and not math.isfinite(self.dice):
            raise ValueError(f"{self.subject_id}: dice is not finite")


@dataclass(frozen=True)
class DetectionReport:
    boundary: float
    tpr_val: float
    tpr_test: float
    fpr: float
    detection_error: float
    esce: float
    admitted_dice_mean: float
    admitted_dice_sd: float

    def to_dict(self) -> dict:
        # NaN marks "not computable" (e.g. no ground truth); JSON has no NaN
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def tpr_boundary(id_val_scores, target_tpr: float = 0.95) -> float:
    """Smallest observed score tau with ``mean(scores <= tau) >= target_tpr`` (nearest rank)."""
    s = np.sort(np.asarray(id_val_scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise EmptyInput("no ID validation scores")
    if not 0 < target_tpr <= 1:
        raise ValueError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    frac = np.searchsorted(s, s, side="right") / s.size
    return float(s[np.argmax(frac >= target_tpr)])


def admitted_fraction(scores, boundary: float) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyInput("no scores")
    return float(np.count_nonzero(s <= boundary) / s.size)


def fpr_at_boundary(ood_scores, boundary: float) -> float:
    """Fraction of OOD samples admitted as ID (score <= boundary)."""
    return admitted_fraction(ood_scores, boundary)


def detection_error(tpr: float, fpr: float) -> float:
    return 0.5 * (1.0 - tpr) + 0.5 * fpr


def dice(pred, gt) -> float:
    """Dice overlap of two binary masks; two empty masks score 1."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def esce(records, n_bins: int = 10) -> float:
    """Expected segmentation calibration error over equal-width uncertainty bins.

    Sums ``|B_m| / N * |mean Dice(B_m) - (1 - mean U(B_m))|`` over bins
    ``[m/M, (m+1)/M)``, the last bin closed.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    records = list(records)
    if not records:
        raise EmptyInput("no records")
    missing = [r.subject_id for r in records if r.dice is None]
    if missing:
        raise MissingDice("records without Dice: " + ", ".join(missing))
    u = np.clip([r.normalized_uncertainty for r in records], 0.0, 1.0)
    dsc = np.array([r.dice for r in records], dtype=np.float64)
    bins = np.minimum((u * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for m in range(n_bins):
        sel = bins == m
        if sel.any():
            total += sel.sum() / len(records) * abs(dsc[sel].mean() - (1.0 - u[sel].mean()))
    return float(total)


def evaluate(records, id_val_scores, target_tpr: float = 0.95, n_bins: int = 10) -> DetectionReport:
    """Full detection report for one method.

    ``records`` carry normalized uncertainties for ID_TEST and OOD subjects
    (ID_VAL records are ignored here); ``id_val_scores`` are the normalized
    ID validation scores that fix the boundary. Detection metrics, ESCE and
    the admitted-Dice summary all run over ID_TEST and OOD together.
    """
    records = list(records)
    test = [r for r in records if r.split is Split.ID_TEST]
    ood = [r for r in records if r.split is Split.OOD]
    if not test or not ood:
        raise EmptyInput(f"need ID_TEST and OOD records, got {len(test)} and {len(ood)}")

    boundary = tpr_boundary(id_val_scores, target_tpr)
    tpr_val = admitted_fraction(id_val_scores, boundary)
    tpr_test = admitted_fraction([r.normalized_uncertainty for r in test], boundary)
    fpr = fpr_at_boundary([r.normalized_uncertainty for r in ood], boundary)

    pool = test + ood
    with_dice = [r for r in pool if r.dice is not None]
    if len(with_dice) == len(pool):
        calib = esce(pool, n_bins)
    elif not with_dice:
        calib = math.nan
    else:
        raise MissingDice(
            "records without Dice: " + ", ".join(r.subject_id for r in pool if r.dice is None)
        )
    admitted = np.array([r.dice for r in with_dice if r.normalized_uncertainty <= boundary], dtype=np.float64)
    dice_mean = float(admitted.mean()) if admitted.size else math.nan
    dice_sd = float(admitted.std()) if admitted.size else math.nan

    return DetectionReport(
        boundary=boundary,
        tpr_val=tpr_val,
        tpr_test=tpr_test,
        fpr=fpr,
        detection_error=detection_error(tpr_test, fpr),
        esce=calib,
        admitted_dice_mean=dice_mean,
        admitted_dice_sd=dice_sd,
    )


def scatter_csv(records, method: str) -> str:
    """Per-subject (uncertainty, Dice) rows; empty Dice field when there is no ground truth."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCATTER_HEADER)
    for r in records:
        writer.writerow(
            [r.subject_id, r.split.value, method, repr(float(r.normalized_uncertainty)), "" if r.dice is None else repr(float(r.dice))]
        )
    return buf.getvalue()
