"""Sliding-window aggregation of per-patch scores into voxel masks and subject scores.

Grids, filters and masks work for any number of spatial axes; the pipeline
uses three.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateRange, LengthMismatch, NonFiniteInput, PatchLargerThanImage, UncoveredVoxel
from .tensorio import write_tensor

WEIGHT_FLOOR = 1e-6
DEFAULT_SIGMA_SCALE = 1.0 / 8


@dataclass(frozen=True)
class PatchGrid:
    image_shape: tuple[int, ...]
    patch_size: tuple[int, ...]
    step: tuple[int, ...]
    origins: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for o in self.origins:
            if len(o) != len(self.image_shape) or any(
                a < 0 or a + p > s for a, p, s in zip(o, self.patch_size, self.image_shape)
            ):
                raise PatchLargerThanImage(
                    f"patch at {o} of size {self.patch_size} leaves image {self.image_shape}"
                )

    def slices(self, origin) -> tuple[slice, ...]:
        return tuple(slice(a, a + p) for a, p in zip(origin, self.patch_size))


def _axis_origins(size: int, patch: int, step: int) -> list[int]:
    last = size - patch
    out = list(range(0, last + 1, step))
    if out[-1] != last:
        out.append(last)
    return out


def make_grid(image_shape, patch_size, step=None) -> PatchGrid:
    """Lay out patch origins at multiples of ``step``, with the last patch on each axis flush to the border.

    ``step`` defaults to half the patch size (at least 1).
    """
    image_shape = tuple(int(s) for s in image_shape)
    patch_size = tuple(int(p) for p in patch_size)
    if len(image_shape) != len(patch_size):
        raise ValueError(f"image shape {image_shape} and patch size {patch_size} differ in rank")
    if step is None:
        step = tuple(max(1, p // 2) for p in patch_size)
    step = tuple(int(s) for s in step)
    if any(p < 1 or p > s for p, s in zip(patch_size, image_shape)):
        raise PatchLargerThanImage(f"patch {patch_size} does not fit image {image_shape}")
    if len(step) != len(patch_size) or any(st < 1 or st > p for st, p in zip(step, patch_size)):
        raise ValueError(f"step {step} must satisfy 1 <= step <= patch size {patch_size}")
    per_axis = [_axis_origins(s, p, st) for s, p, st in zip(image_shape, patch_size, step)]
    origins = tuple(itertools.product(*per_axis))
    return PatchGrid(image_shape, patch_size, step, origins)


def grid_from_origins(image_shape, patch_size, origins) -> PatchGrid:
    """Wrap externally supplied origins (e.g. from a manifest) as a grid, keeping their order.

    Order matters: scores passed to :func:`build_uncertainty_mask` pair with
    origins positionally. ``step`` is informational only.
    """
    patch_size = tuple(int(p) for p in patch_size)
    origins = tuple(tuple(int(a) for a in o) for o in origins)
    step = tuple(max(1, p // 2) for p in patch_size)
    return PatchGrid(tuple(int(s) for s in image_shape), patch_size, step, origins)


def gaussian_weights_1d(n: int, sigma: float) -> np.ndarray:
    v = np.arange(n, dtype=np.float64)
    w = np.exp(-((v - (n - 1) / 2.0) ** 2) / (2.0 * sigma**2))
    return w / w.max()


def make_filter(patch_size, sigma_scale: float = DEFAULT_SIGMA_SCALE) -> np.ndarray:
    """Separable Gaussian bump with sigma = ``sigma_scale * patch_size`` per axis.

    Max-normalized to 1 at the center and floored at 1e-6 so no voxel carries
    zero weight.
    """
    if sigma_scale <= 0:
        raise ValueError(f"sigma_scale must be positive, got {sigma_scale}")
    patch_size = tuple(int(p) for p in patch_size)
    w = np.ones((), dtype=np.float64)
    for p in patch_size:
        w = np.multiply.outer(w, gaussian_weights_1d(p, sigma_scale * p))
    return np.maximum(w, WEIGHT_FLOOR)


def build_uncertainty_mask(grid: PatchGrid, patch_scores, weights: np.ndarray) -> np.ndarray:
    """Blend per-patch scores into a voxel mask as a filter-weighted mean.

    Every patch adds ``score * weights`` to a value volume and ``weights`` to
    a weight volume; the mask is their ratio. Patches are visited in grid
    order, which fixes the summation order.
    """
    scores = np.asarray(patch_scores, dtype=np.float64).reshape(-1)
    if scores.size != len(grid.origins):
        raise LengthMismatch(f"{scores.size} patch scores for {len(grid.origins)} patches")
    if not np.all(np.isfinite(scores)):
        raise NonFiniteInput("patch scores contain NaN or inf")
    if np.any(scores < 0):
        raise ValueError("patch scores must be non-negative")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != grid.patch_size:
        raise LengthMismatch(f"filter shape {weights.shape} does not match patch size {grid.patch_size}")

    value = np.zeros(grid.image_shape, dtype=np.float64)
    weight = np.zeros(grid.image_shape, dtype=np.float64)
    for origin, s in zip(grid.origins, scores):
        sl = grid.slices(origin)
        value[sl] += s * weights
        weight[sl] += weights
    if not np.all(weight > 0):
        missing = np.argwhere(weight <= 0)
        raise UncoveredVoxel(f"{len(missing)} voxel(s) not covered by any patch, first at {tuple(missing[0])}")
    return value / weight


def subject_score(mask) -> float:
    """Mean uncertainty over all voxels."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(np.isfinite(mask)):
        raise NonFiniteInput("mask contains NaN or inf")
    return float(mask.mean())


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    raw: float
    normalized: float | None = None


def normalization_range(id_val_raw) -> tuple[float, float]:
    vals = np.asarray(id_val_raw, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("ID validation scores are empty")
    lo, hi = float(vals.min()), 2.0 * float(vals.max())
    if not hi > lo:
        raise DegenerateRange(f"normalization range [{lo}, {hi}] is empty")
    return lo, hi


def normalize_scores(raw, id_val_raw) -> list[SubjectScore]:
    """Map raw scores linearly from [min(val), 2 * max(val)] onto [0, 1], clamping outside values."""
    lo, hi = normalization_range(id_val_raw)
    out = []
    for s in raw:
        u = (s.raw - lo) / (hi - lo)
        out.append(replace(s, normalized=min(1.0, max(0.0, u))))
    return out


def write_mask(mask: np.ndarray, score: SubjectScore, out_dir, suffix: str = "") -> Path:
    """Store ``<subject_id>.uncertainty[.suffix].npy`` and its metadata JSON; returns the tensor path."""
    out_dir = Path(out_dir)
    stem = f"{score.subject_id}.uncertainty" + (f".{suffix}" if suffix else "")
    tensor_path = out_dir / f"{stem}.npy"
    write_tensor(np.asarray(mask, dtype=np.float64), tensor_path)
    write_score_meta(out_dir / f"{stem}.json", score)
    return tensor_path


def write_score_meta(path, score: SubjectScore) -> None:
    meta = {"subject_id": score.subject_id, "raw_score": score.raw, "normalized_score": score.normalized}
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_score_meta(path) -> SubjectScore:
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    raw = float(meta["raw_score"])
    if not math.isfinite(raw):
        raise NonFiniteInput(f"{path}: raw score is not finite")
    return SubjectScore(meta["subject_id"], raw, meta.get("normalized_score"))
