"""Seeded synthetic datasets with a controllable ID/OOD feature shift.

Every random draw comes from numpy's Philox counter-based generator keyed by
``ShiftSpec.seed`` and is taken in a fixed order, so a spec always produces
byte-identical files.

Feature vectors are drawn per patch. ID subjects (train/val/test) sample
``N(mu0, sigma0)``; OOD subjects sample ``N(mu0 + delta, scale^2 R sigma0 R^T)``.
Each d-vector is stored as a ``d x 2 x 2 x 2`` tensor (every value repeated
over a 2x2x2 block) with a pooling threshold of ``d + 1``, so exactly one
pooling pass recovers the vector.

Segmentation outputs are constructed so that Dice falls with the subject's
true feature-space distance, while softmax, logits and MC samples are drawn
from one law for all subjects and therefore carry no shift signal.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .aggregate import make_grid
from .errors import IoFailure
from .reduce import PoolingConfig
from .tensorio import DatasetManifest, Split, load_manifest, write_tensor

logger = logging.getLogger(__name__)

EIG_RANGE = (0.1, 10.0)
# error fraction = BASE + SLOPE * (r - 1), r = mean true squared distance / d
ERROR_BASE = 0.1
ERROR_SLOPE = 0.25
ERROR_JITTER = 0.01
MAX_ERROR_FRACTION = 0.95


@dataclass(frozen=True)
class ShiftSpec:
    d: int = 16
    n_train: int = 200
    n_val: int = 20
    n_test: int = 40
    n_ood: int = 40
    mean_shift: float = 5.0
    cov_rotation: float = 0.0
    scale: float = 1.0
    seed: int = 0
    image_shape: tuple[int, int, int] = (8, 16, 16)
    patch_size: tuple[int, int, int] = (8, 8, 8)
    mc_samples: int = 10

    def __post_init__(self):
        for name in ("d", "n_train", "n_val", "n_test", "n_ood"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mean_shift < 0 or self.scale <= 0:
            raise ValueError("mean_shift must be >= 0 and scale > 0")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "patch_size", tuple(int(s) for s in self.patch_size))
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF)

    @classmethod
    def from_dict(cls, doc: dict) -> ShiftSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown ShiftSpec fields: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("image_shape", "patch_size"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_shape"] = list(self.image_shape)
        out["patch_size"] = list(self.patch_size)
        return out


@dataclass(frozen=True)
class Population:
    """True generating laws of a spec."""

    mu0: np.ndarray
    sigma0: np.ndarray
    delta: np.ndarray
    rotation: np.ndarray
    ood_sigma: np.ndarray

    @property
    def ood_mu(self) -> np.ndarray:
        return self.mu0 + self.delta


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _random_orthogonal(rng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _draw_population(spec: ShiftSpec, rng) -> Population:
    d = spec.d
    basis = _random_orthogonal(rng, d)
    lo, hi = np.log(EIG_RANGE[0]), np.log(EIG_RANGE[1])
    eig = np.exp(rng.uniform(lo, hi, size=d))
    sigma0 = (basis * eig) @ basis.T
    sigma0 = 0.5 * (sigma0 + sigma0.T)
    mu0 = rng.standard_normal(d)

    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    avg_std = np.sqrt(np.trace(sigma0) / d)
    delta = spec.mean_shift * avg_std * direction

    rotation = np.eye(d)
    if d >= 2:
        plane = _random_orthogonal(rng, d)[:, :2]
        u, v = plane[:, 0], plane[:, 1]
        c, s = np.cos(spec.cov_rotation), np.sin(spec.cov_rotation)
        rotation = rotation + (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    ood_sigma = spec.scale**2 * rotation @ sigma0 @ rotation.T
    ood_sigma = 0.5 * (ood_sigma + ood_sigma.T)
    return Population(mu0, sigma0, delta, rotation, ood_sigma)


def population(spec: ShiftSpec) -> Population:
    """The generating laws ``generate`` uses for ``spec`` (independent of any file output)."""
    return _draw_population(spec, make_rng(spec.seed))


def _lesion(image_shape) -> np.ndarray:
    gt = np.zeros(image_shape, dtype=bool)
    gt[tuple(slice(s // 4, s // 4 + max(1, s // 2)) for s in image_shape)] = True
    return gt


def _corrupt(gt: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Move ``round(fraction * |gt|)`` foreground voxels into the background, giving Dice = 1 - k/|gt|."""
    fg = np.flatnonzero(gt)
    bg = np.flatnonzero(~gt)
    k = min(int(round(fraction * fg.size)), fg.size, bg.size)
    pred = gt.copy().reshape(-1)
    pred[rng.choice(fg, size=k, replace=False)] = False
    pred[rng.choice(bg, size=k, replace=False)] = True
    return pred.reshape(gt.shape)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate(spec: ShiftSpec, out_dir) -> DatasetManifest:
    """Write a complete synthetic dataset and its manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    rng = make_rng(spec.seed)
    pop = _draw_population(spec, rng)
    id_chol = np.linalg.cholesky(pop.sigma0)
    ood_chol = np.linalg.cholesky(pop.ood_sigma)

    grid = make_grid(spec.image_shape, spec.patch_size)
    n_patches = len(grid.origins)
    gt = _lesion(spec.image_shape)
    pooling = PoolingConfig(max_elements=spec.d + 1)

    plan = (
        [(Split.ID_TRAIN, f"train_{i:04d}") for i in range(spec.n_train)]
        + [(Split.ID_VAL, f"val_{i:04d}") for i in range(spec.n_val)]
        + [(Split.ID_TEST, f"test_{i:04d}") for i in range(spec.n_test)]
        + [(Split.OOD, f"ood_{i:04d}") for i in range(spec.n_ood)]
    )
    subjects = []
    for split, sid in plan:
        sdir = out_dir / "subjects" / sid
        sdir.mkdir(parents=True, exist_ok=True)
        mean, chol = (pop.ood_mu, ood_chol) if split is Split.OOD else (pop.mu0, id_chol)
        feats = mean + rng.standard_normal((n_patches, spec.d)) @ chol.T

        entry = {
            "id": sid,
            "split": split.value,
            "image_shape": list(spec.image_shape),
            "feature_files": [],
            "patch_origins": [list(o) for o in grid.origins],
        }
        for j, vec in enumerate(feats):
            rel = f"subjects/{sid}/patch_{j:03d}.npy"
            block = np.broadcast_to(vec.astype(np.float32)[:, None, None, None], (spec.d, 2, 2, 2))
            write_tensor(block, out_dir / rel)
            entry["feature_files"].append(rel)

        if split is not Split.ID_TRAIN:
            entry.update(_write_outputs(spec, sdir, sid, feats, pop, id_chol, gt, rng))
        subjects.append(entry)

    manifest = {
        "patch_size": list(spec.patch_size),
        "pooling": pooling.to_dict(),
        "meta": {"generator": "synth", "spec": spec.to_dict()},
        "subjects": subjects,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    logger.info("wrote %d synthetic subjects to %s", len(subjects), out_dir)
    return load_manifest(out_dir / "manifest.json")


def _write_outputs(spec, sdir: Path, sid: str, feats, pop: Population, id_chol, gt, rng) -> dict:
    y = solve_triangular(id_chol, (feats - pop.mu0).T, lower=True)
    ratio = float(np.mean(np.sum(y * y, axis=0))) / spec.d
    fraction = ERROR_BASE + ERROR_SLOPE * (ratio - 1.0) + ERROR_JITTER * rng.standard_normal()
    fraction = float(np.clip(fraction, 0.0, MAX_ERROR_FRACTION))
    pred = _corrupt(gt, fraction, rng)

    # logit margin law is shared by every subject: outputs carry no shift signal
    margin = 0.5 + 2.0 * np.abs(rng.standard_normal(spec.image_shape))
    fg_logit = np.where(pred, margin, -margin)
    logits = np.stack([-0.5 * fg_logit, 0.5 * fg_logit])
    fg_prob = _sigmoid(fg_logit)
    probs = np.stack([1.0 - fg_prob, fg_prob])
    mc = [_sigmoid(fg_logit + rng.standard_normal(spec.image_shape)) for _ in range(spec.mc_samples)]

    rel = f"subjects/{sid}"
    write_tensor(logits.astype(np.float32), sdir / "logits.npy")
    write_tensor(probs, sdir / "softmax.npy")
    write_tensor(pred.astype(np.float32), sdir / "prediction.npy")
    write_tensor(gt.astype(np.float32), sdir / "groundtruth.npy")
    mc_files = []
    for k, sample in enumerate(mc):
        write_tensor(sample.astype(np.float32), sdir / f"mc_{k:02d}.npy")
        mc_files.append(f"{rel}/mc_{k:02d}.npy")
    return {
        "softmax_file": f"{rel}/softmax.npy",
        "logits_file": f"{rel}/logits.npy",
        "mc_sample_files": mc_files,
        "prediction_file": f"{rel}/prediction.npy",
        "groundtruth_file": f"{rel}/groundtruth.npy",
    }
