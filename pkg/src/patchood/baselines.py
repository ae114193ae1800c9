"""Output-based uncertainty estimators used as comparison baselines.

All estimators take whole-image volumes with the class axis first
(``K x D x H x W`` or any spatial rank) and return a voxel mask of the
spatial shape. Confidence scores are inverted so that higher means more
uncertain, matching the Mahalanobis masks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import softmax

from .errors import NonFiniteInput, NotNormalized, ShapeMismatch

SUM_TOLERANCE = 1e-4
KL_INVERSIONS = ("affine", "negate")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 2 or p.shape[0] < 2:
        raise ShapeMismatch(f"expected a K x spatial volume with K >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("softmax volume contains NaN or inf")
    if np.any(p < -SUM_TOLERANCE) or np.any(p > 1 + SUM_TOLERANCE):
        raise NotNormalized("softmax probabilities outside [0, 1]")
    dev = np.max(np.abs(p.sum(axis=0) - 1.0))
    if dev > SUM_TOLERANCE:
        raise NotNormalized(f"class probabilities do not sum to 1 (max deviation {dev:.2e})")
    return np.clip(p, 0.0, 1.0)


def max_softmax_uncertainty(probs) -> np.ndarray:
    """``1 - max_k p_k`` per voxel."""
    p = _check_probs(probs)
    return 1.0 - p.max(axis=0)


def temp_scaled_uncertainty(logits, temperature: float) -> np.ndarray:
    """``1 - max_k softmax(logits / T)_k`` per voxel."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 2 or z.shape[0] < 2:
        raise ShapeMismatch(f"expected a K x spatial logit volume with K >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logit volume contains NaN or inf")
    # scipy's softmax subtracts the per-voxel max before exponentiating
    p = softmax(z / temperature, axis=0)
    return 1.0 - p.max(axis=0)


def kl_from_uniform(probs) -> np.ndarray:
    """KL(p || uniform) = log K - H(p) in nats, with 0 log 0 = 0."""
    p = _check_probs(probs)
    k = p.shape[0]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.log(k) + plogp.sum(axis=0)


def kl_from_uniform_uncertainty(probs, invert: str = "affine") -> np.ndarray:
    """Invert the KL-from-uniform confidence into an uncertainty.

    ``affine`` maps to ``1 - KL / log K`` in [0, 1]; ``negate`` returns
    ``log K - KL`` (the entropy, in nats).
    """
    if invert not in KL_INVERSIONS:
        raise ValueError(f"invert must be one of {KL_INVERSIONS}, got {invert!r}")
    p = np.asarray(probs)
    kl = kl_from_uniform(p)
    log_k = np.log(p.shape[0])
    if invert == "affine":
        return np.clip(1.0 - kl / log_k, 0.0, 1.0)
    return np.maximum(log_k - kl, 0.0)


def mc_dropout_uncertainty(samples, class_axis: bool = False) -> np.ndarray:
    """Population standard deviation across MC-dropout samples.

    Args:
        samples: (S, *spatial) foreground probabilities, or (S, K, *spatial)
            class probabilities when ``class_axis`` is True.
        class_axis: for K == 2 the foreground channel (index 1) is used; for
            K > 2 the per-class deviations are averaged.
    """
    if isinstance(samples, (list, tuple)):
        shapes = {np.shape(s) for s in samples}
        if len(shapes) > 1:
            raise ShapeMismatch(f"MC samples differ in shape: {sorted(shapes)}")
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim < 2 or s.shape[0] < 2:
        raise ShapeMismatch(f"need at least 2 MC samples stacked on axis 0, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteInput("MC samples contain NaN or inf")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("MC sample probabilities must lie in [0, 1]")
    # std is shift-invariant; centering on one sample makes identical samples give exactly 0
    s = s - s[0]
    if class_axis:
        if s.ndim < 3 or s.shape[1] < 2:
            raise ShapeMismatch(f"expected (S, K, ...) samples with K >= 2, got shape {s.shape}")
        if s.shape[1] == 2:
            return s[:, 1].std(axis=0)
        return s.std(axis=0).mean(axis=0)
    return s.std(axis=0)
