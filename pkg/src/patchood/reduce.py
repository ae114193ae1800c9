"""Repeated average pooling of C x D x H x W encoder features down to a flat vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput


@dataclass(frozen=True)
class PoolingConfig:
    kernel: tuple[int, int, int] = (2, 2, 2)
    stride: tuple[int, int, int] = (2, 2, 2)
    max_elements: int = 10_000

    def __post_init__(self):
        for name in ("kernel", "stride"):
            v = tuple(int(x) for x in getattr(self, name))
            if len(v) != 3 or min(v) < 1:
                raise ValueError(f"{name} must be 3 positive integers, got {v}")
            object.__setattr__(self, name, v)
        # d < max_elements has to be reachable, and the smallest possible d is 1
        if int(self.max_elements) < 2:
            raise ValueError(f"max_elements must be >= 2, got {self.max_elements}")
        object.__setattr__(self, "max_elements", int(self.max_elements))

    def to_dict(self) -> dict:
        return {"kernel": list(self.kernel), "stride": list(self.stride), "max_elements": self.max_elements}

    @classmethod
    def from_dict(cls, doc: dict) -> PoolingConfig:
        return cls(tuple(doc["kernel"]), tuple(doc["stride"]), int(doc["max_elements"]))


def _out_len(n: int, stride: int) -> int:
    return -(-n // stride)


def _pool_axis(x: np.ndarray, axis: int, kernel: int, stride: int) -> np.ndarray:
    """Mean over windows [j*stride, j*stride + kernel) along one axis, clipped to the array."""
    n = x.shape[axis]
    starts = np.arange(_out_len(n, stride)) * stride
    stops = np.minimum(starts + kernel, n)
    shape = [1] * x.ndim
    shape[axis] = len(starts)

    acc = np.zeros(x.shape[:axis] + (len(starts),) + x.shape[axis + 1 :], dtype=np.float64)
    for t in range(kernel):
        idx = starts + t
        valid = idx < n
        if not valid.any():
            break
        taken = np.take(x, np.minimum(idx, n - 1), axis=axis)
        acc += np.where(valid.reshape(shape), taken, 0.0)
    return acc / (stops - starts).reshape(shape)


def avg_pool_once(t: np.ndarray, cfg: PoolingConfig = PoolingConfig()) -> np.ndarray:
    """One average-pooling pass over the three spatial dims of a C x D x H x W tensor.

    Edge windows that run past the boundary average only the in-bounds
    elements, so each output spatial dim is ``ceil(s / stride)``.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ValueError(f"expected a C x D x H x W tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("feature tensor contains NaN or inf")
    out = t
    for axis, (k, s) in enumerate(zip(cfg.kernel, cfg.stride), start=1):
        out = _pool_axis(out, axis, k, s)
    return out


def _pool_channels(t: np.ndarray) -> np.ndarray:
    return _pool_axis(t, 0, 2, 2)


def reduce_to_vector(t: np.ndarray, cfg: PoolingConfig = PoolingConfig()) -> np.ndarray:
    """Pool a feature tensor until it has fewer than ``cfg.max_elements`` values, then flatten.

    Spatial passes run while the element count is at or above the threshold
    and some spatial dim exceeds 1. If the spatial dims are exhausted and the
    count is still too large, adjacent channel pairs are averaged instead.

    Returns:
        float64 vector of length d, with d < cfg.max_elements.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ValueError(f"expected a C x D x H x W tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("feature tensor contains NaN or inf")
    while t.size >= cfg.max_elements and max(t.shape[1:]) > 1:
        pooled = avg_pool_once(t, cfg)
        if pooled.shape == t.shape:
            break  # stride 1 everywhere: spatial pooling cannot shrink further
        t = pooled
    while t.size >= cfg.max_elements:
        if t.shape[0] == 1:
            raise ValueError(f"pooling config {cfg} cannot reduce a tensor of shape {t.shape}")
        t = _pool_channels(t)
    return t.reshape(-1)


def pooled_shape(shape, cfg: PoolingConfig = PoolingConfig()) -> tuple[int, int, int, int]:
    """Shape that :func:`reduce_to_vector` reaches for an input of ``shape`` (before flattening)."""
    c, *spatial = (int(s) for s in shape)
    while c * math.prod(spatial) >= cfg.max_elements and max(spatial) > 1:
        nxt = [_out_len(s, st) for s, st in zip(spatial, cfg.stride)]
        if nxt == spatial:
            break
        spatial = nxt
    while c * math.prod(spatial) >= cfg.max_elements:
        if c == 1:
            raise ValueError(f"pooling config {cfg} cannot reduce a tensor of shape {tuple(shape)}")
        c = _out_len(c, 2)
    return (c, *spatial)
