"""Single multivariate Gaussian over pooled training features, and distances to it."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, FactorizationFailure, IoFailure, NonFiniteInput, TooFewSamples
from .reduce import PoolingConfig
from .tensorio import tensor_bytes, tensor_from_bytes, write_atomic

logger = logging.getLogger(__name__)

RIDGE_START = 1e-6
RIDGE_GROWTH = 10.0
RIDGE_RETRIES = 10


@dataclass(frozen=True, eq=False)
class GaussianModel:
    """Fitted N(mu, sigma) plus the Cholesky factor of ``sigma + epsilon * I``.

    Attributes:
        mu: mean vector, shape (d,).
        sigma: covariance with the 1/N normalizer, shape (d, d), unregularized.
        chol: lower-triangular factor with ``chol @ chol.T == sigma + epsilon * I``.
        epsilon: ridge that was needed for the factorization (0 when none).
        n_samples: number of training vectors.
        pooling: pooling configuration that produced the d-dimensional features.
    """

    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    epsilon: float
    n_samples: int
    pooling: PoolingConfig = field(default_factory=PoolingConfig)

    @property
    def d(self) -> int:
        return int(self.mu.shape[0])

    @classmethod
    def from_moments(cls, mu, sigma, n_samples: int = 2, pooling: PoolingConfig | None = None) -> GaussianModel:
        """Build a model from a known mean and covariance (factorized with the usual ridge schedule)."""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"sigma shape {sigma.shape} does not match mean of length {mu.size}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise NonFiniteInput("mean or covariance contains NaN or inf")
        sigma = 0.5 * (sigma + sigma.T)
        chol, eps = factorize(sigma)
        return cls(_frozen(mu), _frozen(sigma), _frozen(chol), eps, int(n_samples), pooling or PoolingConfig())


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.setflags(write=False)
    return a


def _try_cholesky(a: np.ndarray) -> np.ndarray | None:
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    # LAPACK accepts pivots that are positive only through rounding; such a
    # factor turns null-space directions into ~1e16 distances.
    piv = np.diag(chol) ** 2
    floor = a.shape[0] * np.finfo(np.float64).eps * max(float(np.max(np.diag(a))), 0.0)
    if not np.all(np.isfinite(chol)) or np.min(piv) <= floor:
        return None
    return chol


def factorize(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky-factorize ``sigma``, adding a growing diagonal ridge if it is singular.

    The first retry uses ``1e-6 * trace(sigma) / d``; each further retry
    multiplies the ridge by 10, for at most 10 retries.

    Returns:
        (chol, epsilon) with ``chol @ chol.T == sigma + epsilon * I``.
    """
    d = sigma.shape[0]
    chol = _try_cholesky(sigma)
    if chol is not None:
        return chol, 0.0
    eps = RIDGE_START * float(np.trace(sigma)) / d
    if eps <= 0.0:
        eps = RIDGE_START  # all-zero covariance: no scale to borrow from the trace
    eye = np.eye(d)
    for _ in range(RIDGE_RETRIES):
        chol = _try_cholesky(sigma + eps * eye)
        if chol is not None:
            logger.info("covariance singular; applied ridge epsilon=%.3e", eps)
            return chol, eps
        eps *= RIDGE_GROWTH
    raise FactorizationFailure(f"covariance not factorizable after {RIDGE_RETRIES} ridge retries")


def fit_gaussian(samples, pooling: PoolingConfig | None = None) -> GaussianModel:
    """Estimate mean and covariance of pooled features with the 1/N normalizer.

    Args:
        samples: sequence of d-vectors or an (N, d) array.
        pooling: pooling configuration to record in the model.
    """
    vectors = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
    if len(vectors) < 2:
        raise TooFewSamples(f"need at least 2 samples to fit a Gaussian, got {len(vectors)}")
    d = vectors[0].size
    for i, v in enumerate(vectors):
        if v.size != d:
            raise DimensionMismatch(f"sample {i} has dimension {v.size}, expected {d}")
    x = np.stack(vectors)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("training features contain NaN or inf")

    n = x.shape[0]
    mu = x.sum(axis=0) / n
    xc = x - mu
    sigma = (xc.T @ xc) / n
    sigma = 0.5 * (sigma + sigma.T)
    chol, eps = factorize(sigma)
    logger.info("fitted Gaussian: N=%d d=%d epsilon=%.3e", n, d, eps)
    return GaussianModel(_frozen(mu), _frozen(sigma), _frozen(chol), eps, n, pooling or PoolingConfig())


def _deviation(z, m: GaussianModel) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != m.d or z.ndim > 2:
        raise DimensionMismatch(f"feature of shape {z.shape} does not match model dimension {m.d}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("feature contains NaN or inf")
    return z - m.mu


def mahalanobis(z, m: GaussianModel):
    """Squared Mahalanobis distance ``(z - mu)^T sigma^-1 (z - mu)``.

    Solves ``chol @ y = z - mu`` by forward substitution and returns ``y^T y``.
    ``z`` may be a single d-vector (returns float) or an (n, d) batch.
    """
    dev = _deviation(z, m)
    y = solve_triangular(m.chol, dev.T, lower=True, check_finite=False)
    out = np.einsum("i...,i...->...", y, y)
    return float(out) if dev.ndim == 1 else out


def euclidean_sq(z, m: GaussianModel):
    dev = _deviation(z, m)
    out = np.einsum("...i,...i->...", dev, dev)
    return float(out) if dev.ndim == 1 else out


# ---------------------------------------------------------------------------
# persistence: a stored zip holding three tensors and a JSON sidecar.
# Fixed member order and timestamps keep the file byte-reproducible.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_model(m: GaussianModel, path) -> None:
    meta = {
        "d": m.d,
        "epsilon": m.epsilon,
        "n_samples": m.n_samples,
        "pooling": m.pooling.to_dict(),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _member(zf, "mu.npy", tensor_bytes(m.mu))
        _member(zf, "sigma.npy", tensor_bytes(m.sigma))
        _member(zf, "chol.npy", tensor_bytes(m.chol))
        _member(zf, "model.json", (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode())
    write_atomic(buf.getvalue(), path)


def load_model(path) -> GaussianModel:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("model.json"))
            mu = tensor_from_bytes(zf.read("mu.npy"), f"{path}:mu.npy")
            sigma = tensor_from_bytes(zf.read("sigma.npy"), f"{path}:sigma.npy")
            chol = tensor_from_bytes(zf.read("chol.npy"), f"{path}:chol.npy")
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot load model {path}: {exc}") from exc
    d = int(meta["d"])
    if mu.shape != (d,) or sigma.shape != (d, d) or chol.shape != (d, d):
        raise DimensionMismatch(f"model {path}: tensor shapes disagree with d={d}")
    return GaussianModel(
        _frozen(mu),
        _frozen(sigma),
        _frozen(chol),
        float(meta["epsilon"]),
        int(meta["n_samples"]),
        PoolingConfig.from_dict(meta["pooling"]),
    )
