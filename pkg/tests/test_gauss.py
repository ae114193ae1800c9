import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchood.errors import DimensionMismatch, FactorizationFailure, NonFiniteInput, TooFewSamples
from patchood.gauss import GaussianModel, euclidean_sq, factorize, fit_gaussian, load_model, mahalanobis, save_model
from patchood.reduce import PoolingConfig


def two_pass_moments(samples):
    """Plain-Python two-pass mean and 1/N covariance with exactly rounded sums."""
    n, d = len(samples), len(samples[0])
    mu = [math.fsum(s[j] for s in samples) / n for j in range(d)]
    cov = [[math.fsum((s[i] - mu[i]) * (s[j] - mu[j]) for s in samples) / n for j in range(d)] for i in range(d)]
    return np.array(mu), np.array(cov)


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b)


def chol_residual(m: GaussianModel):
    target = m.sigma + m.epsilon * np.eye(m.d)
    return np.linalg.norm(m.chol @ m.chol.T - target) / np.linalg.norm(target)


def test_two_point_fit_needs_ridge():
    m = fit_gaussian([[0.0, 0.0], [2.0, 2.0]])
    np.testing.assert_array_equal(m.mu, [1.0, 1.0])
    np.testing.assert_array_equal(m.sigma, [[1.0, 1.0], [1.0, 1.0]])
    assert m.epsilon > 0
    assert chol_residual(m) < 1e-8
    # first retry is 1e-6 * trace / d
    assert m.epsilon == pytest.approx(1e-6, rel=1e-12)


def test_identical_samples():
    v = np.array([1.5, -2.0, 3.0])
    m = fit_gaussian([v] * 5)
    np.testing.assert_array_equal(m.mu, v)
    np.testing.assert_array_equal(m.sigma, np.zeros((3, 3)))
    assert m.epsilon > 0
    assert mahalanobis(v, m) == 0.0
    assert mahalanobis(v + 1e-3, m) > 0


def test_fit_matches_two_pass_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((500, 8)) @ rng.standard_normal((8, 8)) + rng.standard_normal(8) * 5
    mu_ref, cov_ref = two_pass_moments(x.tolist())
    m = fit_gaussian(x)
    assert rel_err(m.mu, mu_ref) < 1e-10
    assert rel_err(m.sigma, cov_ref) < 1e-10
    assert m.n_samples == 500 and m.epsilon == 0.0
    # biased normalizer, not 1/(N-1)
    assert rel_err(m.sigma, np.cov(x, rowvar=False, bias=True)) < 1e-10


def test_fit_invariants_random():
    rng = np.random.default_rng(12)
    for n, d in [(3, 2), (10, 20), (50, 5), (4, 4)]:
        m = fit_gaussian(rng.standard_normal((n, d)))
        assert np.allclose(m.sigma, m.sigma.T, rtol=1e-12, atol=0)
        assert chol_residual(m) < 1e-8
        assert np.all(np.diag(m.chol) > 0)


def test_fit_errors():
    with pytest.raises(TooFewSamples):
        fit_gaussian([[1.0, 2.0]])
    with pytest.raises(DimensionMismatch):
        fit_gaussian([[1.0, 2.0], [1.0, 2.0, 3.0]])
    with pytest.raises(NonFiniteInput):
        fit_gaussian([[1.0, np.nan], [1.0, 2.0]])


def test_factorization_cap():
    with pytest.raises(FactorizationFailure):
        factorize(np.array([[1.0, 0.0], [0.0, -1e9]]))


def test_mahalanobis_examples():
    m = GaussianModel.from_moments([0.0, 0.0], np.eye(2))
    assert mahalanobis([3.0, 4.0], m) == pytest.approx(25.0, rel=1e-15)
    assert mahalanobis([0.0, 0.0], m) == 0.0
    m = GaussianModel.from_moments([0.0, 0.0], np.diag([4.0, 1.0]))
    assert mahalanobis([2.0, 1.0], m) == pytest.approx(2.0, rel=1e-15)


def test_mahalanobis_batch_and_errors():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 6))
    m = GaussianModel.from_moments(rng.standard_normal(6), a @ a.T + np.eye(6))
    z = rng.standard_normal((10, 6))
    batch = mahalanobis(z, m)
    assert batch.shape == (10,)
    np.testing.assert_allclose(batch, [mahalanobis(r, m) for r in z], rtol=1e-14)
    with pytest.raises(DimensionMismatch):
        mahalanobis(np.zeros(5), m)
    with pytest.raises(NonFiniteInput):
        mahalanobis(np.full(6, np.inf), m)
    with pytest.raises(DimensionMismatch):
        euclidean_sq(np.zeros(7), m)


def test_euclidean_against_loop():
    rng = np.random.default_rng(4)
    for _ in range(20):
        mu, z = rng.standard_normal(16), rng.standard_normal(16)
        m = GaussianModel.from_moments(mu, np.eye(16))
        ref = math.fsum((zi - mi) ** 2 for zi, mi in zip(z, mu))
        assert euclidean_sq(z, m) == pytest.approx(ref, rel=1e-12)
    assert euclidean_sq([3.0, 4.0], GaussianModel.from_moments([0.0, 0.0], np.eye(2))) == 25.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_identity_cov_reduces_to_euclidean(d, seed):
    rng = np.random.default_rng(seed)
    m = GaussianModel.from_moments(rng.standard_normal(d), np.eye(d))
    assert m.epsilon == 0.0
    z = rng.standard_normal(d) * 10
    assert mahalanobis(z, m) == pytest.approx(euclidean_sq(z, m), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_monotone_along_ray(d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5 * d, d))
    m = fit_gaussian(x)
    v = rng.standard_normal(d)
    cs = np.linspace(0, 5, 30)
    vals = [mahalanobis(m.mu + c * v, m) for c in cs]
    assert vals[0] == pytest.approx(0.0, abs=1e-20)
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_affine_invariance():
    rng = np.random.default_rng(5)
    d = 6
    x = rng.standard_normal((400, d)) @ rng.standard_normal((d, d))
    z = rng.standard_normal((50, d))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    a = q @ np.diag(np.linspace(1, 5, d))
    m1, m2 = fit_gaussian(x), fit_gaussian(x @ a.T)
    assert m1.epsilon == m2.epsilon == 0.0
    np.testing.assert_allclose(mahalanobis(z @ a.T, m2), mahalanobis(z, m1), rtol=1e-6)
    assert not np.allclose(euclidean_sq(z @ a.T, m2), euclidean_sq(z, m1), rtol=1e-2)


def test_chi_square_expectation():
    rng = np.random.default_rng(6)
    d = 10
    x = rng.standard_normal((50 * d, d)) @ rng.standard_normal((d, d))
    m = fit_gaussian(x)
    assert np.mean(mahalanobis(x, m)) == pytest.approx(d, rel=0.15)


def test_model_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(8)
    m = fit_gaussian(rng.standard_normal((30, 4)), PoolingConfig(max_elements=123))
    save_model(m, tmp_path / "a.zip")
    back = load_model(tmp_path / "a.zip")
    for name in ("mu", "sigma", "chol"):
        assert getattr(back, name).tobytes() == getattr(m, name).tobytes()
    assert (back.epsilon, back.n_samples, back.pooling) == (m.epsilon, m.n_samples, m.pooling)
    save_model(back, tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()


def test_model_is_immutable():
    m = fit_gaussian(np.random.default_rng(0).standard_normal((5, 2)))
    with pytest.raises(ValueError):
        m.mu[0] = 1.0
