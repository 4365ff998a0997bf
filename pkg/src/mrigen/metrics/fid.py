"""Frechet distance between Gaussian fits of feature sets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput, NotPSDError


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mu)


def gaussian_stats(features) -> GaussianStats:
    """Column means and unbiased (n - 1) covariance of an ``(n, d)`` matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInput(f"need an (n>=2, d) feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("features contain non-finite values")
    n, d = x.shape
    if n < d:
        warnings.warn(f"n={n} < d={d}: covariance is rank deficient", RuntimeWarning, stacklevel=2)
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2.0)


def sqrtm_psd(a) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via ``eigh``.

    Eigenvalues below ``-1e-6 * ||A||_2`` raise :class:`NotPSDError`;
    smaller negative ones are treated as zero.
    """
    a = np.asarray(a, dtype=np.float64)
    scale = max(np.abs(a).max(), 1e-300)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput("sqrtm_psd needs a square matrix")
    if np.abs(a - a.T).max() > 1e-8 * scale:
        raise InvalidInput("matrix is not symmetric")
    lam, q = np.linalg.eigh((a + a.T) / 2.0)
    norm = np.abs(lam).max() if lam.size else 0.0
    if lam.size and lam.min() < -1e-6 * norm:
        raise NotPSDError(f"matrix has eigenvalue {lam.min():.3e} (norm {norm:.3e})")
    return (q * np.sqrt(np.maximum(lam, 0.0))) @ q.T


def fid(a: GaussianStats, b: GaussianStats, jitter: float = 1e-6) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2)``.

    ``jitter * I`` is added to both covariances when either has an
    eigenvalue below ``jitter`` (near-singular estimates); well-conditioned
    inputs are used as given. The result is clamped at zero.
    """
    if a.dim != b.dim:
        raise InvalidInput(f"dimension mismatch {a.dim} vs {b.dim}")
    s1, s2 = a.sigma, b.sigma
    if jitter > 0 and min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) < jitter:
        eye = np.eye(a.dim)
        s1, s2 = s1 + jitter * eye, s2 + jitter * eye
    r = sqrtm_psd(s1)
    inner = r @ s2 @ r
    cross = np.trace(sqrtm_psd((inner + inner.T) / 2.0))
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross)
    if value < -1e-6 * max(1.0, np.trace(s1) + np.trace(s2)):
        raise NotPSDError(f"FID evaluated to {value:.3e}")
    return max(value, 0.0)
