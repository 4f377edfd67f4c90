"""Principal component analysis in a tangent space or in ambient coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class PCA:
    """A fitted PCA model on flattened vectors.

    Attributes:
        mean: Sample mean, shape ``(D,)``.
        components: Principal directions as rows, shape ``(J, D)``,
            ordered by decreasing eigenvalue.
        explained_variance: Eigenvalues of the sample covariance (``N - 1``
            normalisation) for the kept components.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def project(self, X):
        """Component scores of rows of ``X``."""
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T

    def reconstruct(self, scores):
        return self.mean + np.asarray(scores, dtype=float) @ self.components

    def denoise(self, X):
        return self.reconstruct(self.project(X))

    def mode(self, j, s):
        """Point ``mean + s * sqrt(lambda_j) * e_j`` along the ``j``-th mode of variation."""
        if not 0 <= j < len(self.explained_variance):
            raise InvalidInputError(f"component {j} out of range")
        return self.mean + s * np.sqrt(self.explained_variance[j]) * self.components[j]


def fit_pca(X, J, center=True):
    """PCA of the rows of ``X`` with ``J`` components.

    With ``center=False`` the data are assumed centered already (for
    tangent vectors at a Frechet mean the sample mean is near zero but not
    exactly, so the default still subtracts it).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        X = X.reshape(X.shape[0], -1)
    N, D = X.shape
    if N < 2:
        raise InvalidInputError("PCA needs at least 2 samples")
    if not 1 <= J <= min(N - 1, D):
        raise InvalidInputError(f"J={J} must lie in [1, min(N - 1, D)] = [1, {min(N - 1, D)}]")
    mean = X.mean(axis=0) if center else np.zeros(D)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:J]
    # fix signs so the largest-magnitude entry of each component is positive
    pivot = comps[np.arange(J), np.argmax(np.abs(comps), axis=1)]
    comps = comps * np.where(pivot < 0, -1.0, 1.0)[:, None]
    return PCA(mean, comps, s[:J] ** 2 / (N - 1))


def tangent_pca(fields, J):
    """PCA of flattened tangent fields at a common base point."""
    fields = np.asarray(fields, dtype=float)
    return fit_pca(fields.reshape(fields.shape[0], -1), J)


def euclidean_pca(sequences, J):
    """PCA of raw flattened coordinates."""
    sequences = np.asarray(sequences, dtype=float)
    return fit_pca(sequences.reshape(sequences.shape[0], -1), J)
