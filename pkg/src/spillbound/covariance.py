"""Cluster-robust sandwich covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularDesignError, ValidationError

__all__ = ["ClusteredVariance", "clustered_se"]


@dataclass(frozen=True)
class ClusteredVariance:
    """Cluster-robust covariance of a coefficient vector.

    Attributes
    ----------
    cov : ndarray, shape (k, k)
        ``(X'X)^{-1} (sum_g X_g' u_g u_g' X_g) (X'X)^{-1}`` times ``factor``.
    n_clusters : int
    factor : float
        Small-sample adjustment ``G / (G - 1)``.
    """

    cov: np.ndarray
    n_clusters: int
    factor: float

    @property
    def variances(self) -> np.ndarray:
        return np.clip(np.diag(self.cov), 0.0, None)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.variances)


def clustered_se(X: np.ndarray, resid: np.ndarray, clusters: np.ndarray,
                 small_sample: bool = True) -> ClusteredVariance:
    """Sandwich covariance clustered on ``clusters``.

    Parameters
    ----------
    X : ndarray, shape (n, k)
        Regressors, or the Jacobian of a nonlinear mean function at the
        estimate.
    resid : ndarray, shape (n,)
    clusters : ndarray, shape (n,)
        Cluster labels (unit ids).
    small_sample : bool
        Apply the ``G / (G - 1)`` factor.

    Returns
    -------
    ClusteredVariance

    Raises
    ------
    ValidationError
        Fewer than two clusters.
    SingularDesignError
        ``X'X`` is singular.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    u = np.asarray(resid, dtype=float).ravel()
    cl = np.asarray(clusters).ravel()
    if X.shape[0] != u.size or cl.size != u.size:
        raise ValidationError("X, resid and clusters must have matching lengths")
    labels, inv = np.unique(cl, return_inverse=True)
    G = labels.size
    if G < 2:
        raise ValidationError("clustered variance needs at least 2 clusters")
    xtx = X.T @ X
    if not np.all(np.isfinite(xtx)):
        raise SingularDesignError("X'X is not finite")
    # relative conditioning check catches exact collinearity
    if np.linalg.matrix_rank(xtx, tol=np.finfo(float).eps * X.shape[0] * np.abs(xtx).max()) < xtx.shape[0]:
        raise SingularDesignError("X'X is singular")
    bread = np.linalg.inv(xtx)
    scores = np.zeros((G, X.shape[1]))
    np.add.at(scores, inv, X * u[:, None])
    meat = scores.T @ scores
    factor = G / (G - 1.0) if small_sample else 1.0
    cov = factor * bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    return ClusteredVariance(cov, int(G), float(factor))
