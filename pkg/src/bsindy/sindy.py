"""Deterministic baseline: least squares and sequential thresholded least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class StlsResult:
    xi: np.ndarray
    support: np.ndarray  # sorted indices of active terms
    iterations: int
    lam: float
    converged: bool = True

    def to_dict(self, labels=None) -> dict:
        d = {
            "xi": self.xi.tolist(),
            "support": self.support.tolist(),
            "iterations": self.iterations,
            "lambda": self.lam,
            "converged": self.converged,
        }
        if labels is not None:
            d["support_labels"] = [labels[j] for j in self.support]
        return d


def least_squares(D, z) -> np.ndarray:
    """Minimum-norm least-squares solution of ``D xi ~ z``.

    Uses LAPACK's complete orthogonal factorisation (``gelsy``), which is
    rank revealing, so rank-deficient designs return the minimum-norm
    minimiser.  ``z`` may be a vector or a matrix of right-hand sides.
    """
    D = np.asarray(D, dtype=float)
    z = np.asarray(z, dtype=float)
    if D.ndim != 2:
        raise ValueError("D must be a 2-D array")
    if D.shape[0] < 1:
        raise ValueError("D must have at least one row")
    if z.shape[0] != D.shape[0]:
        raise ValueError(f"D has {D.shape[0]} rows but z has {z.shape[0]}")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(z))):
        raise ValueError("D and z must be finite")
    if D.shape[1] == 0:
        return np.zeros((0,) + z.shape[1:])
    # singular values below this relative cutoff count as zero (numpy's lstsq default)
    cond = max(D.shape) * np.finfo(float).eps
    xi, *_ = scipy.linalg.lstsq(D, z, cond=cond, lapack_driver="gelsy")
    return xi


def stls(D, z, lam: float, k_max: int = 10) -> StlsResult:
    """Sequential thresholded least squares for a single target vector.

    Starts from the least-squares fit, then repeatedly drops every active
    coefficient with ``|xi_j| < lam`` and refits on the remaining columns.
    Dropped indices never return.  Stops when a pass removes nothing; if
    ``k_max`` passes run out first the last iterate is returned with
    ``converged=False``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    D = np.asarray(D, dtype=float)
    z = np.asarray(z, dtype=float).reshape(-1)
    p = D.shape[1]
    xi = least_squares(D, z)
    active = np.ones(p, dtype=bool)
    iterations = 0
    converged = False
    for k in range(1, k_max + 1):
        small = active & (np.abs(xi) < lam)
        if not small.any():
            converged = True
            break
        active &= ~small
        xi = np.zeros(p)
        if active.any():
            xi[active] = least_squares(D[:, active], z)
        iterations = k
    else:
        converged = bool(np.all(np.abs(xi[active]) >= lam))
    return StlsResult(xi, np.flatnonzero(active), iterations, float(lam), converged)


def stls_multi(D, Z, lam: float, k_max: int = 10) -> list:
    """Fit each column of ``Z`` independently."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    return [stls(D, Z[:, k], lam, k_max) for k in range(Z.shape[1])]
