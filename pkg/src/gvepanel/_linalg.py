"""Shared linear solves: QR with column pivoting plus a condition gate.

Explicit inverses are never formed; every square solve goes through a pivoted
QR factorization whose diagonal ratio serves as the condition estimate. A
ratio above ``COND_LIMIT`` raises :class:`~gvepanel.errors.RankError`.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import RankError

COND_LIMIT = 1e10


def qr_solve(a: np.ndarray, b: np.ndarray, label: str = "matrix") -> np.ndarray:
    """Solve ``a @ x = b`` for square ``a`` via pivoted QR.

    Raises RankError (with the diagonal-ratio condition estimate) when the
    factorization reveals numerical rank deficiency.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"qr_solve needs a square matrix, got {a.shape}")
    if a.shape[0] == 0:
        return np.zeros_like(np.asarray(b, dtype=float))
    q, r, piv = scipy.linalg.qr(a, pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[-1] == 0.0 or diag[0] == 0.0:
        raise RankError(f"{label} is singular (zero pivot)", cond=float("inf"))
    cond = float(diag[0] / diag[-1])
    if cond > COND_LIMIT:
        raise RankError(
            f"{label} is numerically rank deficient (condition estimate {cond:.3e})",
            cond=cond,
        )
    b = np.asarray(b, dtype=float)
    squeeze = b.ndim == 1
    rhs = b[:, None] if squeeze else b
    z = scipy.linalg.solve_triangular(r, q.T @ rhs, lower=False)
    x = np.empty_like(z)
    x[piv, :] = z
    return x[:, 0] if squeeze else x


def cond_estimate(a: np.ndarray) -> float:
    """Diagonal-ratio condition estimate from a pivoted QR of ``a``."""
    _, r, _ = scipy.linalg.qr(np.asarray(a, dtype=float), pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[-1] == 0.0:
        return float("inf")
    return float(diag[0] / diag[-1])
