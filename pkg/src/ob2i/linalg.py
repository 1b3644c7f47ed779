"""Small dense linear algebra used by LSVI-UCB and the posterior oracle.

Everything here is a pure function of numpy arrays. Gram matrices are SPD by
construction, so solves go through a Cholesky factorization and a failed
factorization is reported as corruption rather than silently falling back.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

from . import DimensionError, InvalidInputError, NotSPDError, NumericalDegeneracyError

RESIDUAL_RTOL = 1e-8


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of ``A``; raises NotSPDError on a bad pivot."""
    A = _as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"A must be square, got {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12):
        raise NotSPDError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(str(exc)) from exc


def spd_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``."""
    b = _as_vector(b, "b")
    L = cholesky(A)
    if L.shape[0] != b.shape[0]:
        raise DimensionError(f"A is {L.shape}, b has length {b.shape[0]}")
    return cho_solve((L, True), b)


def spd_inverse(A) -> np.ndarray:
    L = cholesky(A)
    inv = cho_solve((L, True), np.eye(L.shape[0]))
    return 0.5 * (inv + inv.T)


def ridge_solve(Phi, targets, lam: float) -> np.ndarray:
    """Minimizer of ``sum (y_i - w.phi_i)^2 + lam * |w|^2``.

    ``Phi`` may have zero rows, in which case the answer is the zero vector.
    """
    if not lam > 0 or not np.isfinite(lam):
        raise InvalidInputError(f"lambda must be positive and finite, got {lam}")
    Phi = _as_matrix(Phi, "Phi")
    targets = _as_vector(targets, "targets")
    m, d = Phi.shape
    if d < 1:
        raise DimensionError("Phi must have at least one column")
    if targets.shape[0] != m:
        raise DimensionError(f"Phi has {m} rows, targets has {targets.shape[0]}")
    gram = Phi.T @ Phi + lam * np.eye(d)
    return spd_solve(gram, Phi.T @ targets)


def rank1_inverse_update(Ainv, phi) -> np.ndarray:
    """Return ``(A + phi phi^T)^-1`` given ``Ainv = A^-1`` (Sherman-Morrison)."""
    Ainv = _as_matrix(Ainv, "Ainv")
    phi = _as_vector(phi, "phi")
    if Ainv.shape != (phi.shape[0], phi.shape[0]):
        raise DimensionError(f"Ainv is {Ainv.shape}, phi has length {phi.shape[0]}")
    u = Ainv @ phi
    denom = 1.0 + phi @ u
    if not denom > 0:
        raise NumericalDegeneracyError(f"Sherman-Morrison denominator {denom} <= 0")
    out = Ainv - np.outer(u, u) / denom
    return 0.5 * (out + out.T)


def quad_form(Ainv, phi) -> float:
    """``phi^T Ainv phi``, clamped at zero against round-off."""
    Ainv = _as_matrix(Ainv, "Ainv")
    phi = _as_vector(phi, "phi")
    if Ainv.shape != (phi.shape[0], phi.shape[0]):
        raise DimensionError(f"Ainv is {Ainv.shape}, phi has length {phi.shape[0]}")
    return max(float(phi @ Ainv @ phi), 0.0)
