"""Dense real linear-algebra primitives shared by the SDP core and synthesis.

Symmetric matrices are plain ``numpy`` arrays.  Functions that consume a
symmetric matrix read only its lower triangle, so the result never depends
on which triangle the caller filled in.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

SQRT2 = np.sqrt(2.0)


class SolverFailure(RuntimeError):
    """A dense factorization did not converge."""


class NotPositiveDefinite(ValueError):
    """Cholesky broke down; ``pivot`` is the 0-based index of the failing pivot."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


def sym_from_lower(M) -> np.ndarray:
    """Return the symmetric matrix whose lower triangle is that of ``M``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    L = np.tril(M)
    return L + np.tril(M, -1).T


def sym(M) -> np.ndarray:
    """Symmetric part (M + M^T)/2."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def sym_eig(M) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns ascending eigenvalues ``w`` and orthogonal ``V`` with
    ``M @ V == V @ diag(w)``.  LAPACK ``syevd`` is deterministic for a fixed
    input, which keeps certificates reproducible.
    """
    S = sym_from_lower(M)
    if not np.all(np.isfinite(S)):
        raise ValueError("matrix has non-finite entries")
    try:
        w, V = np.linalg.eigh(S, UPLO="L")
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise SolverFailure(str(exc)) from exc
    return w, V


def min_eig(M) -> float:
    """Smallest eigenvalue of a symmetric matrix (0 for an empty matrix)."""
    S = sym_from_lower(M)
    if S.size == 0:
        return 0.0
    return float(sla.eigvalsh(S, subset_by_index=[0, 0], check_finite=True)[0])


def null_space_basis(M, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis of ``Ker M`` from the SVD.

    Singular values below ``tol * sigma_max`` count as zero.  A full
    column-rank input yields an ``(ncols, 0)`` array.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    ncols = M.shape[1]
    if M.size == 0 or not np.any(M):
        return np.eye(ncols)
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > tol * s[0]))
    return vt[rank:].T.copy()


def chol(M) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == M``.

    Raises :class:`NotPositiveDefinite` carrying the failing pivot.
    """
    S = sym_from_lower(M)
    if S.size == 0:
        return S.copy()
    c, info = lapack.dpotrf(S, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf argument {-info} invalid")
    return c


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def _lower_colmajor(n: int) -> tuple[np.ndarray, np.ndarray]:
    cols, rows = np.triu_indices(n)  # (j, i) with i >= j, sorted by column
    return rows, cols


def svec(M) -> np.ndarray:
    """Isometric vectorization: lower triangle column by column, off-diagonals times sqrt(2)."""
    S = sym_from_lower(M)
    rows, cols = _lower_colmajor(S.shape[0])
    v = S[rows, cols].copy()
    v[rows != cols] *= SQRT2
    return v


def smat(v) -> np.ndarray:
    """Inverse of :func:`svec`."""
    v = np.asarray(v, dtype=float).ravel()
    n = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if svec_dim(n) != v.size:
        raise ValueError(f"length {v.size} is not a triangular number")
    rows, cols = _lower_colmajor(n)
    vals = v.copy()
    vals[rows != cols] /= SQRT2
    M = np.zeros((n, n))
    M[rows, cols] = vals
    M[cols, rows] = vals
    return M


def svec_basis(n: int) -> np.ndarray:
    """Stack of symmetric matrices E_k with ``smat(v) == sum v_k E_k``."""
    rows, cols = _lower_colmajor(n)
    E = np.zeros((rows.size, n, n))
    k = np.arange(rows.size)
    scale = np.where(rows == cols, 1.0, 1.0 / SQRT2)
    E[k, rows, cols] = scale
    E[k, cols, rows] = scale
    return E


def he(M) -> np.ndarray:
    """Hermitian operator He{M} = M + M^T."""
    M = np.asarray(M, dtype=float)
    return M + M.T
