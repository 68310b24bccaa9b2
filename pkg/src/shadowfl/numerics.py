"""Dense symmetric linear algebra used by the filtering and verification code.

All matrices are small (at most a few hundred rows), so everything is a thin,
validated wrapper over LAPACK via :mod:`numpy.linalg`.
"""

from __future__ import annotations

from dataclasses import dataclass
import warnings

import numpy as np

EIGEN_FLOOR = 1e-9
SYMMETRY_TOL = 1e-10


class NumericsError(ValueError):
    pass


class NonSymmetric(NumericsError):
    pass


class NonFinite(NumericsError):
    pass


class NotPSD(NumericsError):
    pass


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EigenDecomp:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _check_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NonSymmetric(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix contains NaN or Inf")
    # tolerance is relative to the entry scale so covariances of large
    # activations are not rejected for round-off asymmetry
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol * scale:
        raise NonSymmetric(f"max |a_ij - a_ji| = {asym:.3g} exceeds {tol:g}")
    return 0.5 * (a + a.T)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive, so results do
    # not depend on LAPACK's arbitrary sign choice
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(a: np.ndarray) -> EigenDecomp:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = _check_symmetric(a)
    vals, vecs = np.linalg.eigh(a)
    order = np.argsort(vals)[::-1]
    return EigenDecomp(vals[order], _fix_signs(vecs[:, order]))


def top_k_svd(x: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """Orthonormal basis (d x k) of the top-k right singular subspace of ``x``.

    Returns ``(basis, rank_deficient)``. When ``x`` has fewer than ``k``
    nonzero singular values the basis is completed with an arbitrary
    orthonormal complement and the flag is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise NumericsError("top_k_svd expects a 2-d data matrix")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise NumericsError(f"k={k} must lie in [1, min(n, d)={min(n, d)}]")
    if not np.all(np.isfinite(x)):
        raise NonFinite("data contains NaN or Inf")
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    basis = vt[: min(k, rank)].T
    deficient = rank < k
    if deficient:
        warnings.warn(
            f"data has rank {rank} < k={k}; padding projection basis",
            RankDeficientWarning,
            stacklevel=2,
        )
        basis = _complete_basis(basis, d, k)
    return _fix_signs(basis), deficient


def _complete_basis(basis: np.ndarray, d: int, k: int) -> np.ndarray:
    cols = [basis[:, j] for j in range(basis.shape[1])]
    for j in range(d):
        if len(cols) == k:
            break
        e = np.zeros(d)
        e[j] = 1.0
        for c in cols:
            e -= (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            cols.append(e / norm)
    return np.column_stack(cols)


def inv_sqrt_psd(s: np.ndarray, floor: float = EIGEN_FLOOR, clamp: bool = True) -> np.ndarray:
    """Symmetric inverse square root of a PSD matrix.

    Eigenvalues below ``floor`` are clamped up to it; with ``clamp=False``
    they raise :class:`NotPSD` instead.
    """
    eig = sym_eig(s)
    vals = eig.eigenvalues
    if np.min(vals) < floor:
        if not clamp:
            raise NotPSD(f"minimum eigenvalue {np.min(vals):.3g} below floor {floor:g}")
        vals = np.maximum(vals, floor)
    v = eig.eigenvectors
    return (v / np.sqrt(vals)) @ v.T


def mat_exp_sym(a: np.ndarray) -> np.ndarray:
    eig = sym_eig(a)
    v = eig.eigenvectors
    return (v * np.exp(eig.eigenvalues)) @ v.T


def n_floored(s: np.ndarray, floor: float = EIGEN_FLOOR) -> int:
    """Number of eigenvalues of ``s`` that inverse square root would clamp."""
    return int(np.sum(sym_eig(s).eigenvalues < floor))
