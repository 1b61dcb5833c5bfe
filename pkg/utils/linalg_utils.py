from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from utils.errors import (
    DegenerateSpectrumError,
    DimensionError,
    NumericalError,
    OrthonormalityError,
)


DEFAULT_RCOND = 1e-12
ORTHONORMAL_TOL = 1e-6
NEGATIVE_EIG_TOL = 1e-10
SIGN_EPS = 1e-12


@dataclass(frozen=True)
class EigPair:
    """Eigenvalues in non-increasing order with matching orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def frozen_copy(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def _svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        try:
            return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"SVD did not converge: {exc}") from exc


def pseudoinverse(a: np.ndarray, tol: float = DEFAULT_RCOND) -> np.ndarray:
    a = as_matrix(a, "a")
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    u, sigma, vt = _svd(a)
    cutoff = tol * sigma[0] if sigma.size else 0.0
    keep = sigma > cutoff
    inv = np.zeros_like(sigma)
    inv[keep] = 1.0 / sigma[keep]
    return (vt.T * inv) @ u.T


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        column = out[:, j]
        significant = np.flatnonzero(np.abs(column) > SIGN_EPS)
        if significant.size and column[significant[0]] < 0:
            out[:, j] = -column
    return out


def sym_eig(g: np.ndarray) -> EigPair:
    g = as_matrix(g, "g")
    if g.shape[0] != g.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {g.shape}")
    sym = 0.5 * (g + g.T)
    try:
        values, vectors = scipy.linalg.eigh(sym, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(-values, kind="stable")
    return EigPair(values=values[order], vectors=_fix_signs(vectors[:, order]))


def least_norm_delta(w: np.ndarray, delta_y: np.ndarray) -> np.ndarray:
    """Minimum-Frobenius-norm feature change dF with dF @ W^T = dY."""
    w = as_matrix(w, "w")
    delta_y = as_matrix(delta_y, "delta_y")
    if delta_y.shape[1] != w.shape[0]:
        raise DimensionError(
            f"delta_y has {delta_y.shape[1]} columns, classifier has {w.shape[0]} rows"
        )
    return delta_y @ pseudoinverse(w.T)


def numerical_rank(a: np.ndarray, tol: float = DEFAULT_RCOND) -> int:
    a = as_matrix(a, "a")
    sigma = _svd(a)[1]
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > tol * sigma[0]))


def null_space_projector(w: np.ndarray) -> np.ndarray:
    """I - W^+ W: the orthogonal projector onto the null space of W."""
    w = as_matrix(w, "w")
    return np.eye(w.shape[1]) - pseudoinverse(w) @ w


def orthonormality_defect(v: np.ndarray) -> float:
    v = as_matrix(v, "v")
    return float(np.linalg.norm(v.T @ v - np.eye(v.shape[1])))


def check_orthonormal(v: np.ndarray, name: str = "basis", tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    v = as_matrix(v, name)
    if v.shape[1] > v.shape[0]:
        raise DimensionError(f"{name} has more columns than rows: {v.shape}")
    defect = orthonormality_defect(v)
    if defect > tol:
        raise OrthonormalityError(f"{name} is not orthonormal (defect {defect:.3e})")
    return v


def subspace_similarity(va: np.ndarray, vb: np.ndarray) -> float:
    """Mean squared cosine of the principal angles between span(va) and span(vb)."""
    va = as_matrix(va, "va")
    vb = as_matrix(vb, "vb")
    if va.shape != vb.shape:
        raise DimensionError(f"basis shapes differ: {va.shape} vs {vb.shape}")
    check_orthonormal(va, "va")
    check_orthonormal(vb, "vb")
    overlap = np.linalg.norm(va.T @ vb) ** 2 / va.shape[1]
    return float(min(max(overlap, 0.0), 1.0))


def _clean_spectrum(values: np.ndarray) -> np.ndarray:
    lam = np.asarray(values, dtype=np.float64).ravel()
    if lam.size == 0:
        raise DimensionError("spectrum is empty")
    if not np.all(np.isfinite(lam)):
        raise NumericalError("spectrum contains non-finite values")
    if np.any(lam < -NEGATIVE_EIG_TOL):
        raise NumericalError(f"spectrum has a negative eigenvalue {lam.min():.3e}")
    lam = np.where(lam < 0.0, 0.0, lam)
    if not np.any(lam > 0.0):
        raise DegenerateSpectrumError("all eigenvalues are zero")
    return lam


def spectral_energy_curve(values: np.ndarray) -> np.ndarray:
    """kappa(k) for k = 1..L; the last entry is exactly 1."""
    lam = _clean_spectrum(values)
    running = np.cumsum(lam)
    curve = running / running[-1]
    curve[-1] = 1.0
    return curve


def cumulative_spectral_energy(values: np.ndarray, k: int) -> float:
    lam = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= k <= lam.size:
        raise DimensionError(f"k must lie in [1, {lam.size}], got {k}")
    return float(spectral_energy_curve(lam)[k - 1])


def modified_gram_schmidt(v: np.ndarray) -> np.ndarray:
    q = as_matrix(v, "v").copy()
    for j in range(q.shape[1]):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm <= SIGN_EPS:
            raise OrthonormalityError(f"column {j} is linearly dependent")
        q[:, j] /= norm
    return q


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def sym_eigvals(g: np.ndarray) -> np.ndarray:
    """Eigenvalues of the symmetrized matrix in non-increasing order."""
    g = as_matrix(g, "g")
    if g.shape[0] != g.shape[1]:
        raise DimensionError(f"sym_eigvals needs a square matrix, got {g.shape}")
    try:
        values = scipy.linalg.eigvalsh(0.5 * (g + g.T), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"eigenvalue solver did not converge: {exc}") from exc
    return values[::-1].copy()
