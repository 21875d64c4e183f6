"""Small dense algebra on K x K order matrices and m x K tall matrices.

Conventions: per-row quantities are row vectors, order matrices act by
right-multiplication, and the inner product of two tall matrices is
normalized by their row count, ``<a, b> = a.T @ b / m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

#: Pivot threshold below which a matrix is not treated as positive definite.
PD_PIVOT_TOL = 1e-12
#: Acceptance window for slightly indefinite covariance estimates.
PSD_TOL = 1e-10
SYM_TOL = 1e-12


class NumericsError(ValueError):
    """Base class for numerical precondition failures."""


class DimensionError(NumericsError):
    pass


class NotSymmetricError(NumericsError):
    pass


class NotPSDError(NumericsError):
    pass


class NotPositiveDefiniteError(NumericsError):
    """Raised by :func:`chol_lower` with the index of the failing pivot."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class RankDeficiencyError(NumericsError):
    """The Gram-Schmidt residual lost column rank (degenerate dynamics)."""


def _check_symmetric(C: np.ndarray, tol: float = SYM_TOL) -> None:
    C = np.asarray(C)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {C.shape}")
    scale = max(1.0, float(np.max(np.abs(C)))) if C.size else 1.0
    if np.max(np.abs(C - C.T), initial=0.0) > tol * scale:
        raise NotSymmetricError("matrix is not symmetric")


def sym(C: np.ndarray) -> np.ndarray:
    return 0.5 * (C + C.T)


def inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Normalized inner product ``a.T @ b / m`` of two m x K matrices."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"row counts differ: {a.shape} vs {b.shape}")
    return a.T @ b / a.shape[0]


def psd_sqrt(C: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric square root of a PSD matrix.

    Eigenvalues in ``[-tol, 0)`` are clamped to zero; anything more negative
    is rejected.
    """
    C = np.asarray(C, dtype=float)
    _check_symmetric(C, tol=max(SYM_TOL, tol))
    w, U = np.linalg.eigh(sym(C))
    if w.size and w[0] < -tol:
        raise NotPSDError(f"min eigenvalue {w[0]:.3e} below -{tol:g}")
    w = np.clip(w, 0.0, None)
    return sym((U * np.sqrt(w)) @ U.T)


def chol_lower(C: np.ndarray, pivot_tol: float = PD_PIVOT_TOL) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == C``.

    Implemented as an explicit column loop so that a failing pivot can be
    reported by index.
    """
    C = np.asarray(C, dtype=float)
    _check_symmetric(C)
    K = C.shape[0]
    L = np.zeros_like(C)
    for j in range(K):
        piv = C[j, j] - L[j, :j] @ L[j, :j]
        if not piv > pivot_tol:
            raise NotPositiveDefiniteError(
                f"matrix not positive definite at pivot {j} (value {piv:.3e})", pivot=j
            )
        L[j, j] = np.sqrt(piv)
        L[j + 1:, j] = (C[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue modulus of a general (non-symmetric) square matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericsError("non-finite entries")
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericsError(f"eigen-solver did not converge: {exc}") from exc
    return float(np.max(np.abs(ev))) if ev.size else 0.0


def psd_order_margin(X: np.ndarray, Y: np.ndarray, tol: float = 1e-10) -> float:
    """Minimum eigenvalue of ``Y - X``; ``X <= Y`` within eps iff margin >= -eps."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _check_symmetric(X, tol)
    _check_symmetric(Y, tol)
    return float(np.linalg.eigvalsh(sym(Y - X))[0])


def project_out(b: np.ndarray, basis: Sequence[np.ndarray]) -> np.ndarray:
    """Residual of ``b`` after removing its components along ``basis``.

    Two classical Gram-Schmidt passes; a single pass loses orthogonality
    when the residual is much smaller than ``b``.
    """
    r = np.array(b, dtype=float, copy=True)
    for _ in range(2):
        for v in basis:
            r -= v @ inner(v, r)
    return r


def gs_block(b: np.ndarray, basis: Sequence[np.ndarray], rank_tol: float = 1e-10) -> np.ndarray:
    """Block Gram-Schmidt step ``GS(b | basis)``.

    Returns ``v`` with ``<v, v> = I``, ``<v, v_i> = 0`` and
    ``b = sum_i v_i <v_i, b> + v <v, b>``. The residual is normalized by the
    inverse transpose of the Cholesky factor of its Gram matrix.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise DimensionError(f"expected an m x K matrix, got shape {b.shape}")
    for v in basis:
        if v.shape[0] != b.shape[0]:
            raise DimensionError(f"basis row count {v.shape[0]} != {b.shape[0]}")
    R = project_out(b, basis)
    G = sym(inner(R, R))
    w = np.linalg.eigvalsh(G)
    if w.size and w[0] <= rank_tol:
        raise RankDeficiencyError(
            f"Gram-Schmidt residual is rank deficient (min Gram eigenvalue {w[0]:.3e})"
        )
    L = chol_lower(G, pivot_tol=0.0)
    return np.linalg.solve(L, R.T).T


def gs_block_reduced(b: np.ndarray, basis: Sequence[np.ndarray], rel_tol: float = 1e-24) -> np.ndarray:
    """Rank-revealing variant of :func:`gs_block`.

    Keeps only residual directions whose Gram eigenvalue exceeds
    ``rel_tol * max(1, ||<b, b>||)``; the returned block may have fewer than
    K columns (possibly zero). Used where iterates are structurally rank
    deficient, e.g. softmax iterates whose rows sum to zero.

    The default threshold sits below eigenvalue rounding, so only exactly
    null directions are guaranteed to be dropped; a rounding-level direction
    may survive as an extra orthonormal column. Genuine directions can be
    that small late in a converging iteration, so erring towards keeping
    them is deliberate.
    """
    b = np.asarray(b, dtype=float)
    R = project_out(b, basis)
    G = sym(inner(R, R))
    scale = max(1.0, float(np.linalg.norm(inner(b, b), 2)))
    w, U = np.linalg.eigh(G)
    keep = w > rel_tol * scale
    if not np.any(keep):
        return np.zeros((b.shape[0], 0))
    U = U[:, keep][:, ::-1]
    w = w[keep][::-1]
    v = (R @ U) / np.sqrt(w)
    # one more projection pass keeps near-degenerate directions orthogonal
    v = project_out(v, basis)
    Gv = sym(inner(v, v))
    return np.linalg.solve(chol_lower(Gv, pivot_tol=0.0), v.T).T


@dataclass(frozen=True)
class SeededRng:
    """Deterministic, splittable random stream.

    A stream is addressed by ``(seed, path)``; :meth:`child` extends the
    path, so draws never depend on how work is scheduled across threads.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *index: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)
