"""Hermitian generalized eigendecomposition and regularized solves.

All functions broadcast over leading axes, so a stack of per-bin matrices
``(bins, D, D)`` is handled in one call.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LAMBDA_MIN = 1e-9
LAMBDA_MAX = 1e-4
SINGULAR_FLOOR = 1e-10


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """Raised when a loaded matrix is not numerically positive definite."""

    def __init__(self, message: str, bins: np.ndarray | None = None):
        super().__init__(message)
        self.bins = bins


def hermitian(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def _trace(A: np.ndarray) -> np.ndarray:
    return np.real(np.trace(A, axis1=-2, axis2=-1))


@dataclass
class GevdResult:
    """Generalized eigenpairs of ``(A, B)``, eigenvalues descending.

    ``whitening`` is the lower Cholesky factor ``L`` of the (possibly
    floored) ``B``; ``eigenvectors = L^{-H} U`` with ``U`` unitary.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    whitening: np.ndarray
    whitened_vectors: np.ndarray
    warnings: list = field(default_factory=list)


def _cholesky_floored(B: np.ndarray, warnings: list) -> np.ndarray:
    """Batched Cholesky; matrices that fail get ``1e-10 * trace/dim * I`` added."""
    B = hermitian(B)
    D = B.shape[-1]
    flat = B.reshape(-1, D, D)
    out = np.empty_like(flat)
    for i, b in enumerate(flat):
        try:
            out[i] = np.linalg.cholesky(b)
        except np.linalg.LinAlgError:
            floor = SINGULAR_FLOOR * max(np.real(np.trace(b)), 0.0) / D
            if floor == 0.0:
                floor = SINGULAR_FLOOR
            warnings.append(f"B[{i}] numerically singular; floored by {floor:.3g}*I")
            logger.warning(warnings[-1])
            b = b + floor * np.eye(D)
            try:
                out[i] = np.linalg.cholesky(b)
            except np.linalg.LinAlgError:
                # eigenvalue clipping as a last resort
                w, V = np.linalg.eigh(b)
                w = np.maximum(w, floor)
                out[i] = np.linalg.cholesky(hermitian((V * w) @ V.conj().T))
    return out.reshape(B.shape)


def gevd(A: np.ndarray, B: np.ndarray) -> GevdResult:
    """Solve ``A q = lam B q`` by Cholesky whitening of ``B`` and a Hermitian EVD."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.shape != B.shape or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"shape mismatch: A {A.shape}, B {B.shape}")
    warnings: list = []
    L = _cholesky_floored(B, warnings)
    # C = L^{-1} A L^{-H}
    Y = np.linalg.solve(L, hermitian(A))
    C = np.linalg.solve(L, np.conj(np.swapaxes(Y, -1, -2)))
    lam, U = np.linalg.eigh(hermitian(C))
    # descending order; eigh returns ascending, flipping keeps ties in index order
    lam = lam[..., ::-1]
    U = U[..., ::-1]
    Q = np.linalg.solve(np.conj(np.swapaxes(L, -1, -2)), U)
    return GevdResult(lam, Q, L, U, warnings)


def lowrank_target(S_x: np.ndarray, S_v: np.ndarray, rank: int) -> np.ndarray:
    """Rank-``rank`` target covariance from the GEVD of ``(S_x, S_v)``.

    ``L U_r diag(max(lam_i - 1, 0)) U_r^H L^H`` over the ``rank`` largest
    whitened eigenvalues.
    """
    D = S_x.shape[-1]
    if not 1 <= rank <= D:
        raise ValueError(f"rank must lie in [1, {D}], got {rank}")
    res = gevd(S_x, S_v)
    gain = np.maximum(res.eigenvalues[..., :rank] - 1.0, 0.0)
    T = res.whitening @ res.whitened_vectors[..., :rank]
    S_d = (T * gain[..., None, :]) @ np.conj(np.swapaxes(T, -1, -2))
    return hermitian(S_d)


def loaded_solve(S: np.ndarray, lam, rhs: np.ndarray, bins: np.ndarray | None = None
                 ) -> np.ndarray:
    """Solve ``(S + lam I) w = rhs`` with a Cholesky factorization.

    ``S`` is ``(..., D, D)``, ``lam`` broadcasts against the leading axes and
    ``rhs`` is ``(..., D)`` or ``(..., D, n)``.
    """
    S = np.asarray(S)
    D = S.shape[-1]
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("loading must be non-negative")
    A = hermitian(S) + lam[..., None, None] * np.eye(D)
    vector = rhs.ndim == S.ndim - 1
    b = rhs[..., None] if vector else rhs
    try:
        Lc = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bad = []
        for idx in np.ndindex(A.shape[:-2]):
            try:
                np.linalg.cholesky(A[idx])
            except np.linalg.LinAlgError:
                bad.append(idx[0] if len(idx) == 1 else idx)
        named = np.asarray(bins)[bad] if bins is not None and bad and np.ndim(bad[0]) == 0 else bad
        raise IndefiniteMatrixError(f"S + lambda*I is not positive definite at bin(s) {list(named)}",
                                    np.asarray(named)) from None
    y = np.linalg.solve(Lc, b)
    w = np.linalg.solve(np.conj(np.swapaxes(Lc, -1, -2)), y)
    return w[..., 0] if vector else w


def diag_loading_lambda(S_d_est: np.ndarray, lambda_min: float = LAMBDA_MIN,
                        lambda_max: float = LAMBDA_MAX) -> np.ndarray:
    """Loading clamped to ``[lambda_min, lambda_max]`` around ``trace(S_d_est)``."""
    if lambda_min > lambda_max:
        raise ValueError(f"lambda_min {lambda_min} exceeds lambda_max {lambda_max}")
    return np.minimum(lambda_max, np.maximum(lambda_min, _trace(np.asarray(S_d_est))))
