"""Dense linear-algebra kernels used by every decomposer.

Thin, shape-disciplined wrappers around LAPACK via numpy/scipy plus the
tensor reshaping primitives (unfolding, folding, mode-n products) that
the tensor decompositions are built from.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import RankError


def svd(a: np.ndarray, rank: int | None = None):
    """Singular value decomposition ``a ~ U @ diag(S) @ V.T``.

    Returns ``(U, S, V)`` with ``U: (M, k)``, ``S: (k,)`` descending
    and ``V: (N, k)``, where ``k = min(M, N)`` or ``rank`` if given.
    """
    if a.ndim != 2:
        raise RankError(f"svd expects a matrix, got shape {a.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if rank is not None:
        if not 1 <= rank <= min(a.shape):
            raise RankError(f"svd rank {rank} outside [1, {min(a.shape)}]")
        u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    return u, s, vt.T


def qr_pivoted(a: np.ndarray, rank: int | None = None):
    """Column-pivoted QR with the permutation folded back into R.

    Returns ``(Q, R)`` with ``Q: (M, k)`` orthonormal and ``R: (k, N)``
    such that ``Q @ R ~ a`` directly (no external permutation).  With
    ``rank`` given, keeps the ``rank`` leading pivots, which are the
    most linearly independent columns of ``a``.
    """
    if a.ndim != 2:
        raise RankError(f"qr expects a matrix, got shape {a.shape}")
    q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    inverse = np.empty_like(piv)
    inverse[piv] = np.arange(len(piv))
    r = r[:, inverse]
    if rank is not None:
        if not 1 <= rank <= min(a.shape):
            raise RankError(f"qr rank {rank} outside [1, {min(a.shape)}]")
        q, r = q[:, :rank], r[:rank]
    return q, r


def unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: axis ``mode`` becomes the rows."""
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def fold(matrix: np.ndarray, mode: int, shape: tuple) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given shape."""
    rest = [s for i, s in enumerate(shape) if i != mode]
    return np.moveaxis(matrix.reshape([shape[mode]] + rest), 0, mode)


def mode_n_product(tensor: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    """Contract ``matrix @ unfold(tensor, mode)`` and fold back.

    ``matrix`` has shape ``(J, I_mode)``; the result replaces axis
    ``mode`` of ``tensor`` with extent ``J``.
    """
    if matrix.shape[1] != tensor.shape[mode]:
        raise RankError(
            f"mode-{mode} product: matrix {matrix.shape} does not match "
            f"tensor {tensor.shape}")
    out_shape = list(tensor.shape)
    out_shape[mode] = matrix.shape[0]
    return fold(matrix @ unfold(tensor, mode), mode, tuple(out_shape))


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Frobenius-norm relative reconstruction error."""
    denom = np.linalg.norm(exact)
    if denom == 0:
        return float(np.linalg.norm(approx))
    return float(np.linalg.norm(approx - exact) / denom)
