"""Pointwise symmetric-tensor algebra for d = 1, 2.

Symmetric tensors are stored packed (upper triangle, row-major) along the
leading axis of an array, so one array holds a tensor per grid cell:

    d = 1 : [E11]
    d = 2 : [E11, E12, E22]

All functions broadcast over trailing axes.  Full (non-symmetric) matrices
are stored as arrays of shape ``(d, d, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PACKED = {1: ((0, 0),), 2: ((0, 0), (0, 1), (1, 1))}
_WEIGHTS = {1: np.array([1.0]), 2: np.array([1.0, 2.0, 1.0])}
_DIAG = {1: (0,), 2: (0, 2)}


def check_dim(d: int) -> int:
    if d not in (1, 2):
        raise ValueError(f"spatial dimension must be 1 or 2, got {d}")
    return d


def nsym(d: int) -> int:
    return check_dim(d) * (d + 1) // 2


def dim_of_packed(ncomp: int) -> int:
    """Spatial dimension implied by a packed component count."""
    if ncomp == 1:
        return 1
    if ncomp == 3:
        return 2
    raise ValueError(f"packed symmetric tensor with {ncomp} entries is not d=1 or d=2")


def packed_index(d: int):
    return _PACKED[check_dim(d)]


def frobenius_weights(d: int) -> np.ndarray:
    """Weights turning packed entry products into the full Frobenius product."""
    return _WEIGHTS[check_dim(d)]


def _wshape(w, ndim):
    return w.reshape((-1,) + (1,) * (ndim - 1))


def ddot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Frobenius product A:B of packed symmetric tensors."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    w = _wshape(frobenius_weights(dim_of_packed(A.shape[0])), A.ndim)
    return np.sum(w * A * B, axis=0)


def norm(E: np.ndarray) -> np.ndarray:
    return np.sqrt(ddot(E, E))


def trace(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    d = dim_of_packed(E.shape[0])
    return sum(E[k] for k in _DIAG[d])


def identity(d: int, shape=()) -> np.ndarray:
    out = np.zeros((nsym(d),) + tuple(shape))
    for k in _DIAG[d]:
        out[k] = 1.0
    return out


def unpack(E: np.ndarray) -> np.ndarray:
    """Packed symmetric tensor -> full ``(d, d, ...)`` matrix."""
    E = np.asarray(E, dtype=float)
    d = dim_of_packed(E.shape[0])
    out = np.empty((d, d) + E.shape[1:])
    for k, (i, j) in enumerate(_PACKED[d]):
        out[i, j] = E[k]
        out[j, i] = E[k]
    return out


def sym(A: np.ndarray) -> np.ndarray:
    """Symmetric part (A + A^T)/2 of a full matrix, returned packed."""
    A = np.asarray(A, dtype=float)
    d = check_dim(A.shape[0])
    if A.shape[1] != d:
        raise ValueError("sym expects a square (d, d, ...) array")
    return np.stack([0.5 * (A[i, j] + A[j, i]) for i, j in _PACKED[d]])


def dev_sph_tr(E: np.ndarray):
    """Split E into deviatoric and spherical parts; also return tr E.

    In 1-D the deviator vanishes identically.
    """
    E = np.asarray(E, dtype=float)
    d = dim_of_packed(E.shape[0])
    tr = trace(E)
    sph = identity(d, tr.shape) * (tr / d)
    return E - sph, sph, tr


def boxtimes(GA: np.ndarray, GB: np.ndarray, weights=None) -> np.ndarray:
    """Component-summed outer product of gradient blocks.

    ``GA`` and ``GB`` have shape ``(ncomp, d, ...)``: the gradient of every
    component of a field.  Returns ``R_ij = sum_c w_c GA[c, i] GB[c, j]`` of
    shape ``(d, d, ...)``.  For packed symmetric fields pass the Frobenius
    weights so that off-diagonal components count twice.
    """
    GA = np.asarray(GA, dtype=float)
    GB = np.asarray(GB, dtype=float)
    if GA.shape[0] != GB.shape[0]:
        raise ValueError(
            f"component count mismatch: {GA.shape[0]} vs {GB.shape[0]}")
    if GA.shape[1:] != GB.shape[1:]:
        raise ValueError("gradient blocks must share dimension and grid shape")
    if weights is None:
        weights = np.ones(GA.shape[0])
    w = np.asarray(weights, dtype=float)
    return np.einsum("c,ci...,cj...->ij...", w, GA, GB)


def matrix_trace(A: np.ndarray) -> np.ndarray:
    return sum(A[i, i] for i in range(A.shape[0]))


@dataclass(frozen=True)
class SymTensor:
    """A single symmetric tensor, packed.  Mostly for examples and tests."""

    entries: tuple
    d: int

    def __post_init__(self):
        check_dim(self.d)
        if len(self.entries) != nsym(self.d):
            raise ValueError(
                f"d={self.d} needs {nsym(self.d)} packed entries, got {len(self.entries)}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("SymTensor entries must be finite")

    @classmethod
    def from_matrix(cls, A) -> "SymTensor":
        A = np.asarray(A, dtype=float)
        return cls(tuple(float(x) for x in sym(A)), A.shape[0])

    @property
    def packed(self) -> np.ndarray:
        return np.array(self.entries, dtype=float)

    def matrix(self) -> np.ndarray:
        return unpack(self.packed)
