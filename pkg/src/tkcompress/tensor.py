"""Dense tensor kernels: unfolding, mode products, SVD, norms.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order.  Model
weights are stored as float32; every kernel in this module accumulates in
float64 internally and casts the result back to the promoted dtype of its
float inputs, so float32 data stays float32 on the way out while float64
inputs get a full-precision path (used by the finite-difference checks).

Unfolding convention
--------------------
``unfold(t, mode)`` puts ``mode`` on the rows.  The columns enumerate the
remaining modes in cyclic order ``mode+1, mode+2, ..., mode-1`` (wrapping),
with the cyclically-first mode varying slowest.  ``fold`` inverts exactly
this layout, and ``mode_n_product`` is defined through the pair, so the
three are consistent by construction.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "SvdResult",
    "as_tensor",
    "unfold",
    "fold",
    "mode_n_product",
    "svd",
    "frobenius_norm",
]

_F32 = np.float32
_F64 = np.float64


def _out_dtype(*arrays: np.ndarray) -> np.dtype:
    """float64 if any input is 64-bit, else float32 (the storage width)."""
    dt = np.result_type(*arrays)
    return np.dtype(_F64) if dt == _F64 else np.dtype(_F32)


def as_tensor(data, dtype=None) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous floating ndarray.

    Raises ValueError on empty axes; tensors here always have shape
    entries >= 1.
    """
    arr = np.ascontiguousarray(data)
    if arr.dtype not in (_F32, _F64):
        arr = arr.astype(_F32)
    if dtype is not None:
        arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim > 0 and min(arr.shape) < 1:
        raise ValueError(f"tensor axes must be >= 1, got shape {arr.shape}")
    return arr


def _cyclic_axes(order: int, mode: int) -> list[int]:
    return [(mode + k) % order for k in range(order)]


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Matricize ``t`` along ``mode`` -> (shape[mode], prod(rest)) matrix."""
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for order-{t.ndim} tensor")
    axes = _cyclic_axes(t.ndim, mode)
    return np.transpose(t, axes).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Exact inverse of :func:`unfold` for the same mode and shape."""
    m = np.asarray(m)
    shape = tuple(int(d) for d in shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for shape {shape}")
    if m.ndim != 2:
        raise ValueError("fold expects a matrix")
    axes = _cyclic_axes(len(shape), mode)
    rest = int(np.prod([shape[a] for a in axes[1:]], dtype=np.int64))
    if m.shape != (shape[mode], rest):
        raise ValueError(
            f"matrix shape {m.shape} inconsistent with mode {mode} of {shape}"
        )
    permuted = m.reshape([shape[a] for a in axes])
    return np.transpose(permuted, np.argsort(axes))


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Contract matrix ``m`` (rows_out x shape[mode]) onto ``t`` at ``mode``."""
    t = np.asarray(t)
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("mode_n_product expects a matrix")
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for order-{t.ndim} tensor")
    if m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix columns {m.shape[1]} != tensor dim {t.shape[mode]} at mode {mode}"
        )
    out_dtype = _out_dtype(t, m)
    prod = m.astype(_F64) @ unfold(t, mode).astype(_F64)
    new_shape = list(t.shape)
    new_shape[mode] = m.shape[0]
    return fold(prod, mode, new_shape).astype(out_dtype)


class SvdResult(NamedTuple):
    """Full thin SVD ``u @ diag(s) @ vt`` with K = min(M, N) components."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def svd(m: np.ndarray) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Singular values come back non-increasing.  Each left singular vector is
    flipped, together with its right partner, so that its first nonzero
    entry is non-negative; this pins the output for reproducible runs.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("svd expects a matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(m.astype(_F64), full_matrices=False)
    for j in range(u.shape[1]):
        nz = np.flatnonzero(u[:, j])
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return SvdResult(u, s, vt)


def frobenius_norm(t: np.ndarray) -> float:
    """sqrt of the sum of squared entries, accumulated in float64."""
    t = np.asarray(t, dtype=_F64)
    return float(np.sqrt(np.sum(t * t)))
