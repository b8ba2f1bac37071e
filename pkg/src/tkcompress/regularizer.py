"""Soft orthogonality penalty on factor matrices.

For a factor ``u`` with r columns the penalty is

    (rho / r) * (||u^T u - I_r||_F^2 + ||u u^T - I_n||_F^2)

which is zero exactly for square orthogonal ``u``.  Tall matrices with
orthonormal columns keep the unavoidable floor ``(rho / r) * (n - r)``
from the co-Gram term; both residuals are charged unconditionally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = ["OrthoConfig", "ortho_penalty", "ortho_penalty_grad", "total_loss"]


@dataclass(frozen=True)
class OrthoConfig:
    """rho scales each penalty; lam weights their sum in the total loss."""

    rho: float = 0.01
    lam: float = 1.0

    def __post_init__(self):
        if self.rho < 0 or self.lam < 0:
            raise ValueError("rho and lam must be non-negative")


def ortho_penalty(u: np.ndarray, rho: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] < 1:
        raise ValueError("expected a matrix with at least one column")
    n, r = u.shape
    gram = u.T @ u - np.eye(r)
    cogram = u @ u.T - np.eye(n)
    return (rho / r) * float(np.sum(gram * gram) + np.sum(cogram * cogram))


def ortho_penalty_grad(u: np.ndarray, rho: float) -> np.ndarray:
    """d/du of :func:`ortho_penalty`: (4 rho / r) (u (u^T u - I) + (u u^T - I) u)."""
    u64 = np.asarray(u, dtype=np.float64)
    if u64.ndim != 2 or u64.shape[1] < 1:
        raise ValueError("expected a matrix with at least one column")
    n, r = u64.shape
    gram = u64.T @ u64 - np.eye(r)
    cogram = u64 @ u64.T - np.eye(n)
    g = (4.0 * rho / r) * (u64 @ gram + cogram @ u64)
    dt = np.asarray(u).dtype
    return g.astype(dt) if dt in (np.float32, np.float64) else g


def total_loss(ce: float, penalties: Iterable[float], lam: float) -> float:
    """Combined objective: data loss plus lam times the summed penalties."""
    return float(ce) + lam * float(sum(penalties))
