"""Low-rank factorization of layer weights.

Square ``D x D x S x T`` convolution kernels are factorized along their
channel modes (Tucker-2): a core tensor ``D x D x R3 x R4`` plus channel
factor matrices ``S x R3`` and ``T x R4``.  Fully connected weights are
split by truncated SVD into ``a = U S`` (M x R) and ``b = V^T`` (R x N).

The Tucker-2 fit is truncated HOSVD initialization refined with HOOI
(alternating orthogonal iteration); the relative reconstruction error is
non-increasing across iterations, which the tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor, frobenius_norm, mode_n_product, svd, unfold

__all__ = [
    "ConvLayerSpec",
    "FcLayerSpec",
    "FactorizedConv",
    "FactorizedFc",
    "tsvd_truncate",
    "tucker2_decompose",
    "tucker2_reconstruct",
    "factorize_conv_layer",
    "factorize_fc_layer",
]


@dataclass
class ConvLayerSpec:
    """Dense convolution layer: kernel ``D x D x S x T`` plus stride/padding."""

    kernel: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = as_tensor(self.kernel)
        if self.kernel.ndim != 4:
            raise ValueError(f"conv kernel must be 4-way, got {self.kernel.ndim}-way")
        if self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValueError(f"spatial kernel must be square, got {self.kernel.shape[:2]}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D, S, T)"""
        d, _, s, t = self.kernel.shape
        return d, s, t

    @property
    def param_count(self) -> int:
        return int(self.kernel.size)


@dataclass
class FcLayerSpec:
    """Dense fully connected layer with weight ``M x N`` (y = x @ weight)."""

    weight: np.ndarray

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise ValueError(f"fc weight must be 2-way, got {self.weight.ndim}-way")

    @property
    def dims(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def param_count(self) -> int:
        return int(self.weight.size)


@dataclass
class FactorizedConv:
    """Tucker-2 form of a conv layer: ``kernel ~= core x_2 u3 x_3 u4``.

    Runs as three sublayers: 1x1 conv S->R3 with u3, D x D conv R3->R4 with
    the core (carrying the original stride/padding), 1x1 conv R4->T with u4.
    """

    u3: np.ndarray
    core: np.ndarray
    u4: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.u3 = as_tensor(self.u3)
        self.core = as_tensor(self.core)
        self.u4 = as_tensor(self.u4)
        if self.u3.ndim != 2 or self.u4.ndim != 2 or self.core.ndim != 4:
            raise ValueError("expected u3 (S x R3), core (D x D x R3 x R4), u4 (T x R4)")
        d1, d2, r3, r4 = self.core.shape
        if d1 != d2:
            raise ValueError(f"core spatial dims must be square, got {d1}x{d2}")
        if self.u3.shape[1] != r3 or self.u4.shape[1] != r4:
            raise ValueError("factor ranks do not match core ranks")
        if not (1 <= r3 <= self.u3.shape[0] and 1 <= r4 <= self.u4.shape[0]):
            raise ValueError("ranks must satisfy 1 <= R3 <= S and 1 <= R4 <= T")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D, S, T)"""
        return self.core.shape[0], self.u3.shape[0], self.u4.shape[0]

    @property
    def ranks(self) -> tuple[int, int]:
        return self.core.shape[2], self.core.shape[3]

    @property
    def param_count(self) -> int:
        n = int(self.u3.size + self.core.size + self.u4.size)
        d, s, t = self.dims
        r3, r4 = self.ranks
        assert n == s * r3 + d * d * r3 * r4 + t * r4
        return n


@dataclass
class FactorizedFc:
    """Truncated-SVD form of an fc layer: ``a = U S`` (M x R), ``b = V^T`` (R x N)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = as_tensor(self.a)
        self.b = as_tensor(self.b)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ValueError("expected a (M x R) and b (R x N) with matching R")
        m, r = self.a.shape
        n = self.b.shape[1]
        if not 1 <= r <= min(m, n):
            raise ValueError(f"rank {r} out of range for {m}x{n} weight")

    @property
    def dims(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def param_count(self) -> int:
        n = int(self.a.size + self.b.size)
        m, nn = self.dims
        assert n == m * self.rank + self.rank * nn
        return n


def tsvd_truncate(w: np.ndarray, r: int) -> FactorizedFc:
    """Optimal rank-``r`` split of ``w``: keep the leading r singular triplets.

    The singular values fold into the left factor, so ``a @ b`` is the best
    rank-r approximation and its error equals the tail singular-value norm.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError("tsvd_truncate expects a matrix")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for {m}x{n} matrix")
    u, s, vt = svd(w)
    a = u[:, :r] * s[:r]
    b = vt[:r, :]
    dt = w.dtype if w.dtype == np.float64 else np.float32
    return FactorizedFc(a.astype(dt), b.astype(dt))


def _leading_left_vectors(m: np.ndarray, r: int) -> np.ndarray:
    return svd(m).u[:, :r]


def tucker2_decompose(
    kernel: np.ndarray,
    r3: int,
    r4: int,
    max_iters: int = 50,
    tol: float = 1e-7,
    stride: int = 1,
    padding: int = 0,
    return_errors: bool = False,
):
    """Fit a rank-(R3, R4) Tucker-2 model to a ``D x D x S x T`` kernel.

    Factors are initialized from the leading left singular vectors of the
    channel-mode unfoldings (truncated HOSVD) and refined by HOOI until the
    relative reconstruction error improves by less than ``tol`` or
    ``max_iters`` passes run out.  Both factors come back with orthonormal
    columns.

    With ``return_errors=True`` also returns the list of relative errors,
    one entry for the initialization and one per HOOI pass.
    """
    k = as_tensor(kernel)
    if k.ndim != 4:
        raise ValueError(f"kernel must be 4-way, got {k.ndim}-way")
    if not np.all(np.isfinite(k)):
        raise ValueError("kernel contains non-finite entries")
    _, _, s_dim, t_dim = k.shape
    if not 1 <= r3 <= s_dim:
        raise ValueError(f"r3={r3} out of range [1, {s_dim}]")
    if not 1 <= r4 <= t_dim:
        raise ValueError(f"r4={r4} out of range [1, {t_dim}]")

    k64 = k.astype(np.float64)
    norm_k = frobenius_norm(k64)

    u3 = _leading_left_vectors(unfold(k64, 2), r3)
    u4 = _leading_left_vectors(unfold(k64, 3), r4)

    def rel_err(u3, u4):
        if norm_k == 0.0:
            return 0.0
        core = mode_n_product(mode_n_product(k64, u3.T, 2), u4.T, 3)
        approx = mode_n_product(mode_n_product(core, u3, 2), u4, 3)
        return frobenius_norm(k64 - approx) / norm_k

    errors = [rel_err(u3, u4)]
    for _ in range(max_iters):
        u3 = _leading_left_vectors(unfold(mode_n_product(k64, u4.T, 3), 2), r3)
        u4 = _leading_left_vectors(unfold(mode_n_product(k64, u3.T, 2), 3), r4)
        errors.append(rel_err(u3, u4))
        if errors[-2] - errors[-1] < tol:
            break

    core = mode_n_product(mode_n_product(k64, u3.T, 2), u4.T, 3)
    dt = k.dtype
    fc = FactorizedConv(
        u3.astype(dt), core.astype(dt), u4.astype(dt), stride=stride, padding=padding
    )
    if return_errors:
        return fc, errors
    return fc


def tucker2_reconstruct(f: FactorizedConv) -> np.ndarray:
    """Evaluate the Tucker-2 model back to a full ``D x D x S x T`` kernel."""
    return mode_n_product(mode_n_product(f.core, f.u3, 2), f.u4, 3)


def factorize_conv_layer(layer: ConvLayerSpec, r3: int, r4: int, **fit_kwargs) -> FactorizedConv:
    """Factorize a dense conv layer, carrying stride/padding onto the core sublayer."""
    return tucker2_decompose(
        layer.kernel, r3, r4, stride=layer.stride, padding=layer.padding, **fit_kwargs
    )


def factorize_fc_layer(layer: FcLayerSpec, r: int) -> FactorizedFc:
    """Factorize a dense fc layer at rank ``r``."""
    return tsvd_truncate(layer.weight, r)
