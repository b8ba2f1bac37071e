"""Forward and backward passes for dense and factorized layers.

Activations are channel-major ``(C, H, W)``, optionally with a leading
batch axis ``(B, C, H, W)``; single inputs come back without the batch
axis.  Kernels are stored ``(D, D, S, T)`` and transposed to
``(T, S, D, D)`` at the executor boundary so the im2col matmul runs over
contiguous rows.  Out-of-range taps read as zero (zero padding), and the
output spatial size is ``floor((H + 2P - D) / stride) + 1``.

Everything here is linear and pure; gradients are exact and accumulate in
float64 regardless of the storage dtype.
"""

from __future__ import annotations

import numpy as np

from .decomp import ConvLayerSpec, FactorizedConv, FactorizedFc, FcLayerSpec
from .tensor import _out_dtype

__all__ = [
    "conv2d_reference",
    "conv2d_factorized",
    "fc_forward",
    "fc_factorized_forward",
    "conv2d_reference_grad",
    "conv2d_factorized_grad",
    "fc_factorized_grad",
    "conv_output_size",
]


def conv_output_size(size: int, d: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - d) // stride + 1
    if out < 1:
        raise ValueError(
            f"non-positive output size for input {size}, kernel {d}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _batched(x: np.ndarray, ndim: int):
    x = np.asarray(x)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ValueError(f"expected {ndim}- or {ndim + 1}-dimensional input, got {x.ndim}")


def _im2col(x: np.ndarray, d: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*D*D, Ho*Wo) patch matrix, columns in (c, i, j) order."""
    b, c, h, w = x.shape
    ho = conv_output_size(h, d, stride, pad)
    wo = conv_output_size(w, d, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, d, d, ho, wo), dtype=x.dtype)
    for i in range(d):
        for j in range(d):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * d * d, ho * wo)


def _col2im(cols: np.ndarray, x_shape, d: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col`."""
    b, c, h, w = x_shape
    ho = conv_output_size(h, d, stride, pad)
    wo = conv_output_size(w, d, stride, pad)
    cols = cols.reshape(b, c, d, d, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(d):
        for j in range(d):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def _check_kernel(kernel: np.ndarray) -> tuple[int, int, int]:
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"expected square D x D x S x T kernel, got shape {kernel.shape}")
    return kernel.shape[0], kernel.shape[2], kernel.shape[3]


def _mix_channels(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(O, C) matrix applied across the channel axis: -> (B, O, H, W)."""
    b, c, h, w = x.shape
    out = np.matmul(mat, x.reshape(b, c, h * w))
    return out.reshape(b, mat.shape[0], h, w)


def _corr_channels(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sum over batch and space of outer channel products: -> (Cu, Cv)."""
    b, cu, h, w = u.shape
    cv = v.shape[1]
    a = u.transpose(1, 0, 2, 3).reshape(cu, b * h * w)
    c = v.transpose(1, 0, 2, 3).reshape(cv, b * h * w)
    return a @ c.T


def _conv_forward(x4: np.ndarray, kernel: np.ndarray, stride: int, pad: int) -> np.ndarray:
    d, s, t = _check_kernel(kernel)
    b, c, h, w = x4.shape
    if c != s:
        raise ValueError(f"input has {c} channels, kernel expects {s}")
    ho = conv_output_size(h, d, stride, pad)
    wo = conv_output_size(w, d, stride, pad)
    cols = _im2col(x4.astype(np.float64), d, stride, pad)
    wmat = kernel.astype(np.float64).transpose(3, 2, 0, 1).reshape(t, s * d * d)
    return np.matmul(wmat, cols).reshape(b, t, ho, wo)


def _conv_backward(x4: np.ndarray, kernel: np.ndarray, stride: int, pad: int, dy4: np.ndarray):
    d, s, t = _check_kernel(kernel)
    b, c, h, w = x4.shape
    ho = conv_output_size(h, d, stride, pad)
    wo = conv_output_size(w, d, stride, pad)
    if dy4.shape != (b, t, ho, wo):
        raise ValueError(f"upstream gradient shape {dy4.shape} != {(b, t, ho, wo)}")
    x64 = x4.astype(np.float64)
    dy64 = dy4.astype(np.float64)
    cols = _im2col(x64, d, stride, pad)
    dy_mat = dy64.reshape(b, t, ho * wo)
    # dK(t; s,i,j) = sum_b dY_b @ cols_b^T
    dk = dy_mat.transpose(1, 0, 2).reshape(t, -1) @ cols.transpose(0, 2, 1).reshape(-1, s * d * d)
    dk = dk.reshape(t, s, d, d).transpose(2, 3, 1, 0)
    wmat = kernel.astype(np.float64).transpose(3, 2, 0, 1).reshape(t, s * d * d)
    dcols = np.matmul(wmat.T, dy_mat)
    dx = _col2im(dcols, x4.shape, d, stride, pad)
    return dk, dx


def conv2d_reference(x: np.ndarray, layer: ConvLayerSpec) -> np.ndarray:
    """Dense convolution of ``(S, H, W)`` or ``(B, S, H, W)`` input."""
    x4, single = _batched(x, 3)
    y = _conv_forward(x4, layer.kernel, layer.stride, layer.padding)
    y = y.astype(_out_dtype(x4, layer.kernel))
    return y[0] if single else y


def conv2d_reference_grad(layer: ConvLayerSpec, x: np.ndarray, dy: np.ndarray):
    """Gradients (dK, dX) of a scalar loss with upstream derivative ``dy``."""
    x4, single = _batched(x, 3)
    dy4, dsingle = _batched(dy, 3)
    if single != dsingle:
        raise ValueError("input and upstream gradient disagree on batching")
    dk, dx = _conv_backward(x4, layer.kernel, layer.stride, layer.padding, dy4)
    dt = _out_dtype(x4, layer.kernel, dy4)
    dk = dk.astype(dt)
    dx = dx.astype(dt)
    return (dk, dx[0] if single else dx)


def conv2d_factorized(x: np.ndarray, f: FactorizedConv) -> np.ndarray:
    """Three-sublayer convolution: 1x1 with u3^T, D x D with the core, 1x1 with u4."""
    x4, single = _batched(x, 3)
    s = f.u3.shape[0]
    if x4.shape[1] != s:
        raise ValueError(f"input has {x4.shape[1]} channels, factors expect {s}")
    x64 = x4.astype(np.float64)
    z = _mix_channels(f.u3.astype(np.float64).T, x64)
    zp = _conv_forward(z, f.core, f.stride, f.padding)
    y = _mix_channels(f.u4.astype(np.float64), zp)
    y = y.astype(_out_dtype(x4, f.u3, f.core, f.u4))
    return y[0] if single else y


def conv2d_factorized_grad(f: FactorizedConv, x: np.ndarray, dy: np.ndarray):
    """Gradients (dU3, dCore, dU4, dX) for the three-sublayer convolution.

    The intermediate activations are recomputed from ``x``, so no forward
    cache is needed.
    """
    x4, single = _batched(x, 3)
    dy4, dsingle = _batched(dy, 3)
    if single != dsingle:
        raise ValueError("input and upstream gradient disagree on batching")
    u3 = f.u3.astype(np.float64)
    u4 = f.u4.astype(np.float64)
    x64 = x4.astype(np.float64)
    dy64 = dy4.astype(np.float64)

    z = _mix_channels(u3.T, x64)
    zp = _conv_forward(z, f.core, f.stride, f.padding)
    if dy64.shape != (x4.shape[0], f.u4.shape[0]) + zp.shape[2:]:
        raise ValueError(f"upstream gradient shape {dy4.shape} does not match output")

    du4 = _corr_channels(dy64, zp)
    dzp = _mix_channels(u4.T, dy64)
    dcore, dz = _conv_backward(z, f.core, f.stride, f.padding, dzp)
    du3 = _corr_channels(x64, dz)
    dx = _mix_channels(u3, dz)

    dt = _out_dtype(x4, f.u3, f.core, f.u4, dy4)
    du3, dcore, du4, dx = (a.astype(dt) for a in (du3, dcore, du4, dx))
    return du3, dcore, du4, dx[0] if single else dx


def fc_forward(x: np.ndarray, layer: FcLayerSpec) -> np.ndarray:
    """y = x @ W for ``(M,)`` or ``(B, M)`` input."""
    x2, single = _batched(x, 1)
    if x2.shape[1] != layer.weight.shape[0]:
        raise ValueError(f"input width {x2.shape[1]} != weight rows {layer.weight.shape[0]}")
    y = x2.astype(np.float64) @ layer.weight.astype(np.float64)
    y = y.astype(_out_dtype(x2, layer.weight))
    return y[0] if single else y


def fc_factorized_forward(x: np.ndarray, f: FactorizedFc) -> np.ndarray:
    """y = (x @ a) @ b."""
    x2, single = _batched(x, 1)
    if x2.shape[1] != f.a.shape[0]:
        raise ValueError(f"input width {x2.shape[1]} != factor rows {f.a.shape[0]}")
    y = (x2.astype(np.float64) @ f.a.astype(np.float64)) @ f.b.astype(np.float64)
    y = y.astype(_out_dtype(x2, f.a, f.b))
    return y[0] if single else y


def fc_factorized_grad(f: FactorizedFc, x: np.ndarray, dy: np.ndarray):
    """Gradients (dA, dB, dX) for the two-sublayer fc map."""
    x2, single = _batched(x, 1)
    dy2, dsingle = _batched(dy, 1)
    if single != dsingle:
        raise ValueError("input and upstream gradient disagree on batching")
    if dy2.shape != (x2.shape[0], f.b.shape[1]):
        raise ValueError(f"upstream gradient shape {dy.shape} does not match output")
    a = f.a.astype(np.float64)
    b = f.b.astype(np.float64)
    x64 = x2.astype(np.float64)
    dy64 = dy2.astype(np.float64)
    z = x64 @ a
    db = z.T @ dy64
    dyb = dy64 @ b.T
    da = x64.T @ dyb
    dx = dyb @ a.T
    dt = _out_dtype(x2, f.a, f.b, dy2)
    da, db, dx = (m.astype(dt) for m in (da, db, dx))
    return da, db, dx[0] if single else dx
