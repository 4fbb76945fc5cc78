"""Differentiable layer primitives over NCHW tensors.

Convolutions use an im2col lowering so the heavy lifting is a single GEMM;
the scatter back (col2im) visits the kernel taps in a fixed order, which
keeps every reduction deterministic.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, UsageError
from .tensor import Tensor, check_finite


def _require_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what} expects a rank-{rank} tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather k x k windows of a padded NCHW array into (N*Ho*Wo, C*k*k)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, out_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, C*k*k) columns into an array of NCHW ``out_shape``.

    Accumulation runs channels-last so each tap is a plain strided slice of
    the GEMM output; the returned array is an NCHW view of that buffer.
    """
    n, c, h, w = out_shape
    taps = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + hi : stride, j : j + wi : stride, :] += taps[..., i, j]
    return out.transpose(0, 3, 1, 2)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is N x C x H x W, ``weight`` is O x C x k x k."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    if stride < 1 or padding < 0:
        raise UsageError(f"invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} larger than padded input {x.shape}")
    check_finite(x.data, "conv2d input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(o, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Fractionally-strided convolution; the adjoint of :func:`conv2d`.

    ``weight`` is C_in x C_out x k x k. Output extent per axis is
    ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    _require_rank(x, 4, "conv_transpose2d input")
    _require_rank(weight, 4, "conv_transpose2d weight")
    if stride < 1 or padding < 0 or output_padding < 0:
        raise UsageError("invalid stride / padding / output_padding")
    n, ci, h, w = x.shape
    cw, co, k, k2 = weight.shape
    if cw != ci or k != k2:
        raise DimensionError(f"conv_transpose2d weight {weight.shape} incompatible with input {x.shape}")
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d output would be empty")
    check_finite(x.data, "conv_transpose2d input")

    full_h = max((h - 1) * stride + k, padding + ho)
    full_w = max((w - 1) * stride + k, padding + wo)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    wm = weight.data.reshape(ci, -1)
    full = _col2im(xm @ wm, (n, co, full_h, full_w), k, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def _bw(g):
        gfull = np.zeros((n, co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wm.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xm.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully-connected layer: ``x @ weight.T + bias`` with ``weight`` O x F."""
    _require_rank(x, 2, "linear input")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear weight {weight.shape} incompatible with input {x.shape}")
    a, wd = x.data, weight.data
    out = a @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ a if weight.requires_grad else None,
            g.sum(axis=0) if bias is not None else None,
        )

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance). In eval mode
    the running statistics are used and nothing is mutated.
    """
    _require_rank(x, 4, "batch_norm input")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise DimensionError("batch_norm affine parameters must have one entry per channel")
    shape = (1, c, 1, 1)
    gamma = weight.data.reshape(shape)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def _bw(g):
            gx = None
            if x.requires_grad:
                dxhat = g * gamma
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(shape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv_std

        def _bw(g):
            gx = g * gamma * inv_std if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gamma + bias.data.reshape(shape)
    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, weight, bias), _bw)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed spatial max; padded cells never win."""
    _require_rank(x, 4, "max_pool2d input")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool window {kernel} larger than input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    padded_shape = xp.shape

    def _bw(g):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i : i + hi : stride, j : j + wi : stride] += g * (arg == i * kernel + j)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        return (np.ascontiguousarray(gxp),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), _bw)


def global_max_pool2d(x: Tensor) -> Tensor:
    """Maximum over all spatial positions: N x C x H x W -> N x C."""
    _require_rank(x, 4, "global_max_pool2d input")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gflat = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        return (gflat.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), _bw)


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic interpolation matrix (half-pixel centres, edge clamped)."""
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat.astype(dtype)


def upsample_bilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """Resize the spatial axes of an NCHW tensor to ``size = (H, W)``."""
    _require_rank(x, 4, "upsample_bilinear input")
    out_h, out_w = int(size[0]), int(size[1])
    ah = bilinear_matrix(out_h, x.shape[2], x.dtype)
    aw = bilinear_matrix(out_w, x.shape[3], x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return Tensor.from_op(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(
        out, tuple(tensors), lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))
    )


def relu(x: Tensor) -> Tensor:
    return x.relu()


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"loss operands differ in shape: {pred.shape} vs {target.shape}")
    return (pred - target).square().mean()
