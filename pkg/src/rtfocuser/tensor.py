"""NCHW tensor primitives with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects of rank 4 (batch, channels, rows,
cols). Public surfaces use float32; every op preserves the input dtype so that
float64 can be used for finite-difference gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

Tensor = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when tensor shapes or layer specs are inconsistent."""


def check_tensor(x: Tensor, name: str = "input") -> Tensor:
    if not isinstance(x, np.ndarray):
        raise TypeError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NCHW, got rank {x.ndim}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def _float_dtype(*arrays) -> np.dtype:
    if any(a is not None and a.dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for f in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, f) < 1:
                raise ShapeError(f"ConvSpec.{f} must be positive, got {getattr(self, f)}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups:
            raise ShapeError(f"groups={self.groups} does not divide in_channels={self.in_channels}")
        if self.out_channels % self.groups:
            raise ShapeError(f"groups={self.groups} does not divide out_channels={self.out_channels}")

    @classmethod
    def pointwise(cls, cin: int, cout: int, bias: bool = True) -> "ConvSpec":
        return cls(cin, cout, 1, 1, 1, 0, 1, bias)

    @classmethod
    def same3x3(cls, cin: int, cout: int, groups: int = 1, bias: bool = True) -> "ConvSpec":
        return cls(cin, cout, 3, 3, 1, 1, groups, bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w}")
        return oh, ow

    def macs(self, h: int, w: int) -> int:
        oh, ow = self.out_size(h, w)
        return oh * ow * self.out_channels * (self.in_channels // self.groups) * self.kernel_h * self.kernel_w


def _check_conv(x: Tensor, weight: Tensor, bias, spec: ConvSpec) -> None:
    check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channels {x.shape[1]} != spec.in_channels {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")


def _offset_slice(k: int, stride: int, out: int) -> slice:
    return slice(k, k + stride * (out - 1) + 1, stride)


# above this many float64 im2col entries, fall back to one matmul per kernel offset
IM2COL_LIMIT = 1 << 24


def _im2col(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """(groups, cin_g*kh*kw, n*oh*ow) column matrix from a padded input."""
    n, c = xp.shape[:2]
    g, s = spec.groups, spec.stride
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    win = win.reshape(n, g, c // g, oh, ow, spec.kernel_h, spec.kernel_w)
    return win.transpose(1, 2, 5, 6, 0, 3, 4).reshape(g, (c // g) * spec.kernel_h * spec.kernel_w, n * oh * ow)


def _is_plain_pointwise(spec: ConvSpec) -> bool:
    return spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and spec.padding == 0 and spec.groups == 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation, accumulated in float64.

    Loops over kernel offsets and does one batched (per-group) matmul per
    offset, so peak memory is one shifted view rather than a full im2col.
    """
    _check_conv(x, weight, bias, spec)
    dtype = _float_dtype(x, weight, bias)
    n, c, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    g, p, s = spec.groups, spec.padding, spec.stride
    cin_g, cout_g = c // g, spec.out_channels // g

    xp = x.astype(np.float64, copy=False)
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    w64 = weight.astype(np.float64, copy=False)

    if _is_plain_pointwise(spec):
        out = np.matmul(w64[:, :, 0, 0], xp.reshape(n, c, h * w)).reshape(n, -1, h, w)
    elif spec.is_depthwise:
        out = np.zeros((n, c, oh, ow))
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                patch = xp[:, :, _offset_slice(i, s, oh), _offset_slice(j, s, ow)]
                out += patch * w64[None, :, 0, i, j, None, None]
    elif c * spec.kernel_h * spec.kernel_w * n * oh * ow <= IM2COL_LIMIT:
        cols = _im2col(xp, spec, oh, ow)
        out = np.matmul(w64.reshape(g, cout_g, -1), cols)
        out = out.reshape(spec.out_channels, n, oh, ow).transpose(1, 0, 2, 3)
    else:
        out = np.zeros((g, cout_g, n * oh * ow))
        wg = w64.reshape(g, cout_g, cin_g, spec.kernel_h, spec.kernel_w)
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                patch = xp[:, :, _offset_slice(i, s, oh), _offset_slice(j, s, ow)]
                cols = patch.reshape(n, g, cin_g, oh * ow).transpose(1, 2, 0, 3).reshape(g, cin_g, -1)
                out += np.matmul(wg[:, :, :, i, j], cols)
        out = out.reshape(spec.out_channels, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def conv2d_grad(x: Tensor, weight: Tensor, spec: ConvSpec, upstream: Tensor):
    """Gradients of ``conv2d`` w.r.t. input, weight and bias.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None
    when the spec has no bias.
    """
    _check_conv(x, weight, None, spec)
    n, c, h, w = x.shape
    oh, ow = spec.out_size(h, w)
    if upstream.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"upstream shape {upstream.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    dtype = _float_dtype(x, weight, upstream)
    g, p, s = spec.groups, spec.padding, spec.stride
    cin_g, cout_g = c // g, spec.out_channels // g
    kh, kw = spec.kernel_h, spec.kernel_w

    xp = x.astype(np.float64, copy=False)
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    dy = upstream.astype(np.float64, copy=False)
    w64 = weight.astype(np.float64, copy=False)
    dxp = np.zeros(xp.shape)
    dw = np.zeros(spec.weight_shape)

    if _is_plain_pointwise(spec):
        x3, dy3 = xp.reshape(n, c, h * w), dy.reshape(n, -1, h * w)
        dw[:, :, 0, 0] = np.einsum("nop,nip->oi", dy3, x3, optimize=True)
        dxp = np.matmul(w64[:, :, 0, 0].T, dy3).reshape(n, c, h, w)
    elif spec.is_depthwise:
        for i in range(kh):
            for j in range(kw):
                si, sj = _offset_slice(i, s, oh), _offset_slice(j, s, ow)
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dy, xp[:, :, si, sj])
                dxp[:, :, si, sj] += dy * w64[None, :, 0, i, j, None, None]
    else:
        dyg = dy.reshape(n, g, cout_g, oh * ow).transpose(1, 2, 0, 3).reshape(g, cout_g, -1)
        wg = w64.reshape(g, cout_g, cin_g, kh, kw)
        if c * kh * kw * n * oh * ow <= IM2COL_LIMIT:
            cols = _im2col(xp, spec, oh, ow)
            dw[...] = np.matmul(dyg, cols.transpose(0, 2, 1)).reshape(spec.weight_shape)
            dcols = np.matmul(wg.reshape(g, cout_g, -1).transpose(0, 2, 1), dyg)
            dcols = dcols.reshape(g, cin_g, kh, kw, n, oh, ow)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _offset_slice(i, s, oh), _offset_slice(j, s, ow)
                    dxp[:, :, si, sj] += dcols[:, :, i, j].transpose(2, 0, 1, 3, 4).reshape(n, c, oh, ow)
        else:
            dwg = dw.reshape(g, cout_g, cin_g, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _offset_slice(i, s, oh), _offset_slice(j, s, ow)
                    cols = xp[:, :, si, sj].reshape(n, g, cin_g, oh * ow).transpose(1, 2, 0, 3).reshape(g, cin_g, -1)
                    dwg[:, :, :, i, j] = np.matmul(dyg, cols.transpose(0, 2, 1))
                    dcols = np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), dyg)
                    dxp[:, :, si, sj] += dcols.reshape(g, cin_g, n, oh, ow).transpose(2, 0, 1, 3, 4).reshape(n, c, oh, ow)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    db = dy.sum(axis=(0, 2, 3)).astype(dtype) if spec.has_bias else None
    return np.ascontiguousarray(dx, dtype=dtype), dw.astype(dtype), db


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BnState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_check(x: Tensor, state: BnState) -> None:
    check_tensor(x)
    for f in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(state, f).shape != (x.shape[1],):
            raise ShapeError(f"BnState.{f} has length {getattr(state, f).shape[0]}, input has {x.shape[1]} channels")
    if state.mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")


def _batch_stats(x64: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm2d(x: Tensor, state: BnState) -> Tensor:
    """Per-channel batch normalisation.

    Train mode normalises with biased batch statistics and folds the
    unbiased batch variance into the running estimate (the usual framework
    convention). Eval mode reads the stored statistics only.
    """
    _bn_check(x, state)
    dtype = _float_dtype(x, state.gamma)
    x64 = x.astype(np.float64, copy=False)
    if state.mode == "train":
        mean, var = _batch_stats(x64)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + state.eps)
    scale = state.gamma.astype(np.float64) * inv
    shift = state.beta.astype(np.float64) - mean * scale
    y = x64 * scale[None, :, None, None] + shift[None, :, None, None]
    return y.astype(dtype)


def batchnorm2d_grad(x: Tensor, state: BnState, upstream: Tensor):
    """Returns ``(grad_input, grad_gamma, grad_beta)``.

    In train mode the batch statistics are recomputed from ``x``; running
    statistics are not touched.
    """
    _bn_check(x, state)
    dtype = _float_dtype(x, state.gamma, upstream)
    x64 = x.astype(np.float64, copy=False)
    dy = upstream.astype(np.float64, copy=False)
    gamma = state.gamma.astype(np.float64)
    if state.mode == "train":
        mean, var = _batch_stats(x64)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x64 - mean[None, :, None, None]) * inv[None, :, None, None]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    if state.mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        dxhat = dy * gamma[None, :, None, None]
        dx = (
            inv[None, :, None, None]
            / m
            * (m * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
               - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        )
    else:
        dx = dy * (gamma * inv)[None, :, None, None]
    return dx.astype(dtype), dgamma.astype(dtype), dbeta.astype(dtype)


# ---------------------------------------------------------------------------
# activations


def gelu(x: Tensor) -> Tensor:
    x64 = x.astype(np.float64, copy=False)
    return (0.5 * x64 * (1.0 + erf(x64 / _SQRT2))).astype(x.dtype)


def gelu_grad(x: Tensor, upstream: Tensor) -> Tensor:
    x64 = x.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(x64 / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)
    return (upstream * (cdf + x64 * pdf)).astype(_float_dtype(x, upstream))


def sigmoid(x: Tensor) -> Tensor:
    x64 = x.astype(np.float64, copy=False)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.astype(x.dtype)


def sigmoid_grad(x: Tensor, upstream: Tensor) -> Tensor:
    s = sigmoid(x.astype(np.float64))
    return (upstream * s * (1.0 - s)).astype(_float_dtype(x, upstream))


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix with half-pixel centres and edge clamping."""
    if src < 1 or dst < 1:
        raise ShapeError(f"resize sizes must be >= 1, got {src} -> {dst}")
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.astype(np.float64, copy=False), rx, optimize=True)
    return out.astype(x.dtype)


def bilinear_resize_grad(upstream: Tensor, in_h: int, in_w: int) -> Tensor:
    out_h, out_w = upstream.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return upstream.copy()
    ry, rx = bilinear_matrix(in_h, out_h), bilinear_matrix(in_w, out_w)
    out = np.einsum("ih,ncij,jw->nchw", ry, upstream.astype(np.float64, copy=False), rx, optimize=True)
    return out.astype(upstream.dtype)


# ---------------------------------------------------------------------------
# pooling


def _pool_windows(x: Tensor, k: int, stride: int, pad: int) -> np.ndarray:
    if k % 2 == 0:
        raise ShapeError(f"maxpool kernel must be odd, got {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def maxpool2d(x: Tensor, k: int = 5, stride: int = 1, pad: int = 2) -> Tensor:
    check_tensor(x)
    return _pool_windows(x, k, stride, pad).max(axis=(4, 5))


def maxpool2d_grad(x: Tensor, upstream: Tensor, k: int = 5, stride: int = 1, pad: int = 2) -> Tensor:
    """Routes each upstream value to the first maximal element of its window."""
    win = _pool_windows(x, k, stride, pad)
    n, c, oh, ow = win.shape[:4]
    arg = win.reshape(n, c, oh, ow, k * k).argmax(axis=-1)
    di, dj = np.divmod(arg, k)
    rows = np.arange(oh)[None, None, :, None] * stride + di
    cols = np.arange(ow)[None, None, None, :] * stride + dj
    h, w = x.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), upstream)
    return dxp[:, :, pad:pad + h, pad:pad + w].astype(_float_dtype(x, upstream))


def global_avg_pool(x: Tensor) -> Tensor:
    check_tensor(x)
    return x.astype(np.float64, copy=False).mean(axis=(2, 3), keepdims=True).astype(x.dtype)


def global_avg_pool_grad(upstream: Tensor, h: int, w: int) -> Tensor:
    return np.broadcast_to(upstream / (h * w), upstream.shape[:2] + (h, w)).astype(upstream.dtype)


# ---------------------------------------------------------------------------
# structural / elementwise


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = check_tensor(parts[0], "part 0").shape
    for i, p in enumerate(parts[1:], 1):
        check_tensor(p, f"part {i}")
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"part {i} has shape {p.shape}, incompatible with part 0 {ref} (n, h, w must agree)")
    return np.concatenate(parts, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of ``concat_channels``; also its gradient."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.shape[:2] == b.shape[:2] and (b.shape[2:] == (1, 1) or a.shape[2:] == (1, 1)):
        return
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}; only (n,c,1,1) gates broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return a * b


def unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Sum ``grad`` down to ``shape`` after a (n,c,1,1) broadcast."""
    if grad.shape == tuple(shape):
        return grad
    return grad.sum(axis=(2, 3), keepdims=True)
