"""Parameterised layers and the LD / SN / SPPF / MLIA / X-Fuse blocks.

Every layer exposes ``forward(...) -> (output, cache)`` and
``backward(cache, upstream, grads) -> input gradient(s)``. Parameter
gradients are accumulated into ``grads`` keyed by the parameter's full path,
which is assigned once by :meth:`Layer.assign_names`.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BnState, ConvSpec, ShapeError, Tensor

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SN_GAIN_INIT = 0.1
XFUSE_GROUPS = 4


def _accumulate(grads: dict | None, key: str, g: np.ndarray) -> None:
    if grads is None:
        return
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g.copy()


class Layer:
    name: str = ""

    def children(self) -> dict[str, "Layer"]:
        return {}

    def own_parameters(self) -> dict[str, np.ndarray]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def assign_names(self, prefix: str = "") -> None:
        self.name = prefix
        for key, child in self.children().items():
            child.assign_names(f"{prefix}.{key}" if prefix else key)

    def _walk(self, attr: str) -> Iterator[tuple[str, np.ndarray]]:
        for key, arr in getattr(self, attr)().items():
            yield (f"{self.name}.{key}" if self.name else key), arr
        for child in self.children().values():
            yield from child._walk(attr)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        return self._walk("own_parameters")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return self._walk("own_buffers")

    def set_mode(self, mode: str) -> None:
        for child in self.children().values():
            child.set_mode(mode)

    def __call__(self, *args):
        return self.forward(*args)[0]


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, dtype=np.float32):
        self.spec = spec
        self.weight = np.zeros(spec.weight_shape, dtype)
        self.bias = np.zeros(spec.out_channels, dtype) if spec.has_bias else None

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def kaiming_(self, rng: np.random.Generator, gain: float = 1.0) -> None:
        # fan-in normal with linear gain: most convs here have no activation after them
        s = self.spec
        fan_in = (s.in_channels // s.groups) * s.kernel_h * s.kernel_w
        self.weight[...] = rng.standard_normal(self.weight.shape) * (gain / np.sqrt(fan_in))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.spec), x

    def backward(self, x, dy, grads):
        dx, dw, db = T.conv2d_grad(x, self.weight, self.spec, dy)
        _accumulate(grads, f"{self.name}.weight", dw)
        if db is not None:
            _accumulate(grads, f"{self.name}.bias", db)
        return dx

    def params_count(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, dtype=np.float32):
        self.state = BnState.fresh(channels, dtype)

    def own_parameters(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_mode(self, mode):
        self.state.mode = mode

    def forward(self, x):
        return T.batchnorm2d(x, self.state), x

    def backward(self, x, dy, grads):
        dx, dg, db = T.batchnorm2d_grad(x, self.state, dy)
        _accumulate(grads, f"{self.name}.gamma", dg)
        _accumulate(grads, f"{self.name}.beta", db)
        return dx


class SNBranch(Layer):
    """Fixed depthwise Laplacian stencil scaled by a learnable per-channel gain."""

    def __init__(self, dim: int, dtype=np.float32):
        self.dim = dim
        self.gain = np.full(dim, SN_GAIN_INIT, dtype)
        self.spec = ConvSpec(dim, dim, 3, 3, 1, 1, dim, has_bias=False)
        self.kernel = np.broadcast_to(LAPLACIAN, (dim, 1, 3, 3)).astype(dtype)

    def own_parameters(self):
        return {"gain": self.gain}

    def forward(self, x):
        if self.gain.shape[0] != x.shape[1]:
            raise ShapeError(f"SN gain has {self.gain.shape[0]} channels, input has {x.shape[1]}")
        lap = T.conv2d(x, self.kernel.astype(x.dtype), None, self.spec)
        return lap * self.gain.astype(x.dtype)[None, :, None, None], (x, lap)

    def backward(self, cache, dy, grads):
        x, lap = cache
        _accumulate(grads, f"{self.name}.gain", (dy * lap).sum(axis=(0, 2, 3)).astype(self.gain.dtype))
        dlap = dy * self.gain.astype(dy.dtype)[None, :, None, None]
        return T.conv2d_grad(x, self.kernel.astype(x.dtype), self.spec, dlap)[0]


class LDBlock(Layer):
    """x + compress(expand(bn(gelu(dw(x))))) [+ sn(x)]."""

    def __init__(self, dim: int, sn: bool = True, dtype=np.float32):
        self.dim = dim
        self.dw = Conv2d(ConvSpec.same3x3(dim, dim, groups=dim), dtype)
        self.bn = BatchNorm2d(dim, dtype)
        self.pw_expand = Conv2d(ConvSpec.pointwise(dim, 4 * dim), dtype)
        self.pw_compress = Conv2d(ConvSpec.pointwise(4 * dim, dim), dtype)
        self.sn = SNBranch(dim, dtype) if sn else None

    def children(self):
        c = {"dw": self.dw, "bn": self.bn, "pw_expand": self.pw_expand, "pw_compress": self.pw_compress}
        if self.sn is not None:
            c["sn"] = self.sn
        return c

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ShapeError(f"LD block expects {self.dim} channels, got {x.shape[1]}")
        a, c_dw = self.dw.forward(x)
        g = T.gelu(a)
        b, c_bn = self.bn.forward(g)
        e, c_ex = self.pw_expand.forward(b)
        t, c_co = self.pw_compress.forward(e)
        y = x + t
        c_sn = None
        if self.sn is not None:
            s, c_sn = self.sn.forward(x)
            y = y + s
        return y, (c_dw, a, c_bn, c_ex, c_co, c_sn)

    def backward(self, cache, dy, grads):
        c_dw, a, c_bn, c_ex, c_co, c_sn = cache
        d = self.pw_compress.backward(c_co, dy, grads)
        d = self.pw_expand.backward(c_ex, d, grads)
        d = self.bn.backward(c_bn, d, grads)
        d = T.gelu_grad(a, d)
        dx = dy + self.dw.backward(c_dw, d, grads)
        if self.sn is not None:
            dx = dx + self.sn.backward(c_sn, dy, grads)
        return dx

    def macs(self, h: int, w: int) -> int:
        hwc = h * w * self.dim
        m = self.dw.spec.macs(h, w) + self.pw_expand.spec.macs(h, w) + self.pw_compress.spec.macs(h, w)
        m += 3 * hwc  # gelu, bn, residual add
        if self.sn is not None:
            m += self.sn.spec.macs(h, w) + 2 * hwc  # gain scale, add
        return m


class SPPF(Layer):
    """Halve channels, three chained 5x5 stride-1 max pools, concat, restore."""

    def __init__(self, channels: int, dtype=np.float32):
        if channels % 2:
            raise ShapeError(f"SPPF needs an even channel count, got {channels}")
        self.channels = channels
        self.pw_in = Conv2d(ConvSpec.pointwise(channels, channels // 2), dtype)
        self.pw_out = Conv2d(ConvSpec.pointwise(2 * channels, channels), dtype)

    def children(self):
        return {"pw_in": self.pw_in, "pw_out": self.pw_out}

    def forward(self, x):
        h, c_in = self.pw_in.forward(x)
        p1 = T.maxpool2d(h)
        p2 = T.maxpool2d(p1)
        p3 = T.maxpool2d(p2)
        y, c_out = self.pw_out.forward(T.concat_channels([h, p1, p2, p3]))
        return y, (c_in, h, p1, p2, c_out)

    def backward(self, cache, dy, grads):
        c_in, h, p1, p2, c_out = cache
        half = self.channels // 2
        dh, dp1, dp2, dp3 = T.split_channels(self.pw_out.backward(c_out, dy, grads), [half] * 4)
        dp2 = dp2 + T.maxpool2d_grad(p2, dp3)
        dp1 = dp1 + T.maxpool2d_grad(p1, dp2)
        dh = dh + T.maxpool2d_grad(h, dp1)
        return self.pw_in.backward(c_in, dh, grads)

    def macs(self, h: int, w: int) -> int:
        return self.pw_in.spec.macs(h, w) + self.pw_out.spec.macs(h, w) + 3 * h * w * (self.channels // 2)


class MLIA(Layer):
    """Resize every encoder stage to one resolution, project, concat, reduce, gate.

    The gate is sigmoid(gap(attn(reduced))); the 1x1 ``attn`` conv is applied
    before pooling, which gives the same values as pooling first (both are
    linear) while keeping the compute proportional to the feature-map area.
    """

    def __init__(self, stage_channels, fused_dim: int, dtype=np.float32):
        self.stage_channels = list(stage_channels)
        self.fused_dim = fused_dim
        self.proj = [Conv2d(ConvSpec.pointwise(c, fused_dim), dtype) for c in self.stage_channels]
        self.reduce = Conv2d(ConvSpec.pointwise(fused_dim * len(self.stage_channels), fused_dim), dtype)
        self.attn = Conv2d(ConvSpec.pointwise(fused_dim, fused_dim), dtype)

    def children(self):
        c = {f"proj{i}": p for i, p in enumerate(self.proj)}
        c["reduce"] = self.reduce
        c["attn"] = self.attn
        return c

    def forward(self, stages, out_hw):
        if len(stages) != len(self.proj):
            raise ShapeError(f"MLIA configured for {len(self.proj)} stages, got {len(stages)}")
        oh, ow = out_hw
        projected, c_proj = [], []
        for x, proj in zip(stages, self.proj):
            r = T.bilinear_resize(x, oh, ow)
            p, c = proj.forward(r)
            projected.append(p)
            c_proj.append((x.shape[2:], c))
        z, c_red = self.reduce.forward(T.concat_channels(projected))
        a, c_att = self.attn.forward(z)
        pooled = T.global_avg_pool(a)
        gate = T.sigmoid(pooled)
        return z * gate, (c_proj, c_red, z, c_att, pooled, gate)

    def backward(self, cache, dy, grads):
        c_proj, c_red, z, c_att, pooled, gate = cache
        dz = dy * gate
        dgate = (dy * z).sum(axis=(2, 3), keepdims=True)
        dpooled = T.sigmoid_grad(pooled, dgate)
        da = T.global_avg_pool_grad(dpooled, *z.shape[2:])
        dz = dz + self.attn.backward(c_att, da, grads)
        dcat = self.reduce.backward(c_red, dz, grads)
        douts = []
        for d, proj, (hw, c) in zip(T.split_channels(dcat, [self.fused_dim] * len(self.proj)), self.proj, c_proj):
            dr = proj.backward(c, d, grads)
            douts.append(T.bilinear_resize_grad(dr, *hw))
        return douts

    def macs(self, stage_hw, out_hw) -> int:
        oh, ow = out_hw
        area = oh * ow
        m = 0
        for (h, w), proj in zip(stage_hw, self.proj):
            if (h, w) != (oh, ow):
                m += area * proj.spec.in_channels  # resize
            m += proj.spec.macs(oh, ow)
        m += self.reduce.spec.macs(oh, ow) + self.attn.spec.macs(oh, ow)
        m += 2 * area * self.fused_dim  # pooling read, sigmoid gate multiply
        return m


class XFuse(Layer):
    """Fuse upsampled decoder features, an encoder skip and the blurred image."""

    def __init__(self, dim: int, groups: int = XFUSE_GROUPS, dtype=np.float32):
        self.dim = dim
        self.group_conv = Conv2d(ConvSpec.same3x3(2 * dim, dim, groups=groups), dtype)
        self.pw_mix = Conv2d(ConvSpec.pointwise(dim, dim), dtype)
        self.pw_out = Conv2d(ConvSpec.pointwise(dim + 3, dim), dtype)

    def children(self):
        return {"group_conv": self.group_conv, "pw_mix": self.pw_mix, "pw_out": self.pw_out}

    def forward(self, up, skip, blur):
        if up.shape != skip.shape:
            raise ShapeError(f"X-Fuse up {up.shape} and skip {skip.shape} must match")
        if blur.shape[1] != 3:
            raise ShapeError(f"X-Fuse guidance image must have 3 channels, got {blur.shape[1]}")
        a, c_g = self.group_conv.forward(T.concat_channels([up, skip]))
        f, c_m = self.pw_mix.forward(T.gelu(a))
        b = T.bilinear_resize(blur, *f.shape[2:]).astype(f.dtype)
        y, c_o = self.pw_out.forward(T.concat_channels([f, b]))
        return y, (c_g, a, c_m, c_o, blur.shape[2:])

    def backward(self, cache, dy, grads):
        """Returns gradients for ``(up, skip, blur)``."""
        c_g, a, c_m, c_o, blur_hw = cache
        df, db = T.split_channels(self.pw_out.backward(c_o, dy, grads), [self.dim, 3])
        da = T.gelu_grad(a, self.pw_mix.backward(c_m, df, grads))
        dup, dskip = T.split_channels(self.group_conv.backward(c_g, da, grads), [self.dim, self.dim])
        return dup, dskip, T.bilinear_resize_grad(db, *blur_hw)

    def macs(self, h: int, w: int, blur_hw) -> int:
        m = self.group_conv.spec.macs(h, w) + self.pw_mix.spec.macs(h, w) + self.pw_out.spec.macs(h, w)
        m += h * w * self.dim  # gelu
        if tuple(blur_hw) != (h, w):
            m += 3 * h * w
        return m
