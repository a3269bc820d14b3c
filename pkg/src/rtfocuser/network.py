"""U-shaped deblurring network: assembly, forward/backward and complexity counters."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import MLIA, SPPF, BatchNorm2d, Conv2d, LDBlock, Layer, SNBranch, XFuse, XFUSE_GROUPS
from .tensor import ConvSpec, ShapeError, Tensor

N_STAGES = 4
DIVISOR = 2 ** (N_STAGES - 1)

PAPER_PARAMS = 5.85e6
PAPER_MACS = 15.76e9


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    base_width: int = 36
    stage_widths: tuple = ()
    encoder_depths: tuple = (1, 1, 6, 6)
    decoder_scales: int = N_STAGES - 1
    fused_dim: int = 0
    sn_enabled: bool = True
    sppf_enabled: bool = True

    def __post_init__(self):
        w = self.base_width
        if not self.stage_widths:
            self.stage_widths = tuple(w * 2 ** i for i in range(N_STAGES))
        if not self.fused_dim:
            self.fused_dim = 4 * w
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.encoder_depths = tuple(int(v) for v in self.encoder_depths)
        self.validate()

    def validate(self) -> None:
        if self.base_width < 1:
            raise ConfigError(f"base_width must be positive, got {self.base_width}")
        if len(self.stage_widths) != N_STAGES:
            raise ConfigError(f"stage_widths must have {N_STAGES} entries, got {len(self.stage_widths)}")
        if self.stage_widths[0] != self.base_width:
            raise ConfigError(f"stage_widths[0]={self.stage_widths[0]} must equal base_width={self.base_width}")
        if any(v < 1 for v in self.stage_widths):
            raise ConfigError(f"stage_widths must be positive, got {list(self.stage_widths)}")
        if len(self.encoder_depths) != N_STAGES:
            raise ConfigError(f"encoder_depths must have {N_STAGES} entries, got {len(self.encoder_depths)}")
        if any(d < 1 for d in self.encoder_depths):
            raise ConfigError(f"encoder_depths must be >= 1, got {list(self.encoder_depths)}")
        if self.decoder_scales != N_STAGES - 1:
            raise ConfigError(f"decoder_scales must be {N_STAGES - 1}, got {self.decoder_scales}")
        if self.fused_dim < 1:
            raise ConfigError(f"fused_dim must be positive, got {self.fused_dim}")
        for i, v in enumerate(self.stage_widths[:-1]):
            if v % XFUSE_GROUPS:
                raise ConfigError(f"stage_widths[{i}]={v} must be divisible by the X-Fuse group count {XFUSE_GROUPS}")
        if self.sppf_enabled and self.stage_widths[-1] % 2:
            raise ConfigError(f"stage_widths[-1]={self.stage_widths[-1]} must be even for SPPF")

    # flat key=value document, one field per line
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NetworkConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_mapping(cls, kv: dict) -> "NetworkConfig":
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name in ("stage_widths", "encoder_depths"):
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif f.name in ("sn_enabled", "sppf_enabled"):
                kw[f.name] = _parse_bool(f.name, raw)
            else:
                try:
                    kw[f.name] = int(raw)
                except ValueError:
                    raise ConfigError(f"{f.name}: expected an integer, got {raw!r}") from None
        return cls(**kw)


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


class RTFocuser(Layer):
    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        cw = config.stage_widths
        self.stem = Conv2d(ConvSpec.same3x3(3, cw[0]), dtype)
        self.stages = [
            [LDBlock(cw[i], sn=config.sn_enabled, dtype=dtype) for _ in range(config.encoder_depths[i])]
            for i in range(N_STAGES)
        ]
        self.downs = [Conv2d(ConvSpec.pointwise(cw[i], cw[i + 1]), dtype) for i in range(N_STAGES - 1)]
        self.sppf = SPPF(cw[-1], dtype) if config.sppf_enabled else None
        self.mlia = MLIA(cw, config.fused_dim, dtype)
        # decoder lists are indexed by scale (0 = full resolution)
        self.ups = [Conv2d(ConvSpec.pointwise(cw[s + 1], cw[s]), dtype) for s in range(N_STAGES - 1)]
        self.skips = [Conv2d(ConvSpec.pointwise(config.fused_dim, cw[s]), dtype) for s in range(N_STAGES - 1)]
        self.fuse = [XFuse(cw[s], dtype=dtype) for s in range(N_STAGES - 1)]
        self.head = Conv2d(ConvSpec.same3x3(cw[0], 3), dtype)
        self.mode = "train"
        self.assign_names()

    def children(self):
        c = {"stem": self.stem}
        for i, stage in enumerate(self.stages):
            for j, blk in enumerate(stage):
                c[f"enc{i}.{j}"] = blk
        for i, d in enumerate(self.downs):
            c[f"down{i}"] = d
        if self.sppf is not None:
            c["sppf"] = self.sppf
        c["mlia"] = self.mlia
        for s in range(N_STAGES - 1):
            c[f"dec{s}.up"] = self.ups[s]
            c[f"dec{s}.skip"] = self.skips[s]
            c[f"dec{s}.fuse"] = self.fuse[s]
        c["head"] = self.head
        return c

    def set_mode(self, mode):
        self.mode = mode
        super().set_mode(mode)

    def train(self):
        self.set_mode("train")
        return self

    def eval(self):
        self.set_mode("eval")
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def conv_layers(self):
        for _, layer in self._layers():
            if isinstance(layer, Conv2d):
                yield layer

    def _layers(self):
        stack = [self]
        while stack:
            layer = stack.pop()
            yield layer.name, layer
            stack.extend(reversed(list(layer.children().values())))

    @staticmethod
    def check_input(blur: Tensor) -> None:
        T.check_tensor(blur, "blur")
        if blur.shape[1] != 3:
            raise ShapeError(f"input must have 3 channels, got {blur.shape[1]}")
        h, w = blur.shape[2:]
        if h % DIVISOR or w % DIVISOR:
            raise ShapeError(f"input height and width must be divisible by {DIVISOR}, got {h}x{w}")

    def forward(self, blur: Tensor, keep_cache: bool = True):
        self.check_input(blur)
        blur = blur.astype(self.head.weight.dtype, copy=False)
        h, w = blur.shape[2:]
        sizes = [(h >> i, w >> i) for i in range(N_STAGES)]
        keep = (lambda c: c) if keep_cache else (lambda c: None)

        x, c_stem = self.stem.forward(blur)
        c_stages, c_downs, feats = [], [], []
        for i, stage in enumerate(self.stages):
            if i:
                r = T.bilinear_resize(x, *sizes[i])
                x, c = self.downs[i - 1].forward(r)
                c_downs.append(keep(c))
            cs = []
            for blk in stage:
                x, c = blk.forward(x)
                cs.append(keep(c))
            c_stages.append(cs)
            feats.append(x)
        c_sppf = None
        if self.sppf is not None:
            x, c_sppf = self.sppf.forward(x)
            c_sppf = keep(c_sppf)
            feats[-1] = x
        m, c_mlia = self.mlia.forward(feats, sizes[2])
        c_mlia = keep(c_mlia)

        c_dec = {}
        d = x
        for s in reversed(range(N_STAGES - 1)):
            d_hw = d.shape[2:]
            u, c_u = self.ups[s].forward(T.bilinear_resize(d, *sizes[s]))
            k, c_k = self.skips[s].forward(T.bilinear_resize(m, *sizes[s]))
            d, c_f = self.fuse[s].forward(u, k, blur)
            c_dec[s] = keep((d_hw, c_u, c_k, c_f))
        r, c_head = self.head.forward(d)
        z = blur + r
        y = np.clip(z, 0.0, 1.0)
        cache = (sizes, keep(c_stem), c_stages, c_downs, c_sppf, c_mlia, m.shape[2:], c_dec, keep(c_head), keep(z))
        return y, (cache if keep_cache else None)

    def backward(self, cache, dy: Tensor, grads: dict | None = None) -> dict[str, np.ndarray]:
        """Accumulates parameter gradients of the loss with upstream ``dy`` into ``grads``."""
        if cache is None:
            raise ValueError("forward was run with keep_cache=False")
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in self.named_parameters()}
        sizes, c_stem, c_stages, c_downs, c_sppf, c_mlia, m_hw, c_dec, c_head, z = cache
        dz = dy * ((z >= 0.0) & (z <= 1.0))
        dd = self.head.backward(c_head, dz, grads)

        dm = None
        for s in range(N_STAGES - 1):
            d_hw, c_u, c_k, c_f = c_dec[s]
            du, dk, _ = self.fuse[s].backward(c_f, dd, grads)
            dk = T.bilinear_resize_grad(self.skips[s].backward(c_k, dk, grads), *m_hw)
            dm = dk if dm is None else dm + dk
            dd = T.bilinear_resize_grad(self.ups[s].backward(c_u, du, grads), *d_hw)

        dfeats = self.mlia.backward(c_mlia, dm, grads)
        dx = dd + dfeats[-1]
        if self.sppf is not None:
            dx = self.sppf.backward(c_sppf, dx, grads)
        for i in reversed(range(N_STAGES)):
            if i < N_STAGES - 1:
                dx = dx + dfeats[i]
            for blk, c in zip(reversed(self.stages[i]), reversed(c_stages[i])):
                dx = blk.backward(c, dx, grads)
            if i:
                dr = self.downs[i - 1].backward(c_downs[i - 1], dx, grads)
                dx = T.bilinear_resize_grad(dr, *sizes[i - 1])
        self.stem.backward(c_stem, dx, grads)
        return grads


Model = RTFocuser


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32, init: bool = True) -> RTFocuser:
    """Construct a model; weights are Kaiming-normal (fan-in), head and biases zero.

    Draws happen in parameter-name order from one seeded generator, so the same
    (config, seed) always yields bit-identical parameters. ``init=False``
    leaves every tensor at zero (used when loading checkpoints).
    """
    config.validate()
    model = RTFocuser(config, dtype)
    if init:
        rng = np.random.default_rng(seed)
        for layer in model.conv_layers():
            if layer is not model.head:
                layer.kaiming_(rng)
    else:
        for _, arr in itertools.chain(model.named_parameters(), model.named_buffers()):
            arr[...] = 0
    return model


def forward(model: RTFocuser, blur: Tensor) -> Tensor:
    return model.forward(blur, keep_cache=False)[0]


def infer(model: RTFocuser, blur: Tensor) -> Tensor:
    """Forward any-size input: reflect-pad bottom/right to a multiple of 8, crop back."""
    h, w = blur.shape[2:]
    ph, pw = -h % DIVISOR, -w % DIVISOR
    if not (ph or pw):
        return forward(model, blur)
    mode = "reflect" if ph < h and pw < w else "edge"
    padded = np.pad(blur, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return forward(model, padded)[:, :, :h, :w]


# ---------------------------------------------------------------------------
# complexity accounting


def count_params(model: RTFocuser) -> int:
    """Learnable entries only; BN running statistics are buffers and excluded."""
    return int(sum(arr.size for _, arr in model.named_parameters()))


def count_params_config(config: NetworkConfig) -> int:
    """Closed-form parameter count, independent of any allocated model."""
    cw, f = config.stage_widths, config.fused_dim

    def conv(cin, cout, k=1, g=1):
        return cout * (cin // g) * k * k + cout

    def ld(d):
        return conv(d, d, 3, d) + 2 * d + conv(d, 4 * d) + conv(4 * d, d) + (d if config.sn_enabled else 0)

    total = conv(3, cw[0], 3) + conv(cw[0], 3, 3)
    total += sum(ld(cw[i]) * config.encoder_depths[i] for i in range(N_STAGES))
    total += sum(conv(cw[i], cw[i + 1]) for i in range(N_STAGES - 1))
    if config.sppf_enabled:
        total += conv(cw[-1], cw[-1] // 2) + conv(2 * cw[-1], cw[-1])
    total += sum(conv(c, f) for c in cw) + conv(N_STAGES * f, f) + conv(f, f)
    for s in range(N_STAGES - 1):
        d = cw[s]
        total += conv(cw[s + 1], d) + conv(f, d)
        total += conv(2 * d, d, 3, XFUSE_GROUPS) + conv(d, d) + conv(d + 3, d)
    return total


def count_macs_config(config: NetworkConfig, h: int, w: int) -> int:
    """Multiply-accumulates for one image of size h x w.

    Convention: every conv costs out_h*out_w*out_c*(in_c/groups)*kh*kw.
    Each non-conv op family (bilinear resize that changes size, GELU, BN,
    residual add, SN gain, max pool, pooling read, sigmoid gate, output add)
    costs one MAC per output element. Same-size resizes are skipped and cost 0.
    """
    if h % DIVISOR or w % DIVISOR:
        raise ShapeError(f"h and w must be divisible by {DIVISOR}, got {h}x{w}")
    model = _skeleton(config)
    sizes = [(h >> i, w >> i) for i in range(N_STAGES)]
    cw = config.stage_widths
    m = model.stem.spec.macs(h, w)
    for i in range(N_STAGES):
        hh, ww = sizes[i]
        if i:
            m += hh * ww * cw[i - 1] + model.downs[i - 1].spec.macs(hh, ww)
        m += sum(blk.macs(hh, ww) for blk in model.stages[i])
    if model.sppf is not None:
        m += model.sppf.macs(*sizes[-1])
    m += model.mlia.macs(sizes, sizes[2])
    sh, sw = sizes[2]
    for s in range(N_STAGES - 1):
        hh, ww = sizes[s]
        m += hh * ww * cw[s + 1] + model.ups[s].spec.macs(hh, ww)
        if (hh, ww) != (sh, sw):
            m += hh * ww * config.fused_dim
        m += model.skips[s].spec.macs(hh, ww)
        m += model.fuse[s].macs(hh, ww, (h, w))
    m += model.head.spec.macs(h, w) + 3 * h * w
    return m


_SKELETONS: dict[str, RTFocuser] = {}


def _skeleton(config: NetworkConfig) -> RTFocuser:
    # layer specs only; weights are never read
    key = config.dumps()
    if key not in _SKELETONS:
        _SKELETONS[key] = RTFocuser(config, dtype=np.float32)
        if len(_SKELETONS) > 8:
            _SKELETONS.pop(next(iter(_SKELETONS)))
    return _SKELETONS[key]


def count_macs(model: RTFocuser, h: int, w: int) -> int:
    return count_macs_config(model.config, h, w)


# ---------------------------------------------------------------------------
# calibration

WIDTH_CANDIDATES = tuple(range(24, 49, 4))
DEPTH_CANDIDATES = (
    (3, 3, 6, 3),
    (2, 2, 6, 3),
    (2, 2, 6, 4),
    (2, 2, 8, 4),
    (1, 2, 6, 4),
    (1, 1, 6, 6),
)


class CalibrationError(RuntimeError):
    def __init__(self, message: str, nearest: list):
        super().__init__(message)
        self.nearest = nearest


def _rel(x: float, target: float) -> float:
    return abs(x - target) / target


def calibrate(
    target_params: float = PAPER_PARAMS,
    target_macs: float = PAPER_MACS,
    tolerance: float = 0.15,
    h: int = 256,
    w: int = 256,
) -> NetworkConfig:
    """Smallest width (then first depth candidate) whose counts hit both targets."""
    if target_params <= 0 or target_macs <= 0:
        raise ValueError("targets must be positive")
    scored = []
    for width in WIDTH_CANDIDATES:
        for depths in DEPTH_CANDIDATES:
            cfg = NetworkConfig(base_width=width, encoder_depths=depths)
            p, m = count_params_config(cfg), count_macs_config(cfg, h, w)
            err = max(_rel(p, target_params), _rel(m, target_macs))
            if err <= tolerance:
                return cfg
            scored.append((err, cfg, p, m))
    scored.sort(key=lambda t: t[0])
    nearest = [(cfg, p, m) for _, cfg, p, m in scored[:3]]
    lines = ", ".join(
        f"W={c.base_width} depths={list(c.encoder_depths)} params={p} macs={m}" for c, p, m in nearest
    )
    raise CalibrationError(
        f"no candidate within {tolerance:.0%} of params={target_params:g}, macs={target_macs:g}; nearest: {lines}",
        nearest,
    )
