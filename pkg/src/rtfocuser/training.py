"""Desk-scale training: MSE + AdamW + cosine schedule, metrics, synthetic blur."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import RTFocuser, infer
from .tensor import ShapeError, Tensor, check_tensor

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    total_steps: int = 1000
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    crop: int = 256
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_steps < 1 or self.batch_size < 1 or self.crop < 1:
            raise ValueError("total_steps, batch_size and crop must be positive")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


@dataclass
class ImageSample:
    blur: np.ndarray  # (3, h, w) in [0, 1]
    sharp: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.blur.shape != self.sharp.shape:
            raise ShapeError(f"sample {self.id!r}: blur {self.blur.shape} != sharp {self.sharp.shape}")
        if self.blur.ndim != 3 or self.blur.shape[0] != 3:
            raise ShapeError(f"sample {self.id!r}: expected (3, h, w), got {self.blur.shape}")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


# ---------------------------------------------------------------------------
# loss, optimiser, schedule


def mse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Returns the mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 * diff / n).astype(pred.dtype)


def adamw_step(params: dict, grads: dict, state: OptimState, cfg: TrainConfig, lr_t: float) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    if lr_t < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr_t}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; step rejected")
    b1, b2 = cfg.betas
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k].astype(np.float64)
        if p.shape != g.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"{k}: parameter {p.shape}, gradient {g.shape}, moment {state.m[k].shape}")
        m = b1 * state.m[k].astype(np.float64) + (1.0 - b1) * g
        v = b2 * state.v[k].astype(np.float64) + (1.0 - b2) * g * g
        state.m[k][...] = m
        state.v[k][...] = v
        p64 = p.astype(np.float64)
        p64 = p64 - lr_t * cfg.weight_decay * p64
        p64 = p64 - lr_t * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p[...] = p64
    state.t = t


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.shape[0]
    tmp = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(tmp, k, axis=-2) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows, per channel, averaged.

    Accepts (h, w), (c, h, w) or (n, c, h, w) arrays; the last two axes are
    spatial.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < 11:
        raise ShapeError(f"ssim needs images of at least 11x11, got {a.shape[-2:]}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    g = gaussian_window()
    x, y = a.astype(np.float64), b.astype(np.float64)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# synthetic data


def check_kernel(kernel: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ShapeError(f"blur kernel must be 2-D with odd sides, got {kernel.shape}")
    if np.any(kernel < 0) or abs(kernel.sum() - 1.0) > 1e-6:
        raise ValueError(f"blur kernel must be non-negative and sum to 1 (sum={kernel.sum():.6g})")
    return kernel


def synth_blur(sharp: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel with ``kernel`` using edge-replicate padding."""
    kernel = check_kernel(kernel)
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = sharp.shape[-2:]
    pad = [(0, 0)] * (sharp.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(sharp.astype(np.float64), pad, mode="edge")
    out = np.zeros(sharp.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out += kernel[i, j] * xp[..., i:i + h, j:j + w]
    return np.clip(out, 0.0, 1.0).astype(sharp.dtype)


def linear_motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Anti-aliased line segment of ``length`` unit-spaced taps, normalised.

    Taps sit at integer distances along the segment and are splatted
    bilinearly onto the pixel grid; zero border rows/cols are trimmed
    symmetrically so the kernel stays centred.
    """
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    half = (length - 1) / 2
    r = int(math.ceil(half)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    th = math.radians(angle_deg)
    # image rows grow downward, so a positive angle tilts the segment upward
    dx, dy = math.cos(th), -math.sin(th)
    for t in np.arange(length) - half:
        x, y = r + t * dx, r + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, xx, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                            (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
            if wgt > 1e-12:
                k[yy, xx] += wgt
    k /= k.sum()
    while k.shape[0] > 1 and not k[0].any() and not k[-1].any():
        k = k[1:-1]
    while k.shape[1] > 1 and not k[:, 0].any() and not k[:, -1].any():
        k = k[:, 1:-1]
    return k


def parse_kernel(text: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Parse ``linear:len=L,angle=A``; ``angle=random`` draws from ``rng``."""
    grammar = "expected linear:len=<positive int>,angle=<degrees or 'random'>"
    kind, _, rest = text.partition(":")
    if kind.strip() != "linear" or not rest:
        raise ValueError(f"bad kernel string {text!r}: {grammar}")
    opts = {}
    for item in rest.split(","):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"bad kernel string {text!r}: {grammar}")
        opts[key.strip()] = val.strip()
    if set(opts) - {"len", "angle"} or "len" not in opts:
        raise ValueError(f"bad kernel string {text!r}: {grammar}")
    try:
        length = int(opts["len"])
        angle = opts.get("angle", "0")
        if angle == "random":
            angle = float((rng or np.random.default_rng()).uniform(0.0, 180.0))
        else:
            angle = float(angle)
    except ValueError:
        raise ValueError(f"bad kernel string {text!r}: {grammar}") from None
    return linear_motion_kernel(length, angle)


def synthetic_sharp(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Procedural sharp image: smooth gradient background plus hard-edged shapes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, o = rng.uniform(-0.5, 0.5, 3)
        img[c] = 0.5 + o * 0.5 + a * xx + b * yy
    for _ in range(int(rng.integers(6, 12))):
        color = rng.uniform(0, 1, 3)[:, None]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            hh, ww = rng.uniform(2, h / 3), rng.uniform(2, w / 3)
            mask = (np.abs(np.mgrid[0:h, 0:w][0] - cy) < hh / 2) & (np.abs(np.mgrid[0:h, 0:w][1] - cx) < ww / 2)
        else:
            rad = rng.uniform(2, min(h, w) / 5)
            mask = (np.mgrid[0:h, 0:w][0] - cy) ** 2 + (np.mgrid[0:h, 0:w][1] - cx) ** 2 < rad * rad
        img[:, mask] = color
    return np.clip(img, 0, 1).astype(np.float32)


def make_synthetic_pairs(n: int, size: int, kernel_spec: str = "linear:len=9,angle=random", seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sharp = synthetic_sharp(rng, size, size)
        blur = synth_blur(sharp, parse_kernel(kernel_spec, rng))
        out.append(ImageSample(blur, sharp, f"{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# data


def random_crop_pair(sample: ImageSample, crop: int, rng: np.random.Generator) -> ImageSample:
    h, w = sample.blur.shape[1:]
    if h < crop or w < crop:
        raise ShapeError(f"sample {sample.id!r} is {h}x{w}, smaller than crop {crop}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    win = (slice(None), slice(top, top + crop), slice(left, left + crop))
    return ImageSample(sample.blur[win], sample.sharp[win], sample.id)


def load_pairs(root: str | Path) -> tuple[list[ImageSample], int]:
    """Load ``<root>/blur/<id>.<ext>`` paired with ``<root>/sharp/<id>.<ext>``.

    Returns the samples and the number of unpaired ids that were skipped.
    """
    from .fileio import read_image

    root = Path(root)
    blur = {p.stem: p for p in sorted((root / "blur").iterdir()) if p.is_file()}
    sharp = {p.stem: p for p in sorted((root / "sharp").iterdir()) if p.is_file()}
    common = sorted(blur.keys() & sharp.keys())
    skipped = len(blur.keys() ^ sharp.keys())
    if skipped:
        log.warning("skipped %d unpaired image ids under %s", skipped, root)
    samples = [ImageSample(read_image(blur[k])[0], read_image(sharp[k])[0], k) for k in common]
    return samples, skipped


def stack(samples: Sequence[ImageSample]) -> tuple[Tensor, Tensor]:
    return np.stack([s.blur for s in samples]), np.stack([s.sharp for s in samples])


# ---------------------------------------------------------------------------
# loop


def step_rng(seed: int, step: int) -> np.random.Generator:
    # per-step streams make a resumed run draw exactly what a straight run draws
    return np.random.default_rng([seed, step])


def evaluate(model: RTFocuser, samples: Sequence[ImageSample]) -> float:
    """Mean PSNR of eval-mode outputs over ``samples`` (full images)."""
    mode = model.mode
    model.eval()
    vals = [psnr(infer(model, s.blur[None])[0], s.sharp) for s in samples]
    model.set_mode(mode)
    return float(np.mean(vals))


def identity_psnr(samples: Sequence[ImageSample]) -> float:
    return float(np.mean([psnr(s.blur, s.sharp) for s in samples]))


def train_loop(
    model: RTFocuser,
    data: Sequence[ImageSample],
    cfg: TrainConfig,
    state: OptimState | None = None,
    stop_step: int | None = None,
    on_event: Callable[[dict], None] | None = None,
) -> tuple[OptimState, list[dict]]:
    """Run steps ``state.t + 1 .. stop_step`` (default ``cfg.total_steps``).

    Each step: seeded batch/crop draw, forward, MSE, backward, AdamW with the
    cosine learning rate for that step. Returns the optimiser state and the
    history of emitted events.
    """
    if not data:
        raise ValueError("no training samples")
    params = model.parameters()
    state = state or OptimState.zeros_like(params)
    stop = cfg.total_steps if stop_step is None else stop_step
    if stop > cfg.total_steps:
        raise ValueError(f"stop step {stop} exceeds total_steps {cfg.total_steps}")
    history = []

    def emit(ev):
        history.append(ev)
        if on_event:
            on_event(ev)

    model.train()
    while state.t < stop:
        step = state.t + 1
        rng = step_rng(cfg.seed, step)
        idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        crop = min(cfg.crop, *(min(data[i].blur.shape[1:]) for i in idx))
        blur, sharp = stack([random_crop_pair(data[i], crop, rng) for i in idx])
        crop_pad = crop - crop % 8
        blur, sharp = blur[:, :, :crop_pad, :crop_pad], sharp[:, :, :crop_pad, :crop_pad]

        pred, cache = model.forward(blur)
        loss, dpred = mse_loss(pred, sharp)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        grads = model.backward(cache, dpred)
        lr = cosine_lr(step - 1, cfg)
        adamw_step(params, grads, state, cfg, lr)
        emit({"event": "step", "step": step, "lr": lr, "loss": loss})
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == stop):
            emit({"event": "eval", "step": step, "psnr": evaluate(model, data)})
            model.train()
    return state, history
