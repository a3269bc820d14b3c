"""Checkpoint serialisation and minimal PPM/PGM image I/O.

Checkpoint layout (all integers little-endian uint32)::

    b"RTFW" | version | len | config text | count |
    count x ( len | name | rank | dims... | float32 LE data )
"""
from __future__ import annotations

import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .network import ConfigError, NetworkConfig, RTFocuser, build
from .training import OptimState

MAGIC = b"RTFW"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# checkpoints


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def encode_checkpoint(config: NetworkConfig, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _u32(FORMAT_VERSION)]
    cfg = config.dumps().encode("utf-8")
    parts += [_u32(len(cfg)), cfg, _u32(len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts += [_u32(len(nb)), nb, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes) -> tuple[NetworkConfig, list[tuple[str, np.ndarray]]]:
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version > FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version} (reader supports <= {FORMAT_VERSION})")
    text = r.take(r.u32()).decode("utf-8")
    try:
        config = NetworkConfig.loads(text)
    except ConfigError as e:
        raise CheckpointError(f"invalid embedded config: {e}") from None
    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append((name, arr))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensor table")
    return config, entries


def save_checkpoint(path, model: RTFocuser, optim: OptimState | None = None) -> None:
    tensors = dict(model.state_tensors())
    if optim is not None:
        for k in model.parameters():
            tensors[f"{OPTIM_PREFIX}m.{k}"] = optim.m[k]
            tensors[f"{OPTIM_PREFIX}v.{k}"] = optim.v[k]
        tensors[f"{OPTIM_PREFIX}t"] = np.array([optim.t], dtype=np.float32)
    atomic_write(path, encode_checkpoint(model.config, tensors))


def load_checkpoint(path) -> tuple[RTFocuser, OptimState | None]:
    data = Path(path).read_bytes()
    config, entries = decode_checkpoint(data)
    seen: dict[str, np.ndarray] = {}
    for name, arr in entries:
        if name in seen:
            raise CheckpointError(f"duplicate tensor {name!r}")
        seen[name] = arr

    model = build(config, init=False)
    targets = model.state_tensors()
    params = model.parameters()
    has_optim = f"{OPTIM_PREFIX}t" in seen
    optim = OptimState.zeros_like(params) if has_optim else None
    if optim is not None:
        for k in params:
            targets[f"{OPTIM_PREFIX}m.{k}"] = optim.m[k]
            targets[f"{OPTIM_PREFIX}v.{k}"] = optim.v[k]

    missing = [k for k in targets if k not in seen]
    if missing:
        raise CheckpointError(f"missing tensor {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = [k for k in seen if k not in targets and k != f"{OPTIM_PREFIX}t"]
    if extra:
        raise CheckpointError(f"unexpected tensor {extra[0]!r}")
    for k, dst in targets.items():
        if seen[k].shape != dst.shape:
            raise CheckpointError(f"tensor {k!r} has shape {seen[k].shape}, config expects {dst.shape}")
        dst[...] = seen[k]
    if optim is not None:
        optim.t = int(seen[f"{OPTIM_PREFIX}t"][0])
    return model, optim


# ---------------------------------------------------------------------------
# images

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode binary PPM (P6) / PGM (P5) into a (c, h, w) float32 array in [0, 1]."""
    m = _HEADER.match(data)
    if not m:
        raise ImageFormatError("malformed PPM/PGM header")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255 is supported)")
    if w < 1 or h < 1:
        raise ImageFormatError(f"invalid image size {w}x{h}")
    c = 3 if kind == b"P6" else 1
    body = data[m.end():m.end() + w * h * c]
    if len(body) < w * h * c:
        raise ImageFormatError(f"short pixel data: expected {w * h * c} bytes, got {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return px.astype(np.float32) / np.float32(255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    return np.floor(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (1|3, h, w) image, got {img.shape}")
    c, h, w = img.shape
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    """Read an image as a (1, c, h, w) float32 tensor.

    .ppm/.pgm are decoded natively; other extensions go through Pillow when
    it is installed.
    """
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return decode_pnm(path.read_bytes())[None]
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path.name}: only PPM/PGM are supported without Pillow") from None
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))[None]


def write_image(path, tensor: np.ndarray) -> None:
    img = tensor[0] if tensor.ndim == 4 else tensor
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        atomic_write(path, encode_pnm(img))
        return
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(quantize(img).transpose(1, 2, 0).squeeze()).save(buf, format=path.suffix.lstrip(".").upper().replace("JPG", "JPEG"))
    atomic_write(path, buf.getvalue())
