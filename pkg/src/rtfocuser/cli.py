"""rtfocuser command line: deblur, train, bench, count, gen-data.

Every event is printed as one ``key=value`` line. Exit codes: 0 success,
2 usage error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fileio, network, training
from .network import ConfigError, NetworkConfig, build, count_macs, count_params, infer
from .training import NumericError, TrainConfig

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
IMAGE_EXTS = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {"ckpt_every"}


class UsageError(Exception):
    pass


def emit(**kv) -> None:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    print(" ".join(parts), flush=True)


def default_seed(arg: int | None, fallback: int = 0) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("RTF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"RTF_SEED must be an integer, got {env!r}") from None
    return fallback


def load_config_file(path: str | None) -> tuple[NetworkConfig, dict]:
    """Network config plus any training keys found in the same file."""
    if path is None:
        return NetworkConfig(), {}
    try:
        kv = network.parse_kv(Path(path).read_text())
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from None
    net_keys = {f.name for f in fields(NetworkConfig)}
    unknown = set(kv) - net_keys - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = NetworkConfig.from_mapping({k: v for k, v in kv.items() if k in net_keys})
    return cfg, {k: v for k, v in kv.items() if k in TRAIN_KEYS}


def list_images(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    return [path]


# ---------------------------------------------------------------------------
# deblur


def cmd_deblur(args) -> int:
    model, _ = fileio.load_checkpoint(args.model)
    model.eval()
    src = Path(args.input)
    inputs = list_images(src)
    if not inputs or not inputs[0].exists():
        raise FileNotFoundError(f"no input images at {src}")
    out = Path(args.output)
    to_dir = src.is_dir()
    if to_dir:
        out.mkdir(parents=True, exist_ok=True)
    ref_dir = Path(args.reference) if args.reference else None
    scores = []
    for path in inputs:
        img = fileio.read_image(path)
        t0 = time.perf_counter()
        pred = infer(model, img)
        ms = (time.perf_counter() - t0) * 1e3
        if not np.all(np.isfinite(pred)):
            raise NumericError(f"non-finite output for {path.name}")
        dst = out / (path.stem + ".ppm") if to_dir else out
        fileio.write_image(dst, pred)
        line = {"event": "deblur", "id": path.stem, "h": img.shape[2], "w": img.shape[3], "time_ms": ms}
        if ref_dir is not None:
            ref_path = next((p for p in list_images(ref_dir) if p.stem == path.stem), None)
            if ref_path is None:
                raise FileNotFoundError(f"no reference image for {path.stem} in {ref_dir}")
            # score what was written, after 8-bit quantisation
            written = fileio.read_image(dst) if dst.suffix.lower() in (".ppm", ".pgm", ".pnm") else pred
            ref = fileio.read_image(ref_path)
            p, s = training.psnr(written, ref), training.ssim(written, ref)
            scores.append((p, s))
            line.update(psnr=p, ssim=s)
        emit(**line)
    if scores:
        emit(event="summary", images=len(scores), psnr=float(np.mean([p for p, _ in scores])),
             ssim=float(np.mean([s for _, s in scores])))
    return 0


# ---------------------------------------------------------------------------
# train


def _train_config(extra: dict, steps: int, seed: int) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        if f.name not in extra:
            continue
        raw = extra[f.name]
        try:
            if f.name == "betas":
                kw[f.name] = tuple(float(x) for x in raw.split(","))
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        except ValueError:
            raise ConfigError(f"{f.name}: cannot parse {raw!r}") from None
    kw.setdefault("total_steps", max(steps, 1))
    kw["seed"] = seed
    return TrainConfig(**kw)


def cmd_train(args) -> int:
    config, extra = load_config_file(args.config)
    seed = default_seed(args.seed, int(extra.get("seed", 0)))
    cfg = _train_config(extra, args.steps, seed)
    if args.steps > cfg.total_steps:
        raise UsageError(f"--steps {args.steps} exceeds total_steps={cfg.total_steps} in the config")
    ckpt_every = args.ckpt_every if args.ckpt_every is not None else int(extra.get("ckpt_every", 0))

    if args.resume:
        model, state = fileio.load_checkpoint(args.resume)
        if model.config != config:
            sys.stderr.write("resume config mismatch\n--- checkpoint ---\n" + model.config.dumps()
                             + "--- requested ---\n" + config.dumps())
            raise UsageError("resume config mismatch (both configs printed above)")
        state = state or training.OptimState.zeros_like(model.parameters())
    else:
        model, state = build(config, seed), None
    state = state or training.OptimState.zeros_like(model.parameters())

    samples, skipped = training.load_pairs(args.data)
    if not samples:
        raise FileNotFoundError(f"no paired images under {args.data}")
    emit(event="start", samples=len(samples), skipped=skipped, seed=seed, start_step=state.t,
         stop_step=args.steps, total_steps=cfg.total_steps, identity_psnr=training.identity_psnr(samples))

    out = Path(args.out)

    def on_event(ev):
        emit(**ev)
        if ev["event"] == "step" and ckpt_every and ev["step"] % ckpt_every == 0 and ev["step"] < args.steps:
            fileio.save_checkpoint(out.with_name(f"{out.stem}.step{ev['step']}{out.suffix}"), model, state)

    if state.t < args.steps:
        training.train_loop(model, samples, cfg, state=state, stop_step=args.steps, on_event=on_event)
    fileio.save_checkpoint(out, model, state)
    emit(event="saved", path=str(out), step=state.t)
    return 0


# ---------------------------------------------------------------------------
# bench


@dataclass
class BenchReport:
    h: int
    w: int
    batch: int
    threads: int
    warmup: int
    samples_ms: list = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def fps(self) -> float:
        return 1e3 / self.mean_ms

    def summary(self) -> dict:
        return {"event": "bench", "h": self.h, "w": self.w, "batch": self.batch, "threads": self.threads,
                "warmup": self.warmup, "iters": len(self.samples_ms), "mean_ms": self.mean_ms,
                "median_ms": self.median_ms, "p95_ms": self.p95_ms, "fps": self.fps}


def bench(model, h: int = 256, w: int = 256, iters: int = 10, warmup: int = 2, threads: int = 1, seed: int = 0) -> BenchReport:
    """Time ``iters`` eval-mode forwards of a fixed random (1, 3, h, w) input."""
    from threadpoolctl import threadpool_limits

    if iters < 1 or warmup < 0 or threads < 1:
        raise UsageError("need iters >= 1, warmup >= 0, threads >= 1")
    model.eval()
    x = np.random.default_rng(seed).random((1, 3, h, w), dtype=np.float32)
    report = BenchReport(h, w, 1, threads, warmup)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            network.forward(model, x)
        for _ in range(iters):
            t0 = time.perf_counter()
            network.forward(model, x)
            report.samples_ms.append((time.perf_counter() - t0) * 1e3)
    return report


def cmd_bench(args) -> int:
    model, _ = fileio.load_checkpoint(args.model)
    report = bench(model, args.h, args.w, args.iters, args.warmup, args.threads, default_seed(args.seed))
    emit(**report.summary())
    if args.json:
        import json

        Path(args.json).write_text(json.dumps({**report.summary(), "samples_ms": report.samples_ms}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# count


def cmd_count(args) -> int:
    config, _ = load_config_file(args.config)
    if args.h % network.DIVISOR or args.w % network.DIVISOR:
        raise UsageError(f"--h and --w must be divisible by {network.DIVISOR}")
    params = network.count_params_config(config)
    macs = network.count_macs_config(config, args.h, args.w)
    emit(event="count", h=args.h, w=args.w, params=params, macs=macs,
         params_M=f"{params / 1e6:.2f}", gmacs=f"{macs / 1e9:.2f}")
    return 0


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    seed = default_seed(args.seed)
    rng = np.random.default_rng(seed)
    training.parse_kernel(args.kernel, np.random.default_rng(0))  # validate before touching disk
    sources = list_images(Path(args.sharp))
    if not sources or not sources[0].exists():
        raise FileNotFoundError(f"no sharp images at {args.sharp}")
    out = Path(args.out)
    (out / "blur").mkdir(parents=True, exist_ok=True)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    for path in sources:
        sharp = fileio.read_image(path)[0]
        kernel = training.parse_kernel(args.kernel, rng)
        fileio.write_image(out / "sharp" / f"{path.stem}.ppm", sharp)
        fileio.write_image(out / "blur" / f"{path.stem}.ppm", training.synth_blur(sharp, kernel))
        emit(event="pair", id=path.stem, kernel_h=kernel.shape[0], kernel_w=kernel.shape[1])
    emit(event="done", pairs=len(sources), out=str(out))
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rtfocuser", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("deblur", help="restore one image or a directory of images")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--reference", help="directory of sharp images with matching ids")
    d.set_defaults(func=cmd_deblur)

    t = sub.add_parser("train", help="train on a blur/ sharp/ dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int, required=True, help="stop once this many optimiser steps are done")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt-every", type=int, help="also write <out>.step<K> every K steps")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="single-image latency benchmark")
    b.add_argument("--model", required=True)
    b.add_argument("--h", type=int, default=256)
    b.add_argument("--w", type=int, default=256)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int)
    b.add_argument("--json", help="also write the full report, including per-iteration samples")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("count", help="exact parameter and MAC counts")
    c.add_argument("--config")
    c.add_argument("--h", type=int, default=256)
    c.add_argument("--w", type=int, default=256)
    c.set_defaults(func=cmd_count)

    g = sub.add_parser("gen-data", help="synthesise motion-blurred pairs from sharp images")
    g.add_argument("--sharp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--kernel", default="linear:len=9,angle=30")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if getattr(args, "steps", 0) is not None and getattr(args, "steps", 0) < 0:
            raise UsageError("--steps must be >= 0")
        return args.func(args)
    except (UsageError, ConfigError, training.ShapeError, ValueError) as e:
        if isinstance(e, (fileio.CheckpointError, fileio.ImageFormatError)):
            code = EXIT_IO
        else:
            code = EXIT_USAGE
        sys.stderr.write(f"error: {e}\n")
        return code
    except NumericError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_NUMERIC
    except OSError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
