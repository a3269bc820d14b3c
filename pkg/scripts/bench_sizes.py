"""Single-thread latency of a freshly built default model at several input sizes.

    python3 scripts/bench_sizes.py [--sizes 128 256] [--iters 5]

Weights do not affect latency, so no checkpoint is needed. Numbers are
machine-dependent.
"""
import argparse

from rtfocuser.cli import bench
from rtfocuser.network import NetworkConfig, build, count_macs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[128, 256])
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--warmup", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    model = build(NetworkConfig())
    for s in args.sizes:
        r = bench(model, s, s, args.iters, args.warmup, args.threads)
        gmacs = count_macs(model, s, s) / 1e9
        print(f"size={s} gmacs={gmacs:.2f} median_ms={r.median_ms:.1f} p95_ms={r.p95_ms:.1f} fps={r.fps:.2f} "
              f"gmacs_per_s={gmacs * r.fps:.2f}", flush=True)


if __name__ == "__main__":
    main()
