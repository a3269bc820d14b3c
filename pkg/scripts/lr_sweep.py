"""Sweep peak learning rates for the overfit recipe; one result line per rate.

    python3 scripts/lr_sweep.py --lrs 5e-4 1e-3 2e-3 [--steps 500] [--lr-min-ratio 0.1]
"""
import argparse
import time

from rtfocuser.network import NetworkConfig, build
from rtfocuser.training import TrainConfig, evaluate, identity_psnr, make_synthetic_pairs, train_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lrs", type=float, nargs="+", default=[5e-4, 1e-3, 2e-3])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr-min-ratio", type=float, default=0.1)
    args = ap.parse_args()

    data = make_synthetic_pairs(8, 64, seed=0)
    base = identity_psnr(data)
    for lr in args.lrs:
        model = build(NetworkConfig(base_width=8, encoder_depths=(1, 1, 1, 1)), seed=0)
        cfg = TrainConfig(lr_max=lr, lr_min=lr * args.lr_min_ratio, total_steps=args.steps, batch_size=8, crop=64,
                          eval_every=0)
        t0 = time.perf_counter()
        train_loop(model, data, cfg)
        gain = evaluate(model, data) - base
        print(f"lr_max={lr:g} lr_min={cfg.lr_min:g} steps={args.steps} gain_db={gain:.3f} "
              f"seconds={time.perf_counter() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
