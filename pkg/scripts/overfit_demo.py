"""Overfit a tiny model on 8 synthetic pairs and report the PSNR gain over identity.

    python3 scripts/overfit_demo.py [--steps 500] [--lr-max 1e-3] [--lr-min 1e-4] [--out overfit.rtfw]

This is the recipe checked by acceptance criterion 5 (about 4 minutes on one core).
"""
import argparse

from rtfocuser.fileio import save_checkpoint
from rtfocuser.network import NetworkConfig, build
from rtfocuser.training import TrainConfig, evaluate, identity_psnr, make_synthetic_pairs, train_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr-max", type=float, default=1e-3)
    ap.add_argument("--lr-min", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    data = make_synthetic_pairs(8, 64, seed=args.seed)
    model = build(NetworkConfig(base_width=8, encoder_depths=(1, 1, 1, 1)), seed=args.seed)
    cfg = TrainConfig(lr_max=args.lr_max, lr_min=args.lr_min, total_steps=args.steps, batch_size=8, crop=64,
                      seed=args.seed, eval_every=max(1, args.steps // 10))
    base = identity_psnr(data)
    print(f"identity psnr {base:.3f} dB")

    def show(ev):
        if ev["event"] == "eval":
            print(f"step {ev['step']:>5}  psnr {ev['psnr']:.3f} dB  (+{ev['psnr'] - base:.2f})", flush=True)
        elif ev["step"] % 25 == 0 or ev["step"] == 1:
            print(f"step {ev['step']:>5}  lr {ev['lr']:.2e}  loss {ev['loss']:.6f}", flush=True)

    train_loop(model, data, cfg, on_event=show)
    final = evaluate(model, data)
    print(f"final psnr {final:.3f} dB, gain {final - base:+.2f} dB")
    if args.out:
        save_checkpoint(args.out, model)


if __name__ == "__main__":
    main()
