"""Search widths/depths for a config that fits the 5.85M param / 15.76 GMAC budget.

    python3 scripts/calibrate.py [--tolerance 0.15]

Prints every candidate's counts and relative errors, then the chosen config.
"""
import argparse

from rtfocuser.network import (DEPTH_CANDIDATES, PAPER_MACS, PAPER_PARAMS, WIDTH_CANDIDATES, NetworkConfig,
                               calibrate, count_macs_config, count_params_config)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tolerance", type=float, default=0.15)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args()

    print(f"{'W':>3} {'depths':<14} {'params':>10} {'dP':>7} {'MACs':>14} {'dM':>7}")
    for w in WIDTH_CANDIDATES:
        for d in DEPTH_CANDIDATES:
            cfg = NetworkConfig(base_width=w, encoder_depths=d)
            p, m = count_params_config(cfg), count_macs_config(cfg, args.size, args.size)
            print(f"{w:>3} {str(list(d)):<14} {p:>10} {p / PAPER_PARAMS - 1:>+7.1%} {m:>14} {m / PAPER_MACS - 1:>+7.1%}")
    cfg = calibrate(tolerance=args.tolerance, h=args.size, w=args.size)
    print("\nchosen:")
    print(cfg.dumps(), end="")


if __name__ == "__main__":
    main()
