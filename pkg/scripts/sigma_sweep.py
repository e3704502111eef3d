"""bench-v1 mAP@0.5 as human-score noise rises.

    python3 scripts/sigma_sweep.py --out /tmp/sweep --sigmas 0 0.1 0.2
"""
import argparse

from tubeloc.experiments import sigma_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.1, 0.2])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for s, m in sigma_sweep(args.out, args.sigmas, args.seed):
        print(f"sigma={s:g}  map={m:.4f}")


if __name__ == "__main__":
    main()
