"""CorLoc traces of plain (K=1) and multi-fold MIL on the lock-in benchmark.

    python3 scripts/mil_lockin.py --out /tmp/lockin --folds 1 4
"""
import argparse

from tubeloc.experiments import mean_trace, mil_lockin


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--folds", type=int, nargs="+", default=[1, 4])
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    traces = mil_lockin(args.out, tuple(args.folds), args.iterations, args.seed)
    for k, per_class in traces.items():
        print(f"K={k}: " + " ".join(f"{v:.3f}" for v in mean_trace(per_class)))


if __name__ == "__main__":
    main()
