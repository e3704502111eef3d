"""Tube recall and one full bench-v1 run.

    python3 scripts/run_bench.py --out /tmp/bench --sigma 0.05
"""
import argparse
import json

from tubeloc import synth
from tubeloc.experiments import bench_run, tube_recall


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--sigma", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    r = tube_recall(synth.generate(synth.bench_v1(score_noise=args.sigma)))
    print(f"recall@0.5 {r['recall']:.4f}  tubes/video {r['tubes_per_video']:.3f}  {r['seconds']:.1f}s")
    metrics = bench_run(args.out, args.sigma, args.seed, args.jobs)
    for (m, c), v in sorted(metrics.items(), key=lambda kv: (kv[0][0], kv[0][1] or "")):
        if c is None and not isinstance(v, list):
            print(f"{m:16s} {json.dumps(v)}")


if __name__ == "__main__":
    main()
