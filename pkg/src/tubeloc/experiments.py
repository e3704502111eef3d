"""Benchmark procedures shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from pathlib import Path
from typing import Sequence

import numpy as np

from tubeloc import pipeline, synth
from tubeloc.config import config_from_dict
from tubeloc.evaluation import recall_at
from tubeloc.mil import MilConfig
from tubeloc.tracker import TrackerConfig, extract_tubes

LOCKIN_CODEBOOK_K = 32


def tube_recall(world: synth.WorldInstance, cfg: TrackerConfig | None = None, theta: float = 0.5) -> dict:
    """Per-shot extraction over every video, scored against the actor tubes."""
    t0 = time.perf_counter()
    proposals = {}
    for v in world.videos:
        f = v.field()
        tubes = []
        for s in v.shots.shots:
            tubes += extract_tubes(f, (s.start, s.end), cfg, video_id=v.video_id)
        proposals[v.video_id] = tubes
    seconds = time.perf_counter() - t0
    gts = [v.gt_trimmed() for v in world.videos]
    return {"recall": recall_at(proposals, gts, theta, "trimmed"),
            "tubes_per_video": float(np.mean([len(t) for t in proposals.values()])),
            "seconds": seconds, "proposals": proposals}


def mil_lockin(workdir, folds: Sequence[int] = (1, 4), iterations: int = 10, seed: int = 0,
               codebook_k: int = LOCKIN_CODEBOOK_K, **world_overrides) -> dict[int, dict[str, list[float]]]:
    """CorLoc traces per fold count on the distractor lock-in benchmark."""
    out = Path(workdir)
    world = synth.generate(synth.lockin_benchmark(**world_overrides))
    synth.write_world(world, out / "data")
    manifest = out / "data" / "manifest.jsonl"
    pipeline.extract_stage(manifest, out / "tubes.bin", TrackerConfig(seed=seed))
    pipeline.fit_codebooks_stage(manifest, out / "codebooks.npz", codebook_k, seed, split=None)
    pipeline.encode_stage(manifest, out / "tubes.bin", out / "codebooks.npz", out / "descriptors.bin")
    gts = pipeline.gather_gt(pipeline.load_manifest(manifest), "tube_gt")
    traces = {}
    for k in folds:
        summary = pipeline.train_stage(out / "tubes.bin", out / "descriptors.bin", out / "data" / "labels.jsonl",
                                       out / f"models_k{k}", MilConfig(folds=k, iterations=iterations, seed=seed),
                                       corloc_gt=gts, split=None)
        traces[k] = {c: s["corloc_trace"] for c, s in summary.items()}
    return traces


def mean_trace(traces: dict[str, list[float]]) -> list[float]:
    return list(np.mean([traces[c] for c in sorted(traces)], axis=0))


def bench_run(out_dir, score_noise: float = 0.0, seed: int = 0, jobs: int = 1, **sections) -> dict:
    """Full bench-v1 run; returns the metric records keyed by (metric, class)."""
    cfg = config_from_dict({"seed": seed, "jobs": jobs, "world": {"score_noise": score_noise}, **sections})
    pipeline.run_pipeline(cfg, out_dir)
    recs = pipeline.read_metrics(Path(out_dir) / "metrics.jsonl")
    return {(r["metric"], r.get("class")): r["value"] for r in recs}


def sigma_sweep(out_root, sigmas: Sequence[float] = (0.0, 0.1, 0.2), seed: int = 0) -> list[tuple[float, float]]:
    out = []
    for s in sigmas:
        m = bench_run(Path(out_root) / f"sigma_{s:g}", s, seed)
        out.append((s, m[("map", None)]))
    return out
