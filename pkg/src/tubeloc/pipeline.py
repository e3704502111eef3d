"""File-level pipeline stages and the end-to-end run.

Every stage reads only files named in the video manifest or produced by an
earlier stage, and writes its outputs in a canonical order so that reruns
(with any ``jobs`` value) are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

import tubeloc
from tubeloc import svm
from tubeloc.config import ConfigError, RunConfig
from tubeloc.core import Tube, read_tubes, write_tubes_binary
from tubeloc.detect import (DetectConfig, Detection, ShotList, WindowSpec, detect_video, detection_sort_key,
                            read_detections, read_shots, write_detections)
from tubeloc.encoder import (Codebooks, TrajectorySet, VideoEncoder, fit_codebooks, load_codebooks,
                             read_descriptors, read_trajectories, save_codebooks, write_descriptors)
from tubeloc.evaluation import (GroundTruthInstance, MatchPolicy, auc_roc, best_per_video,
                                clip_classification_map, corloc, mean_average_precision, mean_iou,
                                precision_recall, read_gt, recall_curve, roc_points, top_detections)
from tubeloc.mil import LabeledVideo, MilConfig, mil_train, two_stage_train
from tubeloc.scorefield import GridField, ScoreField, SyntheticField
from tubeloc.tracker import NeighborhoodSpec, TrackerConfig, extract_tubes

log = logging.getLogger(__name__)

METRICS = ("recall", "corloc", "map", "auc", "meaniou", "clipmap")


class ManifestError(ConfigError):
    """Manifest is malformed or references missing files."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    n_frames: int
    width: float
    height: float
    field: str
    trajectories: str
    labels: tuple = ()
    split: str | None = None
    gt: str | None = None
    tube_gt: str | None = None
    shots: str | None = None
    root: str = "."

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p


_ENTRY_KEYS = {"video_id", "n_frames", "width", "height", "field", "trajectories", "labels", "split", "gt",
               "tube_gt", "shots", "dissimilarity"}


def load_manifest(path) -> list[VideoEntry]:
    """Entries sorted by video id; ids must be unique and files must exist."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    entries, seen = [], set()
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{n}: {e}") from None
            unknown = set(rec) - _ENTRY_KEYS
            if unknown:
                raise ManifestError(f"{path}:{n}: unknown manifest keys {sorted(unknown)}")
            try:
                e = VideoEntry(rec["video_id"], int(rec["n_frames"]), float(rec["width"]), float(rec["height"]),
                               rec["field"], rec["trajectories"], tuple(rec.get("labels", ())), rec.get("split"),
                               rec.get("gt"), rec.get("tube_gt"), rec.get("shots"), str(path.parent))
            except KeyError as e:
                raise ManifestError(f"{path}:{n}: missing manifest key {e}") from None
            if e.video_id in seen:
                raise ManifestError(f"{path}:{n}: duplicate video id {e.video_id!r}")
            seen.add(e.video_id)
            for rel in (e.trajectories, e.gt, e.tube_gt, e.shots, _field_file(e.field)):
                if rel is not None and not e.path(rel).exists():
                    raise ManifestError(f"{path}:{n}: {e.video_id} references missing file {rel}")
            entries.append(e)
    return sorted(entries, key=lambda e: e.video_id)


def _field_file(spec: str) -> str | None:
    kind, _, rest = spec.partition(":")
    if kind not in ("synth", "grid") or not rest:
        raise ManifestError(f"field spec {spec!r} must be synth:<path> or grid:<path>")
    return None if "{video_id}" in rest else rest


def select_split(entries: list[VideoEntry], split: str | None) -> list[VideoEntry]:
    if split is None or all(e.split is None for e in entries):
        return list(entries)
    return [e for e in entries if e.split == split]


def open_field(entry: VideoEntry, override: str | None = None) -> ScoreField:
    spec = (override or entry.field).replace("{video_id}", entry.video_id)
    kind, _, rest = spec.partition(":")
    target = entry.path(rest)
    if kind == "synth":
        from tubeloc.synth import load_world_videos

        videos = load_world_videos(target)
        if entry.video_id not in videos:
            raise ManifestError(f"{target} has no video {entry.video_id!r}")
        return SyntheticField(videos[entry.video_id])
    if kind == "grid":
        return GridField(target, video_id=entry.video_id)
    raise ManifestError(f"field spec {spec!r} must be synth:<path> or grid:<path>")


_CACHE: dict[tuple, object] = {}


def _cached(kind: str, path: Path, loader: Callable):
    key = (kind, str(path.resolve()), path.stat().st_mtime_ns)
    if key not in _CACHE:
        _CACHE[key] = loader(path)
    return _CACHE[key]


def entry_shots(entry: VideoEntry) -> ShotList:
    if entry.shots is None:
        return ShotList.whole(entry.video_id, entry.n_frames)
    shots = _cached("shots", entry.path(entry.shots), read_shots)
    if entry.video_id not in shots:
        return ShotList.whole(entry.video_id, entry.n_frames)
    return shots[entry.video_id]


def entry_trajectories(entry: VideoEntry) -> TrajectorySet:
    return read_trajectories(entry.path(entry.trajectories), entry.video_id)


def gather_gt(entries: Iterable[VideoEntry], which: str = "gt") -> list[GroundTruthInstance]:
    out = []
    for e in entries:
        rel = getattr(e, which)
        if rel is None:
            continue
        out += [g for g in _cached("gt", e.path(rel), read_gt) if g.video_id == e.video_id]
    return out


def tubes_by_video(tubes: Sequence[Tube]) -> dict[str, list[Tube]]:
    out: dict[str, list[Tube]] = {}
    for t in tubes:
        out.setdefault(t.video_id, []).append(t)
    return out


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# stages

def synth_gen(world: dict, out_dir) -> Path:
    from tubeloc.synth import WorldConfig, generate, write_world

    cfg = WorldConfig.from_dict(world)
    write_world(generate(cfg), out_dir)
    return Path(out_dir) / "manifest.jsonl"


def tracker_config(run: RunConfig) -> TrackerConfig:
    t = run.tracker
    return TrackerConfig(NeighborhoodSpec(stride=float(t.stride)), C=float(t.C), suppression_iou=float(t.suppression_iou),
                         use_instance=bool(t.use_instance), warm_start=bool(t.warm_start),
                         max_tubes=t.max_tubes, seed=int(run.seed))


def _extract_one(args) -> list[Tube]:
    entry, tcfg, field_override = args
    f = open_field(entry, field_override)
    tubes = []
    for shot in entry_shots(entry).shots:
        tubes += extract_tubes(f, (shot.start, shot.end), tcfg, video_id=entry.video_id)
    return tubes


def extract_stage(manifest, out, tcfg: TrackerConfig, jobs: int = 1, split: str | None = None,
                  field_override: str | None = None) -> list[Tube]:
    entries = select_split(load_manifest(manifest), split)
    results = _map(_extract_one, [(e, tcfg, field_override) for e in entries], jobs)
    tubes = [t for r in results for t in r]
    write_tubes_binary(out, tubes)
    return tubes


def fit_codebooks_stage(manifest, out, K: int, seed: int, pca_factor: int = 2, max_iter: int = 100,
                        max_samples: int = 20000, split: str | None = "train") -> Codebooks:
    entries = select_split(load_manifest(manifest), split)
    pooled: dict[str, list[np.ndarray]] = {}
    for e in entries:
        for ch, v in entry_trajectories(e).channels.items():
            pooled.setdefault(ch, []).append(v)
    if not pooled:
        raise ValueError("no trajectories to fit codebooks on")
    samples = {ch: np.vstack(v) for ch, v in pooled.items()}
    n = len(next(iter(samples.values())))
    if n > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(n, max_samples, replace=False))
        samples = {ch: v[idx] for ch, v in samples.items()}
    books = fit_codebooks(samples, K, seed=seed, pca_factor=pca_factor, max_iter=max_iter)
    save_codebooks(out, books)
    return books


def encode_stage(manifest, tubes_path, codebooks_path, out) -> np.ndarray:
    entries = {e.video_id: e for e in load_manifest(manifest)}
    books = load_codebooks(codebooks_path)
    tubes = read_tubes(tubes_path)
    rows = []
    for vid, ts in tubes_by_video(tubes).items():
        if vid not in entries:
            raise ManifestError(f"tube file refers to video {vid!r} missing from the manifest")
        enc = VideoEncoder(books, entry_trajectories(entries[vid]))
        rows += [enc.encode(t) for t in ts]
    X = np.array(rows).reshape(len(rows), books.dim)
    write_descriptors(out, X)
    return X


def read_labels(path) -> dict[str, dict]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["video_id"]] = rec
    return out


def train_stage(tubes_path, descriptors_path, labels_path, out_dir, mcfg: MilConfig, mode: str = "mil",
                classes: Sequence[str] | None = None, corloc_gt: Sequence[GroundTruthInstance] = (),
                theta: float = 0.5, corloc_mode: str = "trimmed",
                segment_gt: Sequence[GroundTruthInstance] = (), manifest=None, codebooks_path=None,
                split: str | None = "train") -> dict[str, dict]:
    """Train one model per class; writes ``<class>.svm`` and ``<class>.corloc.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tubes = read_tubes(tubes_path)
    X = read_descriptors(descriptors_path)
    if len(X) != len(tubes):
        raise ValueError(f"{len(tubes)} tubes but {len(X)} descriptors")
    labels = read_labels(labels_path)
    rows: dict[str, list[int]] = {}
    for i, t in enumerate(tubes):
        rows.setdefault(t.video_id, []).append(i)
    by_video = tubes_by_video(tubes)
    train_ids = sorted(v for v, rec in labels.items()
                       if split is None or rec.get("split") in (None, split))
    videos = []
    for v in train_ids:
        if v not in rows:
            log.warning("training video %s has no tubes; skipped", v)
            continue
        idx = rows[v]
        videos.append(LabeledVideo(v, labels[v]["labels"], X[idx],
                                   np.array([tubes[i].score for i in idx])))
    if classes is None or len(classes) == 0:
        classes = sorted({c for v in videos for c in v.labels})

    segment_fn = None
    if mode == "two-stage":
        if manifest is None or codebooks_path is None:
            raise ValueError("two-stage training needs the manifest and codebooks")
        entries = {e.video_id: e for e in load_manifest(manifest)}
        books = load_codebooks(codebooks_path)
        seg = {(g.video_id, g.label): (g.tube.start, g.tube.end) for g in segment_gt}
        encoders: dict[str, VideoEncoder] = {}

        def segment_fn_for(label):
            def fn(vid, t):
                if vid not in encoders:
                    encoders[vid] = VideoEncoder(books, entry_trajectories(entries[vid]))
                return encoders[vid].encode(by_video[vid][t], seg[(vid, label)])
            return fn
        segment_fn = segment_fn_for

    summary = {}
    for c in classes:
        gts_c = [g for g in corloc_gt if g.label == c]

        def corloc_fn(sel, c=c, gts_c=gts_c):
            return corloc({v: by_video[v][t] for v, t in sel.items()}, gts_c, c, theta, corloc_mode)

        fn = corloc_fn if gts_c else None
        if mode == "two-stage":
            model, result = two_stage_train(c, videos, mcfg, segment_fn(c), fn)
        else:
            result = mil_train(c, videos, mcfg, fn)
            model = result.model
        svm.save_model(out_dir / f"{c}.svm", model)
        with open(out_dir / f"{c}.corloc.jsonl", "w") as f:
            for it, v in enumerate(result.corloc_trace):
                f.write(json.dumps({"class": c, "iteration": it, "corloc": v, "theta": theta}, sort_keys=True) + "\n")
        with open(out_dir / f"{c}.selection.jsonl", "w") as f:
            for v in sorted(result.state.positives):
                f.write(json.dumps({"video_id": v, "tube": result.state.positives[v]}, sort_keys=True) + "\n")
        gaps = [m.duality_gap for m in result.models] + [model.duality_gap]
        summary[c] = {"corloc_trace": result.corloc_trace, "max_duality_gap": float(max(gaps)),
                      "n_svm": len(gaps)}
    return summary


def load_models(models_dir) -> dict[str, svm.LinearModel]:
    models = {p.stem: svm.load_model(p) for p in sorted(Path(models_dir).glob("*.svm"))}
    if not models:
        raise ValueError(f"no models in {models_dir}")
    return models


def _detect_one(args) -> list[Detection]:
    entry, models, books, dcfg, tubes, tcfg, field_override = args
    f = None if tubes is not None else open_field(entry, field_override)
    return detect_video(models, f, entry_trajectories(entry), books, dcfg, entry_shots(entry), tcfg,
                        entry.video_id, tubes)


def detect_stage(models_dir, manifest, codebooks_path, out, dcfg: DetectConfig, tubes_path=None,
                 tcfg: TrackerConfig | None = None, jobs: int = 1, split: str | None = "test",
                 field_override: str | None = None) -> list[Detection]:
    models = load_models(models_dir)
    books = load_codebooks(codebooks_path)
    entries = select_split(load_manifest(manifest), split)
    stored = tubes_by_video(read_tubes(tubes_path)) if tubes_path is not None else None
    jobs_in = [(e, models, books, dcfg, None if stored is None else stored.get(e.video_id, []), tcfg,
                field_override) for e in entries]
    dets = [d for r in _map(_detect_one, jobs_in, jobs) for d in r]
    dets.sort(key=detection_sort_key)
    write_detections(out, dets)
    return dets


# --------------------------------------------------------------------------
# evaluation

def _rec(metric: str, value, **kw) -> dict:
    return {"metric": metric, "value": value, **kw}


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def pr_curve(detections, gts, policy: MatchPolicy, label: str):
    dets = [d for d in detections if d.label == label]
    g = [x for x in gts if x.label == label]
    tp, n_gt = precision_recall(dets, g, policy)
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
    rec = ctp / n_gt if n_gt else np.zeros(len(tp))
    scores = sorted((d.score for d in dets), reverse=True)
    return [(k + 1, scores[k], float(prec[k]), float(rec[k])) for k in range(len(tp))]


def evaluate(detections: Sequence[Detection], gts: Sequence[GroundTruthInstance], metrics: Sequence[str],
             theta: float = 0.5, mode: str = "st", fpr_max: float = 0.6, eleven_point: bool = False,
             proposals: dict[str, list[Tube]] | None = None, tube_gts: Sequence[GroundTruthInstance] = (),
             recall_mode: str = "trimmed", thetas: Sequence[float] = (), corloc_traces: dict | None = None,
             curves_dir=None) -> list[dict]:
    """Metric records (and curve CSVs when ``curves_dir`` is given)."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    curves = Path(curves_dir) if curves_dir is not None else None
    classes = sorted({g.label for g in gts})
    videos = sorted({g.video_id for g in gts})
    recs: list[dict] = []
    if "recall" in metrics:
        if proposals is None:
            raise ValueError("recall needs tube proposals")
        tg = [g for g in tube_gts if g.video_id in proposals]
        rc = recall_curve(proposals, tg, list(thetas) or None, theta=theta, mode=recall_mode)
        at = rc["recall_by_theta"][rc["thetas"].index(theta)] if theta in rc["thetas"] else \
            recall_curve(proposals, tg, [theta], budgets=[], mode=recall_mode)["recall_by_theta"][0]
        recs.append(_rec("recall", at, theta=theta, mode=recall_mode))
        recs.append(_rec("tubes_per_video", float(np.mean([len(v) for v in proposals.values()])) if proposals else 0.0))
        if curves is not None:
            _write_csv(curves / "recall_theta.csv", ["theta", "recall"], zip(rc["thetas"], rc["recall_by_theta"]))
            _write_csv(curves / "recall_budget.csv", ["tubes", "recall"], zip(rc["budgets"], rc["recall_by_budget"]))
    if "corloc" in metrics and corloc_traces:
        for c in sorted(corloc_traces):
            trace = corloc_traces[c]
            if trace:
                recs.append(_rec("corloc", trace[-1], **{"class": c}, theta=theta))
                recs.append(_rec("corloc_trace", list(trace), **{"class": c}, theta=theta))
        finals = [corloc_traces[c][-1] for c in sorted(corloc_traces) if corloc_traces[c]]
        if finals:
            recs.append(_rec("mean_corloc", float(np.mean(finals)), theta=theta))
    if "map" in metrics:
        policy = MatchPolicy(theta=theta, mode=mode, eleven_point=eleven_point)
        m, per = mean_average_precision(detections, gts, policy, classes)
        for c in classes:
            recs.append(_rec("ap", per[c], **{"class": c}, theta=theta, mode=mode))
            if curves is not None:
                _write_csv(curves / f"pr_{c}.csv", ["rank", "score", "precision", "recall"],
                           pr_curve(detections, gts, policy, c))
        recs.append(_rec("map", m, theta=theta, mode=mode))
    if "auc" in metrics:
        top = top_detections(detections, videos, classes)
        recs.append(_rec("auc", auc_roc(top, gts, theta, fpr_max, mode), theta=theta, mode=mode, fpr_max=fpr_max))
        if curves is not None:
            fpr, tpr = roc_points(top, gts, theta, mode)
            _write_csv(curves / "roc.csv", ["fpr", "tpr"], zip(fpr, tpr))
    if "meaniou" in metrics:
        best = {k: d.tube for k, d in best_per_video(detections).items()}
        per = mean_iou(best, gts, mode)
        for c in classes:
            recs.append(_rec("meaniou", per[c], **{"class": c}, mode=mode))
        recs.append(_rec("mean_meaniou", float(np.mean(list(per.values()))) if per else 0.0, mode=mode))
    if "clipmap" in metrics:
        best = best_per_video(detections)
        S = np.array([[best[(v, c)].score if (v, c) in best else -np.inf for c in classes] for v in videos])
        L = np.array([[any(g.video_id == v and g.label == c for g in gts) for c in classes] for v in videos])
        m, per = clip_classification_map(S.reshape(len(videos), len(classes)), L.reshape(S.shape))
        recs.append(_rec("clipmap", m))
    return recs


def write_metrics(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def read_corloc_traces(models_dir) -> dict[str, list[float]]:
    out = {}
    for p in sorted(Path(models_dir).glob("*.corloc.jsonl")):
        with open(p) as f:
            recs = [json.loads(line) for line in f if line.strip()]
        out[p.name[: -len(".corloc.jsonl")]] = [r["corloc"] for r in sorted(recs, key=lambda r: r["iteration"])]
    return out


def eval_stage(detections_path, gts: Sequence[GroundTruthInstance], metrics: Sequence[str], out,
               curves_dir=None, theta: float = 0.5, mode: str = "st", fpr_max: float = 0.6,
               eleven_point: bool = False, tubes_path=None, tube_gts: Sequence[GroundTruthInstance] = (),
               recall_mode: str = "trimmed", thetas: Sequence[float] = (), models_dir=None) -> list[dict]:
    dets = read_detections(detections_path)
    proposals = tubes_by_video(read_tubes(tubes_path)) if tubes_path is not None else None
    traces = read_corloc_traces(models_dir) if models_dir is not None else None
    recs = evaluate(dets, gts, metrics, theta, mode, fpr_max, eleven_point, proposals, tube_gts,
                    recall_mode, thetas, traces, curves_dir)
    write_metrics(out, recs)
    return recs


# --------------------------------------------------------------------------
# end-to-end

STAGES = ("synth-gen", "extract-tubes", "fit-codebooks", "encode-tubes", "train", "detect", "eval")


def mil_config(run: RunConfig) -> MilConfig:
    m = run.mil
    return MilConfig(folds=int(m.folds), iterations=int(m.iterations), hard_negative_rounds=int(m.hard_negative_rounds),
                     seed=int(run.seed), C=float(m.C))


def detect_config(run: RunConfig) -> DetectConfig:
    d = run.detect
    return DetectConfig(WindowSpec.preset(d.windows, int(d.stride), float(d.alpha)), nms=bool(d.nms),
                        nms_iou=float(d.nms_iou))


def run_record(cfg: RunConfig, status: str, outputs: dict, metrics: list[dict], failed: str | None = None,
               train_summary: dict | None = None) -> dict:
    body = cfg.to_dict()
    body.pop("jobs")
    rec = {"config": body, "config_hash": RunConfig.digest_of(body), "status": status,
           "seeds": {"run": cfg.seed, "tracker": cfg.seed, "codebooks": cfg.seed, "mil": cfg.seed,
                     "world": (cfg.world or {}).get("seed")},
           "versions": {"tubeloc": tubeloc.__version__, "numpy": np.__version__, "numba": numba.__version__,
                        "python": platform.python_version()},
           "stages": list(STAGES if cfg.world is not None else STAGES[1:]),
           "outputs": outputs, "metrics": metrics}
    if train_summary is not None:
        rec["training"] = train_summary
    if failed is not None:
        rec["failed_stage"] = failed
    return rec


def run_pipeline(cfg: RunConfig, out_dir) -> Path:
    """Run every stage into ``out_dir`` and write ``run.json``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"tubes": "tubes.bin", "codebooks": "codebooks.npz", "descriptors": "descriptors.bin",
               "models": "models", "detections": "detections.jsonl", "metrics": "metrics.jsonl",
               "curves": "curves"}
    stage = "setup"
    train_summary = None

    def record(status, metrics, failed=None):
        (out / "run.json").write_text(json.dumps(run_record(cfg, status, outputs, metrics, failed, train_summary),
                                                 sort_keys=True, indent=1) + "\n")

    try:
        if cfg.world is not None:
            stage = "synth-gen"
            manifest = synth_gen({**cfg.world}, out / "data")
            outputs["manifest"] = "data/manifest.jsonl"
        elif cfg.manifest is not None:
            manifest = Path(cfg.manifest)
            outputs["manifest"] = str(manifest.resolve())
        else:
            raise ConfigError("run needs either a [world] section or a manifest path")
        entries = load_manifest(manifest)
        stage = "extract-tubes"
        tcfg = tracker_config(cfg)
        extract_stage(manifest, out / "tubes.bin", tcfg, cfg.jobs)
        stage = "fit-codebooks"
        c = cfg.codebooks
        fit_codebooks_stage(manifest, out / "codebooks.npz", int(c.K), int(cfg.seed), int(c.pca_factor),
                            int(c.max_iter), int(c.max_samples))
        stage = "encode-tubes"
        encode_stage(manifest, out / "tubes.bin", out / "codebooks.npz", out / "descriptors.bin")
        stage = "train"
        labels = out / "labels.jsonl"
        with open(labels, "w") as f:
            for e in entries:
                f.write(json.dumps({"video_id": e.video_id, "labels": list(e.labels), "split": e.split},
                                   sort_keys=True) + "\n")
        outputs["labels"] = "labels.jsonl"
        train_entries = select_split(entries, "train")
        train_summary = train_stage(out / "tubes.bin", out / "descriptors.bin", labels, out / "models", mil_config(cfg),
                                    cfg.mil.mode, cfg.mil.classes or None, gather_gt(train_entries, "tube_gt"),
                                    cfg.eval.theta, cfg.eval.recall_mode, gather_gt(train_entries, "gt"),
                                    manifest, out / "codebooks.npz")
        stage = "detect"
        detect_stage(out / "models", manifest, out / "codebooks.npz", out / "detections.jsonl", detect_config(cfg),
                     out / "tubes.bin", tcfg, cfg.jobs)
        stage = "eval"
        e = cfg.eval
        metrics = eval_stage(out / "detections.jsonl", gather_gt(select_split(entries, "test"), "gt"), METRICS,
                             out / "metrics.jsonl", out / "curves", e.theta, e.mode, e.fpr_max, e.eleven_point,
                             out / "tubes.bin", gather_gt(entries, "tube_gt"), e.recall_mode, e.thetas, out / "models")
    except ConfigError:
        record("failed", [], stage)
        raise
    except Exception as exc:  # noqa: BLE001 - tagged and re-raised
        record("failed", [], stage)
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    record("complete", metrics)
    return out


# --------------------------------------------------------------------------
# reporting

def _metric_key(r: dict) -> tuple:
    return (r["metric"], r.get("class", ""), r.get("theta", ""), r.get("mode", ""))


def load_run(run_dir) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    rj = run_dir / "run.json"
    if not rj.exists():
        raise ValueError(f"{run_dir} has no run.json")
    rec = json.loads(rj.read_text())
    if rec.get("status") != "complete":
        raise ValueError(f"run in {run_dir} is incomplete (failed at {rec.get('failed_stage')})")
    return rec, read_metrics(run_dir / "metrics.jsonl")


def summary_table(metrics: list[dict]) -> tuple[list[str], list[list]]:
    cols = ["ap", "meaniou", "corloc"]
    per: dict[str, dict[str, float]] = {}
    for r in metrics:
        if r["metric"] in cols and "class" in r:
            per.setdefault(r["class"], {})[r["metric"]] = r["value"]
    rows = [[c] + [per[c].get(k) for k in cols] for c in sorted(per)]
    if len(rows) > 1:
        mean = ["mean"]
        for j in range(1, len(cols) + 1):
            vals = [r[j] for r in rows if r[j] is not None]
            mean.append(float(np.mean(vals)) if vals else None)
        rows.append(mean)
    return ["class"] + cols, rows


def format_table(header, rows) -> str:
    cells = [header] + [[r[0]] + ["-" if v is None else f"{v:.4f}" for v in r[1:]] for r in rows]
    widths = [max(len(str(row[j])) for row in cells) for j in range(len(header))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def diff_metrics(a: list[dict], b: list[dict]) -> list[str]:
    """Field-level differences between two metric sets."""
    ka = {_metric_key(r): r for r in a}
    kb = {_metric_key(r): r for r in b}
    lines = []
    for k in sorted(set(ka) | set(kb), key=lambda k: tuple(map(str, k))):
        name = "/".join(str(x) for x in k if x != "")
        if k not in kb:
            lines.append(f"- {name}: {ka[k]['value']}")
        elif k not in ka:
            lines.append(f"+ {name}: {kb[k]['value']}")
        elif ka[k]["value"] != kb[k]["value"]:
            lines.append(f"~ {name}: {ka[k]['value']} -> {kb[k]['value']}")
    return lines


def report(run_dir, out_dir=None, other=None) -> str:
    """Summary table and CSVs (curves recomputed from the stored detections)."""
    run_dir = Path(run_dir)
    rec, metrics = load_run(run_dir)
    header, rows = summary_table(metrics)
    text = format_table(header, rows)
    scalars = [r for r in metrics if "class" not in r and not isinstance(r["value"], list)]
    text += "".join(f"{r['metric']}: {r['value']:.4f}\n" for r in sorted(scalars, key=_metric_key))
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "per_class.csv", header, [[r[0]] + ["" if v is None else v for v in r[1:]] for r in rows])
    cfg = rec["config"]
    e = cfg["eval"]
    entries = load_manifest(_resolve_manifest(run_dir, rec))
    evaluate(read_detections(run_dir / "detections.jsonl"), gather_gt(select_split(entries, "test"), "gt"),
             METRICS, e["theta"], e["mode"], e["fpr_max"], e["eleven_point"],
             tubes_by_video(read_tubes(run_dir / "tubes.bin")), gather_gt(entries, "tube_gt"), e["recall_mode"],
             e["thetas"], read_corloc_traces(run_dir / "models"), out / "curves")
    if other is not None:
        _, m2 = load_run(other)
        lines = diff_metrics(metrics, m2)
        text += "\n" + ("\n".join(lines) if lines else "no metric differences") + "\n"
    (out / "summary.txt").write_text(text)
    return text


def _resolve_manifest(run_dir: Path, rec: dict) -> Path:
    m = Path(rec["outputs"]["manifest"])
    return m if m.is_absolute() else run_dir / m
