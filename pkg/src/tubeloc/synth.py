"""Seeded synthetic worlds and brute-force oracles.

A world is a set of short videos, each with one acting human and zero or
more non-acting humans moving in separate horizontal lanes. Each video may
contain a shot cut where every human jumps to a new position and size. The
world provides everything the pipeline consumes: a synthetic score field
per video, trajectories with per-channel descriptors, video labels, ground
truth action tubes, shot boundaries and a frame dissimilarity series.

Randomness comes from numpy's PCG64 generator. The world seed is expanded
with ``SeedSequence`` into one child stream per video, and each video
stream into one stream per purpose (tracks, appearance, trajectories), so
every video can be generated independently and in any order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tubeloc.core import Tube
from tubeloc.detect import ShotList, naive_shot_split, write_shots
from tubeloc.encoder import CHANNELS, TrajectorySet, write_trajectories
from tubeloc.evaluation import GroundTruthInstance, MatchPolicy, overlap, write_gt
from tubeloc.scorefield import SyntheticField, SyntheticVideo

log = logging.getLogger(__name__)

WORLD_VERSION = 1
SHOT_THRESHOLD = 0.5
DESK_RAW_DIMS = {"HOG": 8, "HOF": 10, "MBHx": 8, "MBHy": 8}


@dataclass
class WorldConfig:
    n_videos: int = 40
    n_frames: int = 120
    width: float = 320.0
    height: float = 240.0
    n_classes: int = 5
    humans_per_video: tuple[int, int] = (1, 3)
    stride: float = 4.0
    max_step: float = 2.0  # per-axis motion bound, in strides per frame
    box_width: tuple[float, float] = (40.0, 64.0)
    aspect: tuple[float, float] = (1.6, 2.1)
    scale_wobble: float = 0.05
    actor_visibility: float = 1.0
    distractor_visibility: float = 0.85
    distractor_boost_rate: float = 0.1
    boosted_actor_visibility: float = 0.8
    score_noise: float = 0.0
    det_jitter: float = 0.02
    embed_dim: int = 64
    embed_noise: float = 0.1
    embed_drift: float = 0.0
    trajectory_rate: float = 1.0
    background_rate: float = 1.0
    raw_dims: dict = field(default_factory=lambda: dict(DESK_RAW_DIMS))
    source_components: int = 3
    class_separation: float = 2.0
    descriptor_noise: float = 1.0
    shot_cut_rate: float = 0.5
    action_fraction: tuple[float, float] = (0.5, 0.9)
    min_action_frames: int = 20
    trimmed: bool = False
    keyframes: int = 0  # 0: dense ground truth; otherwise regularly sampled keyframes
    train_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        pos = ["n_videos", "n_frames", "width", "height", "n_classes", "stride", "embed_dim",
               "source_components"]
        for name in pos:
            if not getattr(self, name) > 0:
                raise ValueError(f"world config: {name} must be positive")
        lo, hi = self.humans_per_video
        if not 1 <= lo <= hi:
            raise ValueError("world config: humans_per_video must satisfy 1 <= lo <= hi")
        for name in ("score_noise", "det_jitter", "embed_noise", "embed_drift", "trajectory_rate",
                     "background_rate", "descriptor_noise", "max_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"world config: {name} must be >= 0")
        for name in ("distractor_boost_rate", "shot_cut_rate", "train_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"world config: {name} must be in [0, 1]")
        if self.box_width[1] * hi > self.width:
            raise ValueError("world config: lanes too narrow for the widest box")
        if self.box_width[1] * self.aspect[1] * (1 + self.scale_wobble) >= self.height:
            raise ValueError("world config: boxes taller than the image")
        if self.n_frames < self.min_action_frames:
            raise ValueError("world config: videos shorter than min_action_frames")
        if set(self.raw_dims) != set(CHANNELS):
            raise ValueError(f"world config: raw_dims must name channels {CHANNELS}")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("humans_per_video", "box_width", "aspect", "action_fraction"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def bench_v1(**overrides) -> WorldConfig:
    """Default desk-scale benchmark: 40 videos, 120 frames, 5 classes."""
    return WorldConfig(**overrides)


def lockin_benchmark(**overrides) -> WorldConfig:
    """Trimmed two-human scenes where a non-acting human sometimes outscores
    the actor, so the highest human score tube is wrong in those videos."""
    base = dict(n_videos=48, n_frames=40, n_classes=3, humans_per_video=(2, 2), shot_cut_rate=0.0,
                trimmed=True, distractor_boost_rate=0.3, train_fraction=1.0, trajectory_rate=0.5,
                background_rate=0.5, class_separation=0.75, descriptor_noise=1.0, seed=7)
    base.update(overrides)
    return WorldConfig(**base)


@dataclass(eq=False)
class VideoWorld:
    video_id: str
    label: str
    split: str
    n_frames: int
    width: float
    height: float
    tracks: np.ndarray  # (n_humans, n_frames, 4)
    visibility: np.ndarray
    prototypes: np.ndarray
    background: np.ndarray
    drift_dirs: np.ndarray
    actor: int
    boosted: bool
    action: tuple[int, int]
    action_shot: tuple[int, int]
    dissimilarity: np.ndarray
    shots: ShotList
    trajectories: TrajectorySet
    noise: dict
    seed: int

    def synthetic_video(self) -> SyntheticVideo:
        return SyntheticVideo(self.video_id, self.width, self.height, self.tracks, self.visibility,
                              self.prototypes, self.background, self.drift_dirs, seed=self.seed,
                              **self.noise)

    def field(self) -> SyntheticField:
        return SyntheticField(self.synthetic_video())

    def gt(self, keyframes: int = 0) -> GroundTruthInstance:
        s, e = self.action
        tube = Tube(self.video_id, s, self.tracks[self.actor, s: e + 1])
        if keyframes:
            kf = tuple(sorted(set(int(round(v)) for v in np.linspace(s, e, keyframes))))
            return GroundTruthInstance(self.video_id, self.label, tube, kf)
        return GroundTruthInstance(self.video_id, self.label, tube)

    def gt_trimmed(self) -> GroundTruthInstance:
        """Actor over the whole shot containing the action."""
        s, e = self.action_shot
        return GroundTruthInstance(self.video_id, self.label, Tube(self.video_id, s, self.tracks[self.actor, s: e + 1]))


@dataclass(eq=False)
class WorldInstance:
    config: WorldConfig
    videos: list[VideoWorld]
    classes: list[str]

    def by_id(self) -> dict[str, VideoWorld]:
        return {v.video_id: v for v in self.videos}

    def split(self, name: str) -> list[VideoWorld]:
        return [v for v in self.videos if v.split == name]


def class_name(c: int) -> str:
    return f"action{c:02d}"


def _sources(cfg: WorldConfig, rng: np.random.Generator):
    """Mean vectors per (source, channel, component); source 0 is background."""
    src = {}
    for s in range(cfg.n_classes + 1):
        for ch in CHANNELS:
            src[(s, ch)] = rng.normal(0.0, cfg.class_separation, (cfg.source_components, cfg.raw_dims[ch]))
    return src


def _draw_descriptors(cfg, src, source: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = len(source)
    out = {}
    for ch in CHANNELS:
        comp = rng.integers(cfg.source_components, size=n)
        means = np.zeros((n, cfg.raw_dims[ch]))
        for s in np.unique(source) if n else []:
            sel = source == s
            means[sel] = src[(int(s), ch)][comp[sel]]
        out[ch] = means + cfg.descriptor_noise * rng.normal(size=(n, cfg.raw_dims[ch]))
    return out


def _shot_tracks(cfg: WorldConfig, n_humans: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    n = hi - lo + 1
    lane_w = cfg.width / n_humans
    lanes = rng.permutation(n_humans)
    out = np.zeros((n_humans, n, 4))
    smax = cfg.max_step * cfg.stride
    for h in range(n_humans):
        w0 = rng.uniform(*cfg.box_width)
        h0 = w0 * rng.uniform(*cfg.aspect)
        period = rng.uniform(30, 90)
        phase = rng.uniform(0, 2 * np.pi)
        lane_lo = lanes[h] * lane_w
        cx = rng.uniform(lane_lo + w0 / 2 + 1, lane_lo + lane_w - w0 / 2 - 1) if lane_w > w0 + 2 else lane_lo + lane_w / 2
        cy = rng.uniform(h0 / 2 + 1, cfg.height - h0 / 2 - 1)
        vx, vy = rng.uniform(-smax, smax, 2) * 0.5
        for f in range(n):
            s = 1.0 + cfg.scale_wobble * np.sin(2 * np.pi * f / period + phase)
            w, hh = w0 * s, h0 * s
            xmin_c, xmax_c = lane_lo + w / 2, lane_lo + lane_w - w / 2
            cx = float(np.clip(cx, xmin_c, max(xmin_c, xmax_c)))
            cy = float(np.clip(cy, hh / 2, cfg.height - hh / 2))
            out[h, f] = [cx - w / 2, cy - hh / 2, cx + w / 2, cy + hh / 2]
            vx = float(np.clip(vx + rng.normal(0, 0.3 * cfg.stride), -smax, smax))
            vy = float(np.clip(vy + rng.normal(0, 0.3 * cfg.stride), -smax, smax))
            nx, ny = cx + vx, cy + vy
            if not xmin_c <= nx <= xmax_c:
                vx = -vx
                nx = cx + vx
            if not hh / 2 <= ny <= cfg.height - hh / 2:
                vy = -vy
                ny = cy + vy
            cx, cy = nx, ny
    return out


def _generate_video(cfg: WorldConfig, idx: int, seq: np.random.SeedSequence, src) -> VideoWorld:
    r_struct, r_track, r_app, r_traj = [np.random.default_rng(s) for s in seq.spawn(4)]
    vid = f"v{idx:03d}"
    label_idx = idx % cfg.n_classes
    block = idx // cfg.n_classes
    # blocks hold one video per class; the train split takes blocks evenly spread over the list
    tf = cfg.train_fraction
    split = "train" if np.ceil((block + 1) * tf - 1e-9) > np.ceil(block * tf - 1e-9) else "test"
    F = cfg.n_frames
    n_humans = int(r_struct.integers(cfg.humans_per_video[0], cfg.humans_per_video[1] + 1))
    boosted = bool(r_struct.random() < cfg.distractor_boost_rate)
    if boosted and n_humans < 2:
        n_humans = 2
    actor = int(r_struct.integers(n_humans))

    cuts = []
    if r_struct.random() < cfg.shot_cut_rate and F >= 2 * cfg.min_action_frames:
        cuts = [int(r_struct.integers(F // 3, 2 * F // 3 + 1))]
    bounds = [0] + cuts + [F]
    shot_ranges = [(a, b - 1) for a, b in zip(bounds[:-1], bounds[1:])]
    tracks = np.concatenate([_shot_tracks(cfg, n_humans, a, b, r_track) for a, b in shot_ranges], axis=1)

    diss = np.abs(r_struct.normal(0, 0.05, F))
    diss[0] = 0.0
    for c in cuts:
        diss[c] = 1.0 + r_struct.random()
    shots = naive_shot_split(diss, SHOT_THRESHOLD, vid)

    long_shots = [s for s in shot_ranges if s[1] - s[0] + 1 >= cfg.min_action_frames] or shot_ranges
    lens = np.array([b - a + 1 for a, b in long_shots], dtype=float)
    a_shot = long_shots[int(r_struct.choice(len(long_shots), p=lens / lens.sum()))]
    shot_len = a_shot[1] - a_shot[0] + 1
    if cfg.trimmed:
        action = a_shot
    else:
        L = int(round(r_struct.uniform(*cfg.action_fraction) * shot_len))
        L = int(np.clip(L, min(cfg.min_action_frames, shot_len), shot_len))
        s0 = a_shot[0] + int(r_struct.integers(0, shot_len - L + 1))
        action = (s0, s0 + L - 1)

    vis = np.full(n_humans, cfg.distractor_visibility)
    vis[actor] = cfg.actor_visibility
    if boosted:
        vis[actor] = cfg.boosted_actor_visibility
        others = [h for h in range(n_humans) if h != actor]
        vis[others[int(r_struct.integers(len(others)))]] = 1.0

    protos = r_app.normal(0, 1, (n_humans, cfg.embed_dim))
    background = r_app.normal(0, 0.3, cfg.embed_dim)
    drift = r_app.normal(0, 1, (n_humans, cfg.embed_dim))

    # trajectories
    starts, points, source = [], [], []
    counts = r_traj.poisson(cfg.trajectory_rate, (n_humans, F))
    for h in range(n_humans):
        for f in range(F):
            k = counts[h, f]
            if not k:
                continue
            b = tracks[h, f]
            px = r_traj.uniform(b[0], b[2], k)
            py = r_traj.uniform(b[1], b[3], k)
            is_action = h == actor and action[0] <= f <= action[1]
            starts.extend([f] * k)
            points.extend(zip(px, py))
            source.extend([label_idx + 1 if is_action else 0] * k)
    bg_counts = r_traj.poisson(cfg.background_rate, F)
    for f in range(F):
        placed = 0
        tries = 0
        while placed < bg_counts[f] and tries < 50:
            tries += 1
            x, y = r_traj.uniform(0, cfg.width), r_traj.uniform(0, cfg.height)
            tb = tracks[:, f]
            if np.any((tb[:, 0] <= x) & (x <= tb[:, 2]) & (tb[:, 1] <= y) & (y <= tb[:, 3])):
                continue
            starts.append(f)
            points.append((x, y))
            source.append(0)
            placed += 1
    order = np.lexsort((np.arange(len(starts)), np.asarray(starts, dtype=np.int64)))
    starts = np.asarray(starts, dtype=np.int64)[order] if len(starts) else np.zeros(0, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)[order] if len(points) else np.zeros((0, 2))
    source = np.asarray(source, dtype=np.int64)[order] if len(source) else np.zeros(0, dtype=np.int64)
    desc = _draw_descriptors(cfg, src, source, r_traj)
    trajs = TrajectorySet(vid, starts, points, desc)

    noise = {"score_noise": cfg.score_noise, "embed_noise": cfg.embed_noise,
             "embed_drift": cfg.embed_drift, "det_jitter": cfg.det_jitter}
    vseed = int(seq.generate_state(1, np.uint32)[0])
    return VideoWorld(vid, class_name(label_idx), split, F, cfg.width, cfg.height, tracks, vis, protos,
                      background, drift, actor, boosted, action, a_shot, diss, shots, trajs, noise, vseed)


def generate(cfg: WorldConfig) -> WorldInstance:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    src_seq, vid_seq = root.spawn(2)
    src = _sources(cfg, np.random.default_rng(src_seq))
    children = vid_seq.spawn(cfg.n_videos)
    videos = [_generate_video(cfg, i, children[i], src) for i in range(cfg.n_videos)]
    return WorldInstance(cfg, videos, [class_name(c) for c in range(cfg.n_classes)])


# --------------------------------------------------------------------------
# persistence

def _video_to_json(v: VideoWorld) -> dict:
    return {"video_id": v.video_id, "label": v.label, "split": v.split, "n_frames": v.n_frames,
            "width": v.width, "height": v.height, "tracks": v.tracks.tolist(),
            "visibility": v.visibility.tolist(), "prototypes": v.prototypes.tolist(),
            "background": v.background.tolist(), "drift_dirs": v.drift_dirs.tolist(),
            "actor": v.actor, "boosted": v.boosted, "action": list(v.action),
            "action_shot": list(v.action_shot), "dissimilarity": v.dissimilarity.tolist(),
            "noise": v.noise, "seed": v.seed}


def write_world(world: WorldInstance, out_dir) -> Path:
    """Write world.json, manifest, labels, ground truth, shots and trajectories."""
    out = Path(out_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    cfg = world.config
    doc = {"version": WORLD_VERSION, "config": _config_json(cfg), "classes": world.classes,
           "videos": [_video_to_json(v) for v in world.videos]}
    (out / "world.json").write_text(json.dumps(doc, sort_keys=True))
    manifest, labels = [], []
    for v in world.videos:
        tpath = f"trajectories/{v.video_id}.txt"
        write_trajectories(out / tpath, v.trajectories)
        manifest.append({"video_id": v.video_id, "n_frames": v.n_frames, "width": v.width,
                         "height": v.height, "field": "synth:world.json", "trajectories": tpath,
                         "labels": [v.label], "split": v.split, "gt": "gt.jsonl", "tube_gt": "gt_trimmed.jsonl", "shots": "shots.jsonl",
                         "dissimilarity": [round(float(d), 6) for d in v.dissimilarity]})
        labels.append({"video_id": v.video_id, "labels": [v.label], "split": v.split})
    _write_jsonl(out / "manifest.jsonl", manifest)
    _write_jsonl(out / "labels.jsonl", labels)
    write_gt(out / "gt.jsonl", [v.gt(cfg.keyframes) for v in world.videos])
    write_gt(out / "gt_trimmed.jsonl", [v.gt_trimmed() for v in world.videos])
    write_shots(out / "shots.jsonl", [v.shots for v in world.videos])
    return out


def _config_json(cfg: WorldConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


_WORLD_CACHE: dict[str, dict[str, SyntheticVideo]] = {}


def load_world_videos(path) -> dict[str, SyntheticVideo]:
    """SyntheticVideo per video id from a written world.json (cached per path)."""
    key = str(Path(path).resolve())
    if key not in _WORLD_CACHE:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != WORLD_VERSION:
            raise ValueError(f"{path}: unsupported world version {doc.get('version')}")
        vids = {}
        for v in doc["videos"]:
            vids[v["video_id"]] = SyntheticVideo(
                v["video_id"], v["width"], v["height"], np.asarray(v["tracks"], dtype=np.float64),
                np.asarray(v["visibility"]), np.asarray(v["prototypes"]), np.asarray(v["background"]),
                np.asarray(v["drift_dirs"]), seed=v["seed"], **v["noise"])
        _WORLD_CACHE[key] = vids
    return _WORLD_CACHE[key]


# --------------------------------------------------------------------------
# oracles

def oracle_best_overlap(tubes: Sequence[Tube], gts: Sequence[GroundTruthInstance],
                        mode: str = "trimmed") -> np.ndarray:
    """Max overlap of each ground truth against every tube (exhaustive)."""
    out = np.zeros(len(gts))
    for i, g in enumerate(gts):
        best = 0.0
        for t in tubes:
            o = overlap(t, g, mode)
            if o > best:
                best = o
        out[i] = best
    return out


def oracle_ap(detections, gts: Sequence[GroundTruthInstance], policy: MatchPolicy,
              overlap_fn: Callable | None = None) -> float:
    """AP by explicit precision/recall enumeration.

    Matching walks detections by descending score; each takes the unmatched
    same-video ground truth of largest overlap if it reaches the threshold.
    AP sums, over true positives, the best precision reached at or beyond
    that rank, divided by the number of ground truths.
    """
    ov = overlap_fn or (lambda d, g: overlap(d.tube, g, policy.mode, policy.span_policy))
    n_gt = len(gts)
    if n_gt == 0:
        return 0.0
    dets = sorted(detections, key=lambda d: (-d.score, d.video_id, d.tube.start, d.tube.end,
                                              tuple(d.tube.boxes[0])))
    taken = [False] * n_gt
    flags = []
    for d in dets:
        cand = [(ov(d, g), j) for j, g in enumerate(gts) if not taken[j] and g.video_id == d.video_id]
        hit = False
        if cand:
            o, j = max(cand, key=lambda p: (p[0], -p[1]))
            if o >= policy.theta:
                taken[j] = True
                hit = True
        flags.append(hit)
    n = len(flags)
    precision = []
    tp = 0
    for k in range(n):
        tp += flags[k]
        precision.append(tp / (k + 1))
    ap = 0.0
    for k in range(n):
        if flags[k]:
            ap += max(precision[k:]) / n_gt
    return ap
