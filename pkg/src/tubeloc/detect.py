"""Test-time detection: temporal sliding windows inside human tubes.

Every window of every tube is described by the trajectories starting inside
it, scored by each class model, and penalised by ``alpha / L`` so short
windows need a larger margin to win.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tubeloc import svm
from tubeloc.core import TemporalSegment, Tube, temporal_iou
from tubeloc.encoder import Codebooks, TrajectorySet, VideoEncoder
from tubeloc.scorefield import ScoreField
from tubeloc.tracker import TrackerConfig, extract_tubes

UCF101_LENGTHS = (20, 30, 40, 50, 60, 70, 80, 90, 100, 150, 300, 450, 600)
DALY_EXTRA = (900, 1200, 1500, 1800, 2400) + tuple(range(3000, 12001, 600))


@dataclass(frozen=True)
class WindowSpec:
    lengths: tuple[int, ...] = UCF101_LENGTHS
    stride: int = 10
    alpha: float = 20.0

    def __post_init__(self):
        if not self.lengths or any(l <= 0 for l in self.lengths) or list(self.lengths) != sorted(set(self.lengths)):
            raise ValueError("window lengths must be positive, unique and ascending")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @classmethod
    def preset(cls, name: str, stride: int = 10, alpha: float = 20.0) -> "WindowSpec":
        if name == "default":
            return cls(UCF101_LENGTHS, stride, alpha)
        if name == "daly":
            return cls(UCF101_LENGTHS + DALY_EXTRA, stride, alpha)
        if name == "full":
            return cls((10 ** 9,), stride, alpha)
        lengths = tuple(int(x) for x in Path(name).read_text().split())
        return cls(lengths, stride, alpha)


@dataclass(eq=False)
class Detection:
    video_id: str
    label: str
    tube: Tube
    score: float
    decision: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def segment(self) -> TemporalSegment:
        return self.tube.span

    def to_record(self) -> dict:
        return {"video_id": self.video_id, "class": self.label, "score": self.score,
                "start": self.tube.start, "end": self.tube.end,
                "boxes": [[float(v) for v in b] for b in self.tube.boxes],
                **({"meta": self.meta} if self.meta else {})}

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        t = Tube(rec["video_id"], rec["start"], np.asarray(rec["boxes"], dtype=np.float64))
        if t.end != rec["end"]:
            raise ValueError(f"detection record for {rec['video_id']}: end {rec['end']} "
                             f"does not match {len(rec['boxes'])} boxes")
        return cls(rec["video_id"], rec["class"], t, float(rec["score"]), meta=rec.get("meta", {}))


def detection_sort_key(d: Detection):
    return (-d.score, d.video_id, d.label, d.tube.start, d.tube.end, tuple(d.tube.boxes[0]))


def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as f:
        for d in detections:
            f.write(json.dumps(d.to_record(), sort_keys=True) + "\n")


def read_detections(path) -> list[Detection]:
    with open(path) as f:
        return [Detection.from_record(json.loads(line)) for line in f if line.strip()]


def score_tube(model: svm.LinearModel, descriptor: np.ndarray) -> float:
    return float(svm.decision(model, descriptor))


def penalized_score(decision: float, length: int, alpha: float) -> float:
    return decision - alpha / length


def sliding_windows(span: TemporalSegment | Tube | tuple[int, int], spec: WindowSpec) -> list[TemporalSegment]:
    """Multi-scale windows inside ``span``.

    For each length L no longer than the span, windows start every
    ``stride`` frames from the span start; a right-aligned window closes
    each scale. A span shorter than every length yields the span itself.
    """
    if isinstance(span, Tube):
        span = span.span
    if isinstance(span, tuple):
        span = TemporalSegment(*span)
    n = span.length
    out: list[TemporalSegment] = []
    seen = set()
    for L in spec.lengths:
        if L > n:
            break
        starts = list(range(span.start, span.end - L + 2, spec.stride))
        if starts[-1] != span.end - L + 1:
            starts.append(span.end - L + 1)
        for s in starts:
            if (s, s + L - 1) not in seen:
                seen.add((s, s + L - 1))
                out.append(TemporalSegment(s, s + L - 1))
    if not out or min(spec.lengths) > n:
        if (span.start, span.end) not in seen:
            out.append(TemporalSegment(span.start, span.end))
    return out


def temporal_nms(detections: list[Detection], threshold: float = 0.3) -> list[Detection]:
    """Greedy suppression among windows of the same tube and class."""
    groups: dict[tuple, list[Detection]] = {}
    for d in detections:
        groups.setdefault((d.video_id, d.label, d.meta.get("tube")), []).append(d)
    kept = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2])):
        chosen: list[Detection] = []
        for d in sorted(groups[key], key=detection_sort_key):
            if all(temporal_iou(d.segment, c.segment) <= threshold for c in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return sorted(kept, key=detection_sort_key)


@dataclass(frozen=True)
class ShotList:
    video_id: str
    shots: tuple[TemporalSegment, ...]
    n_frames: int

    def __post_init__(self):
        prev = -1
        for s in self.shots:
            if s.start != prev + 1:
                raise ValueError(f"shots of {self.video_id} are not contiguous at frame {s.start}")
            prev = s.end
        if prev != self.n_frames - 1:
            raise ValueError(f"shots of {self.video_id} do not cover {self.n_frames} frames")

    def to_record(self) -> dict:
        return {"video_id": self.video_id, "n_frames": self.n_frames,
                "shots": [[s.start, s.end] for s in self.shots]}

    @classmethod
    def from_record(cls, rec: dict) -> "ShotList":
        return cls(rec["video_id"], tuple(TemporalSegment(a, b) for a, b in rec["shots"]), rec["n_frames"])

    @classmethod
    def whole(cls, video_id: str, n_frames: int) -> "ShotList":
        return cls(video_id, (TemporalSegment(0, n_frames - 1),), n_frames)


def naive_shot_split(dissimilarity: Sequence[float], threshold: float, video_id: str = "") -> ShotList:
    """Cut before every frame whose dissimilarity to its predecessor exceeds ``threshold``.

    Frame 0 never starts a new cut, so an all-above series yields one shot
    per frame.
    """
    d = np.asarray(dissimilarity, dtype=np.float64)
    n = len(d)
    cuts = [k for k in range(1, n) if d[k] > threshold]
    bounds = [0] + cuts + [n]
    shots = tuple(TemporalSegment(a, b - 1) for a, b in zip(bounds[:-1], bounds[1:]))
    return ShotList(video_id, shots, n)


def read_shots(path) -> dict[str, ShotList]:
    with open(path) as f:
        recs = [ShotList.from_record(json.loads(line)) for line in f if line.strip()]
    return {r.video_id: r for r in recs}


def write_shots(path, shots: Iterable[ShotList]) -> None:
    with open(path, "w") as f:
        for s in shots:
            f.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


@dataclass
class DetectConfig:
    windows: WindowSpec = field(default_factory=WindowSpec)
    floor: float = -np.inf
    nms: bool = True
    nms_iou: float = 0.3


def score_windows(models: dict[str, svm.LinearModel], tubes: list[Tube], encoder: VideoEncoder,
                  cfg: DetectConfig, video_id: str, tube_offset: int = 0) -> list[Detection]:
    classes = sorted(models)
    W = np.vstack([models[c].weights for c in classes]) if classes else np.zeros((0, 0))
    b = np.array([models[c].bias for c in classes])
    dets: list[Detection] = []
    sf = encoder.trajs.start_frame
    for ti, tube in enumerate(tubes):
        base = encoder.tube_mask(tube)
        for seg in sliding_windows(tube.span, cfg.windows):
            x = encoder.encode_mask(base & (sf >= seg.start) & (sf <= seg.end))
            dec = W @ x + b
            sub = tube.restrict(seg.start, seg.end)
            for c, dv in zip(classes, dec):
                s = penalized_score(float(dv), seg.length, cfg.windows.alpha)
                if s >= cfg.floor:
                    dets.append(Detection(video_id, c, sub, s, float(dv), {"tube": tube_offset + ti}))
    return dets


def split_at_shots(tubes: Sequence[Tube], shots: ShotList) -> list[tuple[int, Tube]]:
    """Pieces of each tube inside each shot, tagged with the shot index."""
    out = []
    for t in tubes:
        for k, shot in enumerate(shots.shots):
            a, b = max(t.start, shot.start), min(t.end, shot.end)
            if a <= b:
                out.append((k, t if (a, b) == (t.start, t.end) else t.restrict(a, b)))
    return out


def detect_video(models: dict[str, svm.LinearModel], field: ScoreField | None, trajs: TrajectorySet,
                 books: Codebooks, cfg: DetectConfig | None = None, shots: ShotList | None = None,
                 tracker: TrackerConfig | None = None, video_id: str | None = None,
                 tubes: Sequence[Tube] | None = None) -> list[Detection]:
    """Extract tubes per shot (unless given), slide windows and score every class.

    Given tubes are cut at shot boundaries first, so no window spans a cut.
    """
    cfg = cfg or DetectConfig()
    vid = video_id if video_id is not None else getattr(field, "video_id", trajs.video_id)
    if shots is None:
        if field is None:
            raise ValueError("detect_video needs a field or a shot list")
        shots = ShotList.whole(vid, field.n_frames)
    if tubes is None:
        if field is None:
            raise ValueError("detect_video needs a field or precomputed tubes")
        pieces = []
        for k, shot in enumerate(shots.shots):
            pieces += [(k, t) for t in extract_tubes(field, (shot.start, shot.end), tracker, video_id=vid)]
    else:
        pieces = split_at_shots(tubes, shots)
    encoder = VideoEncoder(books, trajs)
    dets: list[Detection] = []
    for i, (k, tube) in enumerate(pieces):
        found = score_windows(models, [tube], encoder, cfg, vid, i)
        for d in found:
            d.meta["shot"] = k
        dets.extend(found)
    if cfg.nms:
        dets = temporal_nms(dets, cfg.nms_iou)
    return sorted(dets, key=detection_sort_key)
