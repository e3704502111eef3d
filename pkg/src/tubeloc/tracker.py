"""Human tube extraction by tracking-by-detection.

The highest scoring detection left in the video seeds a track. The seed is
refined over a scale/translation neighbourhood, then followed forward and
backward with a sliding window maximising the human score plus the
probability of an instance-level linear SVM that is retrained every frame.
Detections overlapping the finished track are dropped and the loop repeats
until no detection is left.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from tubeloc import svm
from tubeloc.core import Tube, iou_matrix, paired_iou
from tubeloc.scorefield import ScoreField

log = logging.getLogger(__name__)

NEGATIVE_IOU = 0.1
HARD_NEGATIVE_MARGIN = -1.0
MIN_SIDE = 1.0


@dataclass(frozen=True)
class NeighborhoodSpec:
    stride: float = 4.0
    steps: tuple[int, ...] = (0, 1, -1, 2, -2, 3, -3, 4, -4)
    scales: tuple[float, ...] = (1.0, 0.9, 1.1, 0.8, 1.2)
    axis_aligned_only: bool = False


@dataclass
class TrackerConfig:
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    C: float = 1.0
    suppression_iou: float = 0.3
    use_instance: bool = True
    warm_start: bool = True
    max_tubes: int | None = None
    seed: int = 0


@dataclass
class TrackLog:
    """Per-step bookkeeping of one track, used by tests and diagnostics."""

    positives: list[int] = field(default_factory=list)
    negative_margins: list[np.ndarray] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)


def neighborhood(box, spec: NeighborhoodSpec, bounds: tuple[float, float]) -> np.ndarray:
    """Candidate boxes around ``box``: identity first, then canonical order.

    Canonical order is scale-major, then y offset, then x offset, following
    the order of ``spec.scales`` and ``spec.steps``. Candidates are clipped
    to ``bounds = (width, height)``; degenerate and duplicate ones dropped.
    """
    b = np.asarray(box, dtype=np.float64).reshape(4)
    cx, cy = 0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])
    w, h = b[2] - b[0], b[3] - b[1]
    offs = np.asarray(spec.steps, dtype=np.float64) * spec.stride
    if spec.axis_aligned_only:
        pairs = [(0.0, 0.0)] + [(o, 0.0) for o in offs if o] + [(0.0, o) for o in offs if o]
    else:
        pairs = [(dx, dy) for dy in offs for dx in offs]
    d = np.asarray(pairs, dtype=np.float64)
    sc = np.asarray(spec.scales, dtype=np.float64)[:, None]
    hw, hh = (0.5 * w * sc), (0.5 * h * sc)
    x, y = cx + d[None, :, 0], cy + d[None, :, 1]
    grid = np.stack([x - hw, y - hh, x + hw, y + hh], axis=-1).reshape(-1, 4)
    cand = np.vstack([b[None], grid])
    W, H = bounds
    cand[:, 0::2] = np.clip(cand[:, 0::2], 0.0, W)
    cand[:, 1::2] = np.clip(cand[:, 1::2], 0.0, H)
    ok = (cand[:, 2] - cand[:, 0] >= MIN_SIDE) & (cand[:, 3] - cand[:, 1] >= MIN_SIDE)
    ok[0] = True
    cand = np.ascontiguousarray(cand[ok]) + 0.0  # folds -0.0 into 0.0
    rows = cand.view(np.dtype((np.void, cand.dtype.itemsize * 4))).ravel()
    _, first = np.unique(rows, return_index=True)
    return cand[np.sort(first)]


def _pick(scores: np.ndarray, cands: np.ndarray, ref: np.ndarray) -> int:
    best = scores.max()
    tied = np.flatnonzero(scores == best)
    if len(tied) == 1:
        return int(tied[0])
    c = 0.5 * (cands[tied, :2] + cands[tied, 2:])
    rc = 0.5 * (ref[:2] + ref[2:])
    d = np.hypot(c[:, 0] - rc[0], c[:, 1] - rc[1])
    return int(tied[np.argmin(d)])


def refine_init(field: ScoreField, frame: int, seed_box, spec: NeighborhoodSpec | None = None) -> np.ndarray:
    """Highest human-scoring box in the seed's neighbourhood."""
    spec = spec or NeighborhoodSpec()
    seed_box = np.asarray(seed_box, dtype=np.float64)
    cands = neighborhood(seed_box, spec, (field.width, field.height))
    scores = field.score_boxes(frame, cands)
    return cands[_pick(scores, cands, seed_box)]


class _Instance:
    """Online instance-level detector state for one tracking direction."""

    def __init__(self, pos: list[np.ndarray], neg: list[np.ndarray], cfg: TrackerConfig, trace: TrackLog):
        self.pos = list(pos)
        self.neg = list(neg)
        self.cfg = cfg
        self.model: svm.LinearModel | None = None
        self.trace = trace

    def fit(self):
        if not self.cfg.use_instance or not self.neg:
            self.model = None
            return
        warm = self.model if self.cfg.warm_start else None
        self.model = svm.train(self.pos, self.neg, self.cfg.C, seed=self.cfg.seed, warm_start=warm)
        self.trace.gaps.append(self.model.duality_gap)

    def prob(self, emb: np.ndarray) -> np.ndarray:
        if self.model is None:
            return np.full(len(emb), 0.5)
        return svm.probability(self.model, emb)

    def update(self, pos_emb: np.ndarray, new_neg: np.ndarray):
        self.pos.append(pos_emb)
        self.neg.extend(new_neg)
        self.trace.positives.append(len(self.pos))
        if self.model is not None and self.neg:
            N = np.asarray(self.neg)
            m = svm.decision(self.model, N)
            keep = m >= HARD_NEGATIVE_MARGIN
            self.neg = [n for n, k in zip(self.neg, keep) if k]
            self.trace.negative_margins.append(np.asarray(m)[keep])


def _far_negatives(field: ScoreField, frame: int, box: np.ndarray) -> np.ndarray:
    dets, _ = field.detection_arrays(frame)
    if len(dets) == 0:
        return np.zeros((0, field.embed_dim))
    far = iou_matrix(dets, box)[:, 0] < NEGATIVE_IOU
    if not far.any():
        return np.zeros((0, field.embed_dim))
    return field.embed_boxes(frame, dets[far])


def track(field: ScoreField, seed_box, seed_frame: int, frame_range: tuple[int, int] | None = None,
          cfg: TrackerConfig | None = None, trace: TrackLog | None = None) -> Tube:
    """Track a seed detection over ``frame_range`` (inclusive, default whole video)."""
    cfg = cfg or TrackerConfig()
    trace = trace if trace is not None else TrackLog()
    lo, hi = frame_range if frame_range is not None else (0, field.n_frames - 1)
    if not lo <= seed_frame <= hi:
        raise IndexError(f"seed frame {seed_frame} outside [{lo}, {hi}]")
    spec = cfg.neighborhood
    bounds = (field.width, field.height)
    boxes = np.zeros((hi - lo + 1, 4))
    b_f = refine_init(field, seed_frame, seed_box, spec)
    boxes[seed_frame - lo] = b_f
    p0 = [field.embed_box(seed_frame, b_f)]
    n0 = list(_far_negatives(field, seed_frame, b_f))

    for direction in (1, -1):
        inst = _Instance(p0, n0, cfg, trace)
        prev = b_f
        stop = hi + 1 if direction > 0 else lo - 1
        for i in range(seed_frame + direction, stop, direction):
            inst.fit()
            cands = neighborhood(prev, spec, bounds)
            emb = field.embed_boxes(i, cands)
            total = field.score_boxes(i, cands) + inst.prob(emb)
            k = _pick(total, cands, prev)
            prev = cands[k]
            boxes[i - lo] = prev
            inst.update(emb[k], list(_far_negatives(field, i, prev)))
    return Tube(getattr(field, "video_id", ""), lo, boxes)


def tube_human_score(field: ScoreField, tube: Tube) -> float:
    """Mean human score of the tube's boxes."""
    total = 0.0
    for k, f in enumerate(range(tube.start, tube.end + 1)):
        total += field.score_boxes(f, tube.boxes[k: k + 1])[0]
    return total / tube.length


def extract_tubes(field: ScoreField, frame_range: tuple[int, int] | None = None,
                  cfg: TrackerConfig | None = None, video_id: str | None = None,
                  logs: list | None = None) -> list[Tube]:
    """Greedy tube extraction over one shot (or the whole video).

    Returned tubes are in extraction order, i.e. by descending seed score,
    each carrying its mean human score and seed in ``meta``.
    """
    cfg = cfg or TrackerConfig()
    lo, hi = frame_range if frame_range is not None else (0, field.n_frames - 1)
    vid = video_id if video_id is not None else getattr(field, "video_id", "")
    frames, dboxes, dscores = [], [], []
    for f in range(lo, hi + 1):
        b, s = field.detection_arrays(f)
        frames.extend([f] * len(b))
        dboxes.extend(b)
        dscores.extend(s)
    if not frames:
        return []
    frames = np.asarray(frames)
    dboxes = np.asarray(dboxes)
    dscores = np.asarray(dscores)
    # global order: score desc, then frame, then box coordinates
    order = np.lexsort((dboxes[:, 3], dboxes[:, 2], dboxes[:, 1], dboxes[:, 0], frames, -dscores))
    alive = np.ones(len(frames), dtype=bool)
    tubes: list[Tube] = []
    while alive.any():
        if cfg.max_tubes is not None and len(tubes) >= cfg.max_tubes:
            break
        k = order[alive[order]][0]
        tlog = TrackLog()
        t = track(field, dboxes[k], int(frames[k]), (lo, hi), cfg, tlog)
        t.video_id = vid
        t.score = tube_human_score(field, t)
        t.meta = {"seed_frame": int(frames[k]), "seed_box": dboxes[k].tolist(),
                  "seed_score": float(dscores[k])}
        tubes.append(t)
        if logs is not None:
            logs.append(tlog)
        overlap = paired_iou(t.boxes[frames - lo], dboxes)
        alive &= overlap <= cfg.suppression_iou
        alive[k] = False
    return tubes
