"""Localization metrics: proposal recall, CorLoc, AP/mAP, ROC-AUC, mean IoU
and clip classification mAP.

Overlap between a detection tube and a ground-truth instance depends on
the mode: ``trimmed`` uses the mean per-frame IoU over the union of spans,
``st`` multiplies temporal IoU by the mean spatial IoU on the shared frames,
``daly`` does the same but averages spatial IoU over annotated keyframes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from tubeloc.core import TemporalSegment, Tube, st_iou, tube_spatial_iou

MODES = ("trimmed", "st", "daly")


@dataclass(eq=False)
class GroundTruthInstance:
    """Ground-truth action tube.

    ``tube`` holds one box per frame of the segment. In DALY mode only the
    ``keyframes`` carry annotated boxes and the other frames of ``tube`` are
    filled by holding the previous keyframe box.
    """

    video_id: str
    label: str
    tube: Tube
    keyframes: tuple[int, ...] | None = None

    @property
    def segment(self) -> TemporalSegment:
        return self.tube.span

    def to_record(self) -> dict:
        rec = {"video_id": self.video_id, "class": self.label, "start": self.tube.start,
               "end": self.tube.end}
        if self.keyframes is not None:
            rec["keyframes"] = list(self.keyframes)
            rec["boxes"] = [[float(v) for v in self.tube.box_at(k)] for k in self.keyframes]
        else:
            rec["boxes"] = [[float(v) for v in b] for b in self.tube.boxes]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "GroundTruthInstance":
        s, e = int(rec["start"]), int(rec["end"])
        boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
        kf = rec.get("keyframes")
        if kf is None:
            return cls(rec["video_id"], rec["class"], Tube(rec["video_id"], s, boxes))
        kf = tuple(int(k) for k in kf)
        if list(kf) != sorted(kf) or len(kf) != len(boxes) or any(not s <= k <= e for k in kf):
            raise ValueError(f"bad keyframes for {rec['video_id']}")
        full = np.empty((e - s + 1, 4))
        j = 0
        for f in range(s, e + 1):
            while j + 1 < len(kf) and kf[j + 1] <= f:
                j += 1
            full[f - s] = boxes[j]
        return cls(rec["video_id"], rec["class"], Tube(rec["video_id"], s, full), kf)


def read_gt(path) -> list[GroundTruthInstance]:
    with open(path) as f:
        return [GroundTruthInstance.from_record(json.loads(line)) for line in f if line.strip()]


def write_gt(path, gts: Iterable[GroundTruthInstance]) -> None:
    with open(path, "w") as f:
        for g in gts:
            f.write(json.dumps(g.to_record(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class MatchPolicy:
    theta: float = 0.5
    mode: str = "st"
    span_policy: str = "union"
    eleven_point: bool = False

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def overlap(tube: Tube, gt: GroundTruthInstance, mode: str = "st", span_policy: str = "union") -> float:
    if tube.video_id != gt.video_id:
        return 0.0
    if mode == "trimmed":
        return tube_spatial_iou(tube, gt.tube, span_policy)
    if mode == "st":
        return st_iou(tube, gt.tube)
    if mode == "daly":
        kf = gt.keyframes if gt.keyframes is not None else range(gt.tube.start, gt.tube.end + 1)
        return st_iou(tube, gt.tube, kf)
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# proposals

def _best_overlaps(proposals: dict[str, Sequence[Tube]], gts: Sequence[GroundTruthInstance],
                   mode: str, budget: int | None = None) -> np.ndarray:
    out = np.zeros(len(gts))
    for i, g in enumerate(gts):
        props = list(proposals.get(g.video_id, ()))
        if budget is not None:
            props = props[:budget]
        if props:
            out[i] = max(overlap(p, g, mode) for p in props)
    return out


def recall_at(proposals: dict[str, Sequence[Tube]], gts: Sequence[GroundTruthInstance],
              theta: float = 0.5, mode: str = "trimmed", budget: int | None = None) -> float:
    """Fraction of ground truths covered by a proposal with overlap >= theta."""
    if not gts:
        return 0.0
    return float(np.mean(_best_overlaps(proposals, gts, mode, budget) >= theta))


def recall_curve(proposals: dict[str, Sequence[Tube]], gts: Sequence[GroundTruthInstance],
                 thetas: Sequence[float] | None = None, budgets: Sequence[int] | None = None,
                 theta: float = 0.5, mode: str = "trimmed") -> dict:
    """Recall against IoU threshold (all proposals) and against proposal budget.

    Proposals are taken in their stored (extraction) order for the budget curve.
    """
    thetas = list(thetas) if thetas is not None else [round(0.05 * k, 2) for k in range(1, 21)]
    if budgets is None:
        budgets = list(range(0, max((len(v) for v in proposals.values()), default=0) + 1))
    best_all = _best_overlaps(proposals, gts, mode)
    by_theta = [float(np.mean(best_all >= t)) if gts else 0.0 for t in thetas]
    by_budget = []
    for b in budgets:
        best = _best_overlaps(proposals, gts, mode, b)
        by_budget.append(float(np.mean(best >= theta)) if gts else 0.0)
    return {"thetas": thetas, "recall_by_theta": by_theta, "budgets": list(budgets),
            "recall_by_budget": by_budget, "theta": theta}


# --------------------------------------------------------------------------
# average precision

def _sorted_detections(detections):
    return sorted(detections, key=lambda d: (-d.score, d.video_id, d.tube.start, d.tube.end,
                                             tuple(d.tube.boxes[0])))


def precision_recall(detections, gts: Sequence[GroundTruthInstance], policy: MatchPolicy):
    """Greedy matching in score order; returns (tp flags, n_gt)."""
    by_video: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(i)
    matched = np.zeros(len(gts), dtype=bool)
    tp = []
    for d in _sorted_detections(detections):
        best, best_i = -1.0, -1
        for i in by_video.get(d.video_id, ()):
            if matched[i]:
                continue
            o = overlap(d.tube, gts[i], policy.mode, policy.span_policy)
            if o > best:
                best, best_i = o, i
        if best_i >= 0 and best >= policy.theta:
            matched[best_i] = True
            tp.append(True)
        else:
            tp.append(False)
    return np.asarray(tp, dtype=bool), len(gts)


def _ap_from_flags(tp: np.ndarray, n_gt: int, eleven_point: bool = False) -> float:
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    if eleven_point:
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections, gts: Sequence[GroundTruthInstance], policy: MatchPolicy | None = None,
                      label: str | None = None) -> float:
    """AP for one class (detections and ground truths filtered by ``label`` if given)."""
    policy = policy or MatchPolicy()
    if label is not None:
        detections = [d for d in detections if d.label == label]
        gts = [g for g in gts if g.label == label]
    tp, n_gt = precision_recall(detections, gts, policy)
    return _ap_from_flags(tp, n_gt, policy.eleven_point)


def mean_average_precision(detections, gts: Sequence[GroundTruthInstance],
                           policy: MatchPolicy | None = None,
                           classes: Sequence[str] | None = None) -> tuple[float, dict[str, float]]:
    policy = policy or MatchPolicy()
    classes = sorted(set(g.label for g in gts)) if classes is None else list(classes)
    per = {c: average_precision(detections, gts, policy, label=c) for c in classes}
    return (float(np.mean(list(per.values()))) if per else 0.0), per


# --------------------------------------------------------------------------
# CorLoc, mean IoU

def corloc(selected: dict[str, Tube], gts: Sequence[GroundTruthInstance], label: str,
           theta: float = 0.5, mode: str = "trimmed") -> float:
    """Fraction of positive videos whose selected tube hits a same-class GT."""
    if not selected:
        return 0.0
    hits = 0
    for vid, tube in selected.items():
        cands = [g for g in gts if g.video_id == vid and g.label == label]
        if any(overlap(tube, g, mode) >= theta for g in cands):
            hits += 1
    return hits / len(selected)


def mean_iou(best: dict[tuple[str, str], Tube], gts: Sequence[GroundTruthInstance],
             mode: str = "trimmed") -> dict[str, float]:
    """Per-class mean overlap between the best detection of a video and its GT.

    ``best`` maps ``(video_id, class)`` to the best detection tube; pairs
    without detection count as 0.
    """
    per: dict[str, list[float]] = {}
    for g in gts:
        t = best.get((g.video_id, g.label))
        per.setdefault(g.label, []).append(overlap(t, g, mode) if t is not None else 0.0)
    return {c: float(np.mean(v)) for c, v in sorted(per.items())}


def best_per_video(detections) -> dict[tuple[str, str], "object"]:
    best = {}
    for d in _sorted_detections(detections):
        best.setdefault((d.video_id, d.label), d)
    return best


# --------------------------------------------------------------------------
# ROC

def roc_points(top: dict[tuple[str, str], tuple[float, Tube]], gts: Sequence[GroundTruthInstance],
               theta: float = 0.5, mode: str = "trimmed"):
    """ROC vertices of the top-detection protocol.

    ``top`` maps ``(video_id, class)`` to (score, tube) for every pair. A
    pair is correct when the class is annotated in the video and the tube
    overlaps one of those annotations by >= theta. TPR counts correct pairs
    over all annotated pairs; FPR counts every other pair over the number
    of non-correct pairs.
    """
    gt_pairs: dict[tuple[str, str], list[GroundTruthInstance]] = {}
    for g in gts:
        gt_pairs.setdefault((g.video_id, g.label), []).append(g)
    items = []
    for key in sorted(top):
        score, tube = top[key]
        ok = key in gt_pairs and any(overlap(tube, g, mode) >= theta for g in gt_pairs[key])
        items.append((score, ok))
    n_pos = len(gt_pairs)
    n_neg = sum(1 for _, ok in items if not ok)
    scores = np.array([s for s, _ in items])
    ok = np.array([o for _, o in items], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, ok = scores[order], ok[order]
    tpr, fpr = [0.0], [0.0]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[j] == scores[i]:
            tp += int(ok[j])
            fp += int(not ok[j])
            j += 1
        tpr.append(tp / n_pos if n_pos else 0.0)
        fpr.append(fp / n_neg if n_neg else 0.0)
        i = j
    return np.array(fpr), np.array(tpr)


def auc_roc(top, gts, theta: float = 0.5, fpr_max: float = 0.6, mode: str = "trimmed") -> float:
    """Trapezoidal ROC area on [0, fpr_max], normalised by fpr_max."""
    fpr, tpr = roc_points(top, gts, theta, mode)
    if fpr[-1] < fpr_max:
        # the curve stops where every pair has been accepted
        fpr = np.append(fpr, fpr_max)
        tpr = np.append(tpr, tpr[-1])
    area = 0.0
    for k in range(1, len(fpr)):
        x0, x1, y0, y1 = fpr[k - 1], fpr[k], tpr[k - 1], tpr[k]
        if x0 >= fpr_max:
            break
        if x1 > fpr_max:
            y1 = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0)
            x1 = fpr_max
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return float(area / fpr_max)


def top_detections(detections, video_ids: Iterable[str], classes: Iterable[str]):
    """Top-scoring detection per (video, class); pairs without any detection
    get score -inf and a placeholder tube."""
    best = best_per_video(detections)
    out = {}
    for v in video_ids:
        for c in classes:
            d = best.get((v, c))
            out[(v, c)] = (d.score, d.tube) if d is not None else (-np.inf, Tube(v, 0, [[0, 0, 1, 1]]))
    return out


# --------------------------------------------------------------------------
# clip classification

def ranking_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.sum() == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def clip_classification_map(scores: np.ndarray, labels: np.ndarray,
                            exclude: np.ndarray | None = None) -> tuple[float, dict[int, float]]:
    """Per-class AP over non-excluded clips, averaged over classes.

    ``scores`` and ``labels`` are (n_clips, n_classes); classes with no
    remaining clip or no positive clip are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    exclude = np.zeros_like(labels) if exclude is None else np.asarray(exclude, dtype=bool)
    per = {}
    for c in range(scores.shape[1]):
        keep = ~exclude[:, c]
        if not keep.any() or not labels[keep, c].any():
            continue
        per[c] = ranking_ap(scores[keep, c], labels[keep, c])
    return (float(np.mean(list(per.values()))) if per else 0.0), per
