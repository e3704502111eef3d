"""Human-score and embedding providers standing in for the detector network.

A score field answers three questions about one video: which candidate
human boxes exist in a frame, the human score of an arbitrary box, and an
embedding vector for an arbitrary box. Two backends are provided:

* :class:`GridField` reads dense per-scale score/embedding maps from a
  versioned binary file and interpolates them at box centres.
* :class:`SyntheticField` derives scores and embeddings analytically from
  ground-truth human tracks of a generated world, with hash-seeded noise so
  every query is reproducible without keeping RNG state.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from tubeloc.core import BoundingBox, iou_matrix

GRID_MAGIC = b"TLSG"
GRID_VERSION = 1
_GRID_HEAD = "<HIIfI"
_GRID_SCALE = "<IIff"


@dataclass(frozen=True, eq=False)
class CandidateDetection:
    box: BoundingBox
    human_score: float
    embedding: np.ndarray


def _sort_candidates(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # descending score, then lexicographic on (x_min, y_min, x_max, y_max)
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


class ScoreField:
    """Common interface; subclasses implement the vectorised queries."""

    n_frames: int
    width: float
    height: float
    embed_dim: int

    def _check_frame(self, frame: int) -> None:
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} out of range [0, {self.n_frames})")

    def detection_arrays(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Candidate boxes (n, 4) and human scores (n,), canonically sorted."""
        raise NotImplementedError

    def score_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def detections(self, frame: int) -> list[CandidateDetection]:
        boxes, scores = self.detection_arrays(frame)
        emb = self.embed_boxes(frame, boxes) if len(boxes) else np.zeros((0, self.embed_dim))
        return [CandidateDetection(BoundingBox.from_array(b), float(s), e)
                for b, s, e in zip(boxes, scores, emb)]

    def score_box(self, frame: int, box) -> float:
        b = box.as_array() if isinstance(box, BoundingBox) else np.asarray(box, dtype=np.float64)
        return float(self.score_boxes(frame, b.reshape(1, 4))[0])

    def embed_box(self, frame: int, box) -> np.ndarray:
        b = box.as_array() if isinstance(box, BoundingBox) else np.asarray(box, dtype=np.float64)
        return self.embed_boxes(frame, b.reshape(1, 4))[0]


# --------------------------------------------------------------------------
# hash noise
#
# Noise values are a pure function of integer keys: keys are folded with
# SplitMix64 and turned into standard normals by Box-Muller, so a query
# gives the same value whatever was asked before it.


@njit(cache=True)
def _mix(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _fold_normal(base, keys, dims):
    n, m = keys.shape
    out = np.empty((n, dims))
    for i in range(n):
        k = base
        for j in range(m):
            k = _mix(k ^ np.uint64(keys[i, j]))
        for d in range(dims):
            kd = _mix(k ^ np.uint64(d))
            u1 = (np.float64(_mix(kd) >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
            u2 = (np.float64(_mix(kd ^ np.uint64(0xD1B54A32D192ED03)) >> np.uint64(11)) + 0.5) \
                * (1.0 / 9007199254740992.0)
            out[i, d] = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return out


@njit(cache=True)
def _fold(parts):
    k = np.uint64(0)
    for j in range(parts.shape[0]):
        k = _mix(k ^ np.uint64(parts[j]))
    return k


def hash_base(*parts: int) -> np.uint64:
    return _fold(np.array([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts], dtype=np.uint64))


def hash_normal(base: np.uint64, keys: np.ndarray, dims: int = 1) -> np.ndarray:
    """(n, dims) standard normals keyed by ``base`` and the rows of ``keys``."""
    keys = np.ascontiguousarray(np.asarray(keys, dtype=np.int64).reshape(len(keys), -1)).view(np.uint64)
    return _fold_normal(np.uint64(base), keys, int(dims))


def quantize_boxes(boxes: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(boxes, dtype=np.float64) * 64.0).astype(np.int64)


_PURPOSE_SCORE = 1
_PURPOSE_EMBED = 2
_PURPOSE_DETECT = 3


# --------------------------------------------------------------------------
# synthetic backend

@dataclass(eq=False)
class SyntheticVideo:
    """Ground truth a synthetic field is computed from.

    ``tracks`` is (n_humans, n_frames, 4); ``visibility`` scales each
    human's peak score; ``prototypes`` is (n_humans, d_e).
    """

    video_id: str
    width: float
    height: float
    tracks: np.ndarray
    visibility: np.ndarray
    prototypes: np.ndarray
    background: np.ndarray
    drift_dirs: np.ndarray
    score_noise: float = 0.0
    embed_noise: float = 0.0
    embed_drift: float = 0.0
    det_jitter: float = 0.0
    seed: int = 0


def _video_key(video_id: str) -> int:
    return int(hash_base(*video_id.encode("utf-8")))


class SyntheticField(ScoreField):
    """Score ``clamp(max_k v_k * g(IoU_k) + sigma * noise)``, ``g`` = identity.

    Embeddings blend the best-matching human's prototype with a background
    vector by IoU, plus optional linear appearance drift and hash noise.
    """

    def __init__(self, video: SyntheticVideo, g=None):
        self.video = video
        self.video_id = video.video_id
        self.n_frames = int(video.tracks.shape[1]) if video.tracks.size else 0
        self.width = float(video.width)
        self.height = float(video.height)
        self.embed_dim = int(video.background.shape[0])
        self.g = g if g is not None else (lambda iou: iou)
        self._vkey = _video_key(video.video_id)

    @classmethod
    def empty(cls, video_id: str, n_frames: int, width: float, height: float,
              embed_dim: int = 64) -> "SyntheticField":
        v = SyntheticVideo(video_id, width, height, np.zeros((0, n_frames, 4)), np.zeros(0),
                           np.zeros((0, embed_dim)), np.zeros(embed_dim), np.zeros((0, embed_dim)))
        f = cls(v)
        f.n_frames = n_frames
        return f

    def _actor_boxes(self, frame: int) -> np.ndarray:
        return self.video.tracks[:, frame, :]

    def _noise(self, purpose: int, frame: int, keys: np.ndarray, dims: int) -> np.ndarray:
        base = hash_base(self.video.seed, self._vkey, purpose, frame)
        return hash_normal(base, keys, dims)

    def score_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        self._check_frame(frame)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        actors = self._actor_boxes(frame)
        if len(actors):
            s = (self.video.visibility[None, :] * self.g(iou_matrix(boxes, actors))).max(axis=1)
        else:
            s = np.zeros(len(boxes))
        if self.video.score_noise > 0 and len(boxes):
            s = s + self.video.score_noise * self._noise(_PURPOSE_SCORE, frame, quantize_boxes(boxes), 1)[:, 0]
        return np.clip(s, 0.0, 1.0)

    def embed_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        self._check_frame(frame)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        v = self.video
        n = len(boxes)
        out = np.repeat(v.background[None, :], n, axis=0)
        actors = self._actor_boxes(frame)
        if len(actors) and n:
            ious = iou_matrix(boxes, actors)
            best = ious.argmax(axis=1)
            w = ious[np.arange(n), best][:, None]
            proto = v.prototypes[best]
            if v.embed_drift:
                t = frame / max(self.n_frames - 1, 1)
                proto = proto + v.embed_drift * t * v.drift_dirs[best]
            out = w * proto + (1.0 - w) * out
        if v.embed_noise > 0 and n:
            out = out + v.embed_noise * self._noise(_PURPOSE_EMBED, frame, quantize_boxes(boxes), self.embed_dim)
        return out

    def detection_arrays(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_frame(frame)
        actors = self._actor_boxes(frame)
        if len(actors) == 0:
            return np.zeros((0, 4)), np.zeros(0)
        boxes = actors.copy()
        if self.video.det_jitter > 0:
            wh = np.repeat(boxes[:, 2:] - boxes[:, :2], 2, axis=0).reshape(-1, 4)
            noise = self._noise(_PURPOSE_DETECT, frame, np.arange(len(boxes))[:, None], 4)
            boxes = boxes + self.video.det_jitter * wh * noise
            boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, self.width)
            boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, self.height)
            ok = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
            boxes = boxes[ok]
        scores = self.score_boxes(frame, boxes)
        order = _sort_candidates(boxes, scores)
        return boxes[order], scores[order]


# --------------------------------------------------------------------------
# grid backend
#
# File layout (little-endian):
#   b"TLSG", u16 version, u32 n_frames, u32 n_scales, f32 stride, u32 d_e,
#   then per scale: u32 rows, u32 cols, f32 box_w, f32 box_h,
#   then per frame, per scale: rows*cols f32 scores, rows*cols*d_e f32 embeddings.
# Lattice point (i, j) of every scale sits at pixel (j * stride, i * stride);
# scale level s describes boxes of size (box_w, box_h) centred on the lattice.

@dataclass(frozen=True)
class GridScale:
    rows: int
    cols: int
    box_w: float
    box_h: float


def write_grid(path, stride: float, scales: list[GridScale], scores: list[np.ndarray],
               embeddings: list[np.ndarray]) -> None:
    """``scores[s]`` is (n_frames, rows, cols); ``embeddings[s]`` is (n_frames, rows, cols, d_e)."""
    n_frames = scores[0].shape[0]
    d_e = embeddings[0].shape[-1]
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack(_GRID_HEAD, GRID_VERSION, n_frames, len(scales), stride, d_e))
        for sc in scales:
            f.write(struct.pack(_GRID_SCALE, sc.rows, sc.cols, sc.box_w, sc.box_h))
        for fr in range(n_frames):
            for s, sc in enumerate(scales):
                f.write(np.asarray(scores[s][fr], dtype="<f4").reshape(sc.rows, sc.cols).tobytes())
                f.write(np.asarray(embeddings[s][fr], dtype="<f4").reshape(sc.rows, sc.cols, d_e).tobytes())


class GridField(ScoreField):
    """Demand-loaded grid score field (memory-mapped)."""

    def __init__(self, path, threshold: float = 0.5, nms_iou: float = 0.3, video_id: str | None = None):
        self.path = Path(path)
        self.video_id = video_id if video_id is not None else self.path.stem
        self.threshold = threshold
        self.nms_iou = nms_iou
        with open(self.path, "rb") as f:
            head = f.read(4 + struct.calcsize(_GRID_HEAD))
            if head[:4] != GRID_MAGIC:
                raise ValueError(f"{path}: not a score grid file")
            version, n_frames, n_scales, stride, d_e = struct.unpack_from(_GRID_HEAD, head, 4)
            if version != GRID_VERSION:
                raise ValueError(f"{path}: unsupported grid version {version}")
            self.scales = [GridScale(*struct.unpack(_GRID_SCALE, f.read(struct.calcsize(_GRID_SCALE))))
                           for _ in range(n_scales)]
            self._data_offset = f.tell()
        self.n_frames = n_frames
        self.stride = float(stride)
        self.embed_dim = d_e
        self.width = max((sc.cols - 1) * self.stride for sc in self.scales)
        self.height = max((sc.rows - 1) * self.stride for sc in self.scales)
        self._frame_size = sum(sc.rows * sc.cols * (1 + d_e) for sc in self.scales)
        self._lock = threading.Lock()
        self._mm = None
        self._log_areas = np.log([sc.box_w * sc.box_h for sc in self.scales])

    def _map(self) -> np.ndarray:
        with self._lock:
            if self._mm is None:
                self._mm = np.memmap(self.path, dtype="<f4", mode="r", offset=self._data_offset,
                                     shape=(self.n_frames * self._frame_size,))
        return self._mm

    def maps(self, frame: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_frame(frame)
        mm = self._map()
        off = frame * self._frame_size
        for s, sc in enumerate(self.scales):
            n = sc.rows * sc.cols
            if s == scale:
                score = np.asarray(mm[off: off + n], dtype=np.float64).reshape(sc.rows, sc.cols)
                emb = np.asarray(mm[off + n: off + n + n * self.embed_dim],
                                 dtype=np.float64).reshape(sc.rows, sc.cols, self.embed_dim)
                return score, emb
            off += n * (1 + self.embed_dim)
        raise IndexError(f"scale {scale} out of range")

    def _scale_of(self, boxes: np.ndarray) -> np.ndarray:
        area = np.maximum((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), 1e-12)
        return np.abs(np.log(area)[:, None] - self._log_areas[None, :]).argmin(axis=1)

    def _interp(self, frame: int, boxes: np.ndarray, which: int) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        dim = 1 if which == 0 else self.embed_dim
        out = np.zeros((len(boxes), dim))
        level = self._scale_of(boxes)
        cx = 0.5 * (boxes[:, 0] + boxes[:, 2]) / self.stride
        cy = 0.5 * (boxes[:, 1] + boxes[:, 3]) / self.stride
        for s in np.unique(level):
            sel = np.flatnonzero(level == s)
            sc = self.scales[s]
            grid = self.maps(frame, int(s))[which]
            if which == 0:
                grid = grid[..., None]
            x = np.clip(cx[sel], 0, sc.cols - 1)
            y = np.clip(cy[sel], 0, sc.rows - 1)
            x0 = np.minimum(np.floor(x).astype(int), max(sc.cols - 2, 0))
            y0 = np.minimum(np.floor(y).astype(int), max(sc.rows - 2, 0))
            x1 = np.minimum(x0 + 1, sc.cols - 1)
            y1 = np.minimum(y0 + 1, sc.rows - 1)
            fx = (x - x0)[:, None]
            fy = (y - y0)[:, None]
            out[sel] = ((1 - fy) * ((1 - fx) * grid[y0, x0] + fx * grid[y0, x1])
                        + fy * ((1 - fx) * grid[y1, x0] + fx * grid[y1, x1]))
        return out

    def score_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        self._check_frame(frame)
        return np.clip(self._interp(frame, boxes, 0)[:, 0], 0.0, 1.0)

    def embed_boxes(self, frame: int, boxes: np.ndarray) -> np.ndarray:
        self._check_frame(frame)
        return self._interp(frame, boxes, 1)

    def detection_arrays(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_frame(frame)
        boxes, scores = [], []
        for s, sc in enumerate(self.scales):
            grid, _ = self.maps(frame, s)
            padded = np.pad(grid, 1, constant_values=-np.inf)
            neigh = np.stack([padded[1 + di: 1 + di + sc.rows, 1 + dj: 1 + dj + sc.cols]
                              for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj])
            peak = (grid >= neigh.max(axis=0)) & (grid > self.threshold)
            for i, j in zip(*np.nonzero(peak)):
                cx, cy = j * self.stride, i * self.stride
                boxes.append([cx - sc.box_w / 2, cy - sc.box_h / 2, cx + sc.box_w / 2, cy + sc.box_h / 2])
                scores.append(grid[i, j])
        if not boxes:
            return np.zeros((0, 4)), np.zeros(0)
        boxes, scores = np.asarray(boxes), np.asarray(scores)
        order = _sort_candidates(boxes, scores)
        boxes, scores = boxes[order], scores[order]
        keep = []
        for k in range(len(boxes)):
            if all(iou_matrix(boxes[k], boxes[j])[0, 0] <= self.nms_iou for j in keep):
                keep.append(k)
        return boxes[keep], scores[keep]


def rasterize(field: ScoreField, path, stride: float, box_sizes: list[tuple[float, float]]) -> None:
    """Sample any field on a lattice and store it as a grid file."""
    cols = int(field.width // stride) + 1
    rows = int(field.height // stride) + 1
    ys, xs = np.mgrid[0:rows, 0:cols]
    cx, cy = (xs * stride).ravel(), (ys * stride).ravel()
    scales = [GridScale(rows, cols, w, h) for w, h in box_sizes]
    scores = [np.zeros((field.n_frames, rows, cols)) for _ in scales]
    embs = [np.zeros((field.n_frames, rows, cols, field.embed_dim)) for _ in scales]
    for s, (w, h) in enumerate(box_sizes):
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        for fr in range(field.n_frames):
            scores[s][fr] = field.score_boxes(fr, boxes).reshape(rows, cols)
            embs[s][fr] = field.embed_boxes(fr, boxes).reshape(rows, cols, -1)
    write_grid(path, stride, scales, scores, embs)
