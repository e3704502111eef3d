"""Boxes, tubes, temporal segments and the overlap measures built on them.

Boxes are continuous half-open rectangles ``(x_min, y_min, x_max, y_max)``.
Frames are inclusive integer indices, so a segment ``[s, e]`` has
``e - s + 1`` frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPAN_POLICIES = ("union", "intersection")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)


@dataclass(frozen=True)
class TemporalSegment:
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"segment start {self.start} after end {self.end}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def contains(self, frame: int) -> bool:
        return self.start <= frame <= self.end

    def intersect(self, other: "TemporalSegment") -> "TemporalSegment | None":
        s, e = max(self.start, other.start), min(self.end, other.end)
        return TemporalSegment(s, e) if s <= e else None


@dataclass(eq=False)
class Tube:
    """One box per frame over the inclusive span ``[start, end]``.

    ``score`` carries the mean human score of a proposal when known; it is
    metadata and plays no part in the overlap measures.
    """

    video_id: str
    start: int
    boxes: np.ndarray
    score: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.start = int(self.start)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) == 0:
            raise ValueError("a tube needs at least one box")
        b = self.boxes
        if not np.all(np.isfinite(b)):
            raise ValueError("non-finite tube boxes")
        if np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3]):
            raise ValueError("degenerate box in tube")

    @property
    def end(self) -> int:
        return self.start + len(self.boxes) - 1

    @property
    def span(self) -> TemporalSegment:
        return TemporalSegment(self.start, self.end)

    @property
    def length(self) -> int:
        return len(self.boxes)

    def box_at(self, frame: int) -> np.ndarray:
        if not self.start <= frame <= self.end:
            raise IndexError(f"frame {frame} outside tube span [{self.start}, {self.end}]")
        return self.boxes[frame - self.start]

    def restrict(self, start: int, end: int) -> "Tube":
        s, e = max(start, self.start), min(end, self.end)
        if s > e:
            raise ValueError(f"[{start}, {end}] does not intersect tube span")
        return Tube(self.video_id, s, self.boxes[s - self.start: e - self.start + 1].copy(),
                    self.score, dict(self.meta))

    def same_as(self, other: "Tube") -> bool:
        return (self.video_id == other.video_id and self.start == other.start
                and self.boxes.shape == other.boxes.shape
                and bool(np.array_equal(self.boxes, other.boxes)))


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (n, 4) arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    iy = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = box_area(a) + box_area(b) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _as_box_array(box) -> np.ndarray:
    if isinstance(box, BoundingBox):
        return box.as_array()
    return np.asarray(box, dtype=np.float64)


def box_iou(a, b) -> float:
    return float(paired_iou(_as_box_array(a), _as_box_array(b))[0])


def temporal_iou(a: TemporalSegment, b: TemporalSegment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def tube_spatial_iou(a: Tube, b: Tube, policy: str = "union") -> float:
    """Mean per-frame box IoU between two tubes.

    With ``policy="union"`` the mean runs over the union of the two spans
    and frames covered by only one tube count as 0. ``"intersection"``
    averages over the shared frames only.
    """
    if policy not in SPAN_POLICIES:
        raise ValueError(f"unknown span policy {policy!r}")
    s, e = max(a.start, b.start), min(a.end, b.end)
    if s > e:
        return 0.0
    ious = paired_iou(a.boxes[s - a.start: e - a.start + 1], b.boxes[s - b.start: e - b.start + 1])
    if policy == "intersection":
        return float(ious.mean())
    n_union = max(a.end, b.end) - min(a.start, b.start) + 1
    return float(ious.sum() / n_union)


def st_iou(a: Tube, b: Tube, keyframes: Sequence[int] | None = None) -> float:
    """Temporal IoU times spatial IoU averaged over the evaluation frames.

    Evaluation frames are the keyframes lying in both spans when keyframes
    are given, otherwise every frame of the temporal intersection.
    """
    tiou = temporal_iou(a.span, b.span)
    if tiou == 0.0:
        return 0.0
    s, e = max(a.start, b.start), min(a.end, b.end)
    if keyframes is None:
        frames = np.arange(s, e + 1)
    else:
        frames = np.asarray([k for k in keyframes if s <= k <= e], dtype=np.int64)
        if len(frames) == 0:
            return 0.0
    spatial = paired_iou(a.boxes[frames - a.start], b.boxes[frames - b.start]).mean()
    return float(tiou * spatial)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0.0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, height)
    return out


# --------------------------------------------------------------------------
# Tube files
#
# Text: one tube per line, ``video_id f_s f_e x0 y0 x1 y1 ...`` with one
# box per frame of the inclusive span. Values are written with repr()
# precision so a round trip is exact.
#
# Binary (little-endian): b"TLTB", u16 version, u32 count, then per tube
# u16 id length, utf-8 id, i32 f_s, i32 n_frames, f64 human score,
# n_frames * 4 f64 box coordinates.

TUBE_MAGIC = b"TLTB"
TUBE_VERSION = 1


def format_tube_line(tube: Tube) -> str:
    coords = " ".join(repr(float(v)) for v in tube.boxes.ravel())
    return f"{tube.video_id} {tube.start} {tube.end} {coords}"


def parse_tube_line(line: str) -> Tube:
    parts = line.split()
    if len(parts) < 7:
        raise ValueError(f"short tube record: {line[:60]!r}")
    vid, fs, fe = parts[0], int(parts[1]), int(parts[2])
    vals = np.array([float(v) for v in parts[3:]])
    n = fe - fs + 1
    if vals.size != 4 * n:
        raise ValueError(f"tube {vid} [{fs},{fe}] expects {4 * n} coordinates, got {vals.size}")
    return Tube(vid, fs, vals.reshape(n, 4))


def write_tubes_text(path, tubes: Iterable[Tube]) -> None:
    with open(path, "w") as f:
        for t in tubes:
            f.write(format_tube_line(t) + "\n")


def read_tubes_text(path) -> list[Tube]:
    with open(path) as f:
        return [parse_tube_line(line) for line in f if line.strip() and not line.startswith("#")]


def write_tubes_binary(path, tubes: Iterable[Tube]) -> None:
    tubes = list(tubes)
    chunks = [TUBE_MAGIC, struct.pack("<HI", TUBE_VERSION, len(tubes))]
    for t in tubes:
        vid = t.video_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(vid)))
        chunks.append(vid)
        chunks.append(struct.pack("<iid", t.start, t.length, float(t.score)))
        chunks.append(np.ascontiguousarray(t.boxes, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tubes_binary(path) -> list[Tube]:
    data = Path(path).read_bytes()
    if data[:4] != TUBE_MAGIC:
        raise ValueError(f"{path}: not a tube file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != TUBE_VERSION:
        raise ValueError(f"{path}: unsupported tube file version {version}")
    off = 10
    tubes = []
    for _ in range(count):
        (n_id,) = struct.unpack_from("<H", data, off)
        off += 2
        vid = data[off: off + n_id].decode("utf-8")
        off += n_id
        start, n, score = struct.unpack_from("<iid", data, off)
        off += 16
        boxes = np.frombuffer(data, dtype="<f8", count=4 * n, offset=off).reshape(n, 4).astype(np.float64)
        off += 32 * n
        tubes.append(Tube(vid, start, boxes, score))
    return tubes


def read_tubes(path) -> list[Tube]:
    with open(path, "rb") as f:
        head = f.read(4)
    return read_tubes_binary(path) if head == TUBE_MAGIC else read_tubes_text(path)
