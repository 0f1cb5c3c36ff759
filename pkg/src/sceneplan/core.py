"""Geometry primitives, detection-box operations, and cluster statistics.

Coordinates are stored normalized to [0, 1] relative to the frame; pixel
conversion happens only when a cluster is turned into an image block.
All operations here are pure functions over immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class DetectionBox:
    """One detected object: normalized center/size, confidence, class."""

    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"size ({self.w}, {self.h}) outside (0, 1]")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return self.w * self.h

    def extent(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corners, clamped to the unit frame."""
        return (
            max(0.0, self.cx - self.w / 2.0),
            max(0.0, self.cy - self.h / 2.0),
            min(1.0, self.cx + self.w / 2.0),
            min(1.0, self.cy + self.h / 2.0),
        )


@dataclass(frozen=True)
class Frame:
    """A frame's pixel size plus its list of detections."""

    width_px: int
    height_px: int
    detections: tuple[DetectionBox, ...] = ()

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(f"frame size {self.width_px}x{self.height_px} not positive")
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class Cluster:
    """A group of detection indices with cached centroid/size statistics."""

    members: tuple[int, ...]
    mu_x: float
    mu_y: float
    mu_w: float
    mu_h: float

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusterConfig:
    """A set of clusters partitioning a frame's detection indices.

    Cluster order is creation order: merges append the new cluster, splits
    replace in place and append, so downstream state encodings are stable.
    """

    clusters: tuple[Cluster, ...]
    detections: tuple[DetectionBox, ...]

    @property
    def count(self) -> int:
        return len(self.clusters)


def cluster_stats(members, detections) -> tuple[float, float, float, float, int]:
    """Arithmetic means of member centers/sizes plus the member count."""
    if not members:
        raise ValueError("empty cluster")
    n = len(members)
    sx = sy = sw = sh = 0.0
    for i in members:
        d = detections[i]
        sx += d.cx
        sy += d.cy
        sw += d.w
        sh += d.h
    return sx / n, sy / n, sw / n, sh / n, n


def make_cluster(members, detections) -> Cluster:
    """Build a Cluster from detection indices, stats recomputed from scratch.

    Members are kept sorted so identical member sets always yield bitwise
    identical statistics regardless of how the set was assembled.
    """
    members = tuple(sorted(members))
    if len(set(members)) != len(members):
        raise ValueError("duplicate member indices")
    mx, my, mw, mh, _ = cluster_stats(members, detections)
    return Cluster(members, mx, my, mw, mh)


def validate_partition(config: ClusterConfig) -> None:
    """Raise if the clusters do not partition the detection indices exactly."""
    if config.count < 1:
        raise ValueError("configuration has no clusters")
    seen: list[int] = []
    for c in config.clusters:
        if c.size < 1:
            raise ValueError("empty cluster")
        seen.extend(c.members)
    if len(seen) != len(set(seen)):
        raise ValueError("clusters overlap")
    if set(seen) != set(range(len(config.detections))):
        raise ValueError("clusters do not cover all detections")


def iou(a: DetectionBox, b: DetectionBox) -> float:
    """Intersection over union of the two (frame-clamped) rectangles."""
    ax0, ay0, ax1, ay1 = a.extent()
    bx0, by0, bx1, by1 = b.extent()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def nms(boxes, iou_threshold: float = 0.5) -> list[DetectionBox]:
    """Greedy class-wise non-maximum suppression.

    Boxes are visited by descending score (ties broken by input position);
    a box survives iff its IoU with every already-kept box of the same
    class stays below the threshold. Output is in visit order, i.e. sorted
    by descending score.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1)")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[DetectionBox] = []
    for i in order:
        box = boxes[i]
        if all(iou(box, k) < iou_threshold for k in kept if k.class_id == box.class_id):
            kept.append(box)
    return kept


def bounding_block(
    cluster: Cluster,
    detections,
    margin: float = 0.0,
    frame: Frame | None = None,
) -> tuple[int, int, int, int]:
    """Pixel rectangle (x0, y0, x1, y1) covering all member boxes.

    The tight normalized rectangle over member extents is padded by
    margin * max(rect width, rect height) on every side, clipped to the
    frame, and converted to integer pixels.
    """
    if margin < 0.0:
        raise ValueError(f"margin {margin} negative")
    if frame is None:
        raise ValueError("frame required for pixel conversion")
    if cluster.size < 1:
        raise ValueError("empty cluster")
    x0 = y0 = 1.0
    x1 = y1 = 0.0
    for i in cluster.members:
        bx0, by0, bx1, by1 = detections[i].extent()
        x0, y0 = min(x0, bx0), min(y0, by0)
        x1, y1 = max(x1, bx1), max(y1, by1)
    pad = margin * max(x1 - x0, y1 - y0)
    x0, y0 = max(0.0, x0 - pad), max(0.0, y0 - pad)
    x1, y1 = min(1.0, x1 + pad), min(1.0, y1 + pad)
    px0 = int(round(x0 * frame.width_px))
    py0 = int(round(y0 * frame.height_px))
    px1 = int(round(x1 * frame.width_px))
    py1 = int(round(y1 * frame.height_px))
    # degenerate guard: a block is never thinner than one pixel
    px0 = min(px0, frame.width_px - 1)
    py0 = min(py0, frame.height_px - 1)
    px1 = max(px1, px0 + 1)
    py1 = max(py1, py0 + 1)
    return px0, py0, px1, py1
