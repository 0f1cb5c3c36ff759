"""Detection ingestion, synthetic scene generation, and the tiled
coarse-detection emulation (tiling + per-tile observation + NMS aggregation).

Real detector inference is out of scope: scenes come either from detection
files (JSON/CSV) or from a stratified synthetic generator, and the per-tile
"detector" simply observes ground-truth boxes, optionally dropping and
jittering them to mimic a low-confidence, high-recall first pass.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import DetectionBox, Frame, nms

CSV_HEADER = ["cx", "cy", "w", "h", "score", "class_id"]


@dataclass(frozen=True)
class Stratum:
    """A horizontal band of the frame with its own object size range.

    Lower bands should carry larger size ranges to reproduce the usual
    stratified layout (small dense objects high in the frame, large sparse
    ones low).
    """

    y0: float
    y1: float
    size_min: float
    size_max: float
    density: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"y band [{self.y0}, {self.y1}] invalid")
        if not (0.0 < self.size_min <= self.size_max <= 1.0):
            raise ValueError(f"size range [{self.size_min}, {self.size_max}] invalid")
        if self.density <= 0.0:
            raise ValueError("stratum density must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for one synthetic scene distribution (seed included)."""

    width_px: int = 3840
    height_px: int = 2160
    count_min: int = 20
    count_max: int = 40
    strata: tuple[Stratum, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("frame size must be positive")
        if not (1 <= self.count_min <= self.count_max):
            raise ValueError(f"count range [{self.count_min}, {self.count_max}] invalid")
        if len(self.strata) == 0:
            raise ValueError("scene spec needs at least one stratum")
        object.__setattr__(self, "strata", tuple(self.strata))

    def with_seed(self, seed: int) -> "SceneSpec":
        return SceneSpec(self.width_px, self.height_px, self.count_min,
                         self.count_max, self.strata, seed)


def scene_spec_from_dict(d: dict) -> SceneSpec:
    strata = tuple(
        Stratum(s["y_band"][0], s["y_band"][1], s["size_range"][0],
                s["size_range"][1], s.get("density", 1.0))
        for s in d.get("strata", [])
    )
    return SceneSpec(
        width_px=int(d.get("width_px", 3840)),
        height_px=int(d.get("height_px", 2160)),
        count_min=int(d.get("count_range", [20, 40])[0]),
        count_max=int(d.get("count_range", [20, 40])[1]),
        strata=strata,
        seed=int(d.get("seed", 0)),
    )


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return scene_spec_from_dict(json.load(f))


def generate_scene(spec: SceneSpec) -> Frame:
    """Draw a synthetic frame from the spec; deterministic per seed.

    Each object picks a stratum by density weight, a vertical position
    uniform in the band, and a height that grows with the position inside
    the band (plus jitter), so box size correlates with cy across and
    within strata.
    """
    rng = np.random.default_rng(spec.seed)
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    weights = np.array([s.density for s in spec.strata], dtype=float)
    weights /= weights.sum()
    boxes = []
    for _ in range(count):
        s = spec.strata[int(rng.choice(len(spec.strata), p=weights))]
        cy = float(rng.uniform(s.y0, s.y1))
        rel = (cy - s.y0) / (s.y1 - s.y0) if s.y1 > s.y0 else 0.5
        t = min(1.0, max(0.0, rel + rng.uniform(-0.25, 0.25)))
        h = s.size_min + (s.size_max - s.size_min) * t
        w = min(1.0, h * float(rng.uniform(0.6, 1.1)))
        cx = float(rng.uniform(w / 2.0, 1.0 - w / 2.0))
        cy = min(max(cy, h / 2.0), 1.0 - h / 2.0)
        score = float(rng.uniform(0.3, 1.0))
        boxes.append(DetectionBox(cx, cy, w, h, score, 0))
    return Frame(spec.width_px, spec.height_px, tuple(boxes))


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------

def _box_from_row(row: dict, where: str) -> DetectionBox:
    try:
        vals = {k: float(row[k]) for k in ("cx", "cy", "w", "h", "score")}
        cid = int(row["class_id"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{where}: malformed detection row ({e})") from None
    try:
        return DetectionBox(vals["cx"], vals["cy"], vals["w"], vals["h"], vals["score"], cid)
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None


def load_detections(path, fmt: str | None = None,
                    width_px: int = 3840, height_px: int = 2160) -> Frame:
    """Read a detection file (JSON or CSV) into a validated Frame.

    Invalid rows are rejected with their position in the file. The CSV
    format carries no frame size, so ``width_px``/``height_px`` apply;
    JSON files embed their own size.
    """
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.endswith(".csv") else "json"
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown detection format {fmt!r}")
    if fmt == "json":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        try:
            width, height = int(data["width_px"]), int(data["height_px"])
            rows = data["detections"]
        except (KeyError, TypeError) as e:
            raise ValueError(f"{path}: missing field {e}") from None
        boxes = [_box_from_row(r, f"detection {i}") for i, r in enumerate(rows)]
        return Frame(width, height, tuple(boxes))
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: CSV header must be exactly {','.join(CSV_HEADER)}")
        boxes = [_box_from_row(r, f"row {i}") for i, r in enumerate(reader, start=2)]
    return Frame(width_px, height_px, tuple(boxes))


def save_detections(frame: Frame, path, fmt: str | None = None) -> None:
    """Write a Frame in the JSON (default) or CSV detection format."""
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.endswith(".csv") else "json"
    if fmt == "json":
        payload = {
            "width_px": frame.width_px,
            "height_px": frame.height_px,
            "detections": [
                {"cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h,
                 "score": d.score, "class_id": d.class_id}
                for d in frame.detections
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for d in frame.detections:
                writer.writerow([repr(d.cx), repr(d.cy), repr(d.w), repr(d.h),
                                 repr(d.score), d.class_id])
    else:
        raise ValueError(f"unknown detection format {fmt!r}")


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileGrid:
    """n*E equal tiles covering the frame, arranged near-square."""

    n: int
    e: int
    rows: int
    cols: int
    width_px: int
    height_px: int
    tiles: tuple[tuple[int, int, int, int], ...]


def grid_shape(total: int) -> tuple[int, int]:
    """rows x cols with rows the largest divisor of total <= sqrt(total)."""
    rows = 1
    for d in range(1, int(math.isqrt(total)) + 1):
        if total % d == 0:
            rows = d
    return rows, total // rows


def tile_frame(frame: Frame, n: int, e: int) -> TileGrid:
    """Split the frame into n*E equal tiles (no gaps, no overlap)."""
    if n < 1 or e < 1:
        raise ValueError(f"n={n}, E={e} must both be >= 1")
    total = n * e
    rows, cols = grid_shape(total)
    xs = [round(k * frame.width_px / cols) for k in range(cols + 1)]
    ys = [round(k * frame.height_px / rows) for k in range(rows + 1)]
    tiles = tuple(
        (xs[c], ys[r], xs[c + 1], ys[r + 1])
        for r in range(rows)
        for c in range(cols)
    )
    return TileGrid(n, e, rows, cols, frame.width_px, frame.height_px, tiles)


def observe_tiles(
    frame: Frame,
    grid: TileGrid,
    min_visible: float = 0.25,
    drop_prob: float = 0.0,
    jitter_sigma: float = 0.0,
    seed: int | None = None,
):
    """Emulate per-tile coarse detection against ground-truth boxes.

    Every tile reports each box whose intersection with the tile covers at
    least ``min_visible`` of the box area, as a raw (cx, cy, w, h, score,
    class_id) tuple in tile-local normalized coordinates. Boxes straddling
    a boundary are reported by several tiles; the duplicates are resolved
    later by NMS aggregation. In noisy mode each observation is dropped
    with ``drop_prob`` and its coordinates jittered with Gaussian sigma.
    """
    rng = np.random.default_rng(seed)
    w_px, h_px = frame.width_px, frame.height_px
    per_tile = []
    for (tx0, ty0, tx1, ty1) in grid.tiles:
        tw, th = tx1 - tx0, ty1 - ty0
        rows = []
        for d in frame.detections:
            bx0, by0, bx1, by1 = d.extent()
            bx0, bx1 = bx0 * w_px, bx1 * w_px
            by0, by1 = by0 * h_px, by1 * h_px
            inter = max(0.0, min(bx1, tx1) - max(bx0, tx0)) * \
                max(0.0, min(by1, ty1) - max(by0, ty0))
            box_area = (bx1 - bx0) * (by1 - by0)
            if box_area <= 0.0 or inter / box_area < min_visible:
                continue
            if drop_prob > 0.0 and rng.random() < drop_prob:
                continue
            # full box in tile-local units; may poke outside [0, 1] locally
            cx = (d.cx * w_px - tx0) / tw
            cy = (d.cy * h_px - ty0) / th
            w = d.w * w_px / tw
            h = d.h * h_px / th
            if jitter_sigma > 0.0:
                cx += float(rng.normal(0.0, jitter_sigma))
                cy += float(rng.normal(0.0, jitter_sigma))
                w = max(1e-4, w + float(rng.normal(0.0, jitter_sigma)))
                h = max(1e-4, h + float(rng.normal(0.0, jitter_sigma)))
            rows.append((cx, cy, w, h, d.score, d.class_id))
        per_tile.append(rows)
    return per_tile


def aggregate_tiles(per_tile, grid: TileGrid, iou_threshold: float = 0.5) -> list[DetectionBox]:
    """Map tile-local observations to frame coordinates and run global NMS."""
    if len(per_tile) != len(grid.tiles):
        raise ValueError(f"{len(per_tile)} tile lists for {len(grid.tiles)} tiles")
    w_px, h_px = grid.width_px, grid.height_px
    remapped = []
    for rows, (tx0, ty0, tx1, ty1) in zip(per_tile, grid.tiles):
        tw, th = tx1 - tx0, ty1 - ty0
        for (cx, cy, w, h, score, cid) in rows:
            gx = (tx0 + cx * tw) / w_px
            gy = (ty0 + cy * th) / h_px
            gw = w * tw / w_px
            gh = h * th / h_px
            # jittered straddlers can poke out of frame; clamp back in
            gw = min(max(gw, 1e-6), 1.0)
            gh = min(max(gh, 1e-6), 1.0)
            gx = min(max(gx, 0.0), 1.0)
            gy = min(max(gy, 0.0), 1.0)
            score = min(max(score, 0.0), 1.0)
            remapped.append(DetectionBox(gx, gy, gw, gh, score, int(cid)))
    return nms(remapped, iou_threshold)


def coarse_detect(
    frame: Frame,
    n: int,
    e: int,
    iou_threshold: float = 0.5,
    min_visible: float = 0.25,
    drop_prob: float = 0.0,
    jitter_sigma: float = 0.0,
    seed: int | None = None,
) -> Frame:
    """Full coarse-detection emulation: tile, observe per tile, aggregate."""
    grid = tile_frame(frame, n, e)
    per_tile = observe_tiles(frame, grid, min_visible, drop_prob, jitter_sigma, seed)
    boxes = aggregate_tiles(per_tile, grid, iou_threshold)
    return Frame(frame.width_px, frame.height_px, tuple(boxes))
