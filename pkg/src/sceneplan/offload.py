"""Latency-budgeted model assignment (multi-choice knapsack by dynamic
programming with backtracking) and parallel edge-server schedule simulation.

The budget constrains the SUM of per-block model latencies even though the
blocks execute in parallel; both that sum and the parallel makespan are
reported so either budget can be inspected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import ClusterConfig, Frame, bounding_block


class InfeasiblePlanError(Exception):
    """No model assignment fits the latency budget."""


@dataclass(frozen=True)
class ModelProfile:
    """One detector model: square input side, latency, and an area-binned
    precision curve of (bin upper edge in resized px^2, mAP) points."""

    name: str
    input_size: int
    latency_ms: int
    curve: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.input_size <= 0:
            raise ValueError(f"{self.name}: input size must be positive")
        if self.latency_ms <= 0:
            raise ValueError(f"{self.name}: latency must be positive")
        if len(self.curve) == 0:
            raise ValueError(f"{self.name}: empty precision curve")
        edges = [e for e, _ in self.curve]
        if any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] <= 0:
            raise ValueError(f"{self.name}: bin edges must be positive and increasing")
        if any(not (0.0 <= m <= 1.0) for _, m in self.curve):
            raise ValueError(f"{self.name}: mAP values must lie in [0, 1]")

    def bin_centers(self) -> np.ndarray:
        edges = np.array([0.0] + [e for e, _ in self.curve])
        return (edges[:-1] + edges[1:]) / 2.0


def profile_from_dict(d: dict, enforce_monotone: bool = True) -> ModelProfile:
    """Build a profile from its JSON form; fractional latencies round up."""
    curve = tuple((float(e), float(m)) for e, m in d["curve"])
    maps = [m for _, m in curve]
    if enforce_monotone and any(b < a for a, b in zip(maps, maps[1:])):
        raise ValueError(
            f"{d.get('name', '?')}: precision curve decreases with area; "
            "pass enforce_monotone=False to accept measured curves verbatim")
    return ModelProfile(
        name=str(d["name"]),
        input_size=int(d["input_size"]),
        latency_ms=math.ceil(float(d["latency_ms"])),
        curve=curve,
    )


def load_profiles(path, enforce_monotone: bool = True) -> list[ModelProfile]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    models = data["models"] if isinstance(data, dict) else data
    if not models:
        raise ValueError(f"{path}: no models in profile file")
    return [profile_from_dict(m, enforce_monotone) for m in models]


def default_profiles() -> list[ModelProfile]:
    """The bundled five-model table (illustrative defaults, not measurements)."""
    ref = resources.files("sceneplan").joinpath("data/default_profiles.json")
    with ref.open("r", encoding="utf-8") as f:
        data = json.load(f)
    return [profile_from_dict(m) for m in data["models"]]


@dataclass(frozen=True)
class PartitionDescriptor:
    """One image block: pixel size plus its member boxes' original areas."""

    id: int
    width_px: int
    height_px: int
    areas_px2: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(f"partition {self.id}: size must be positive")
        if len(self.areas_px2) == 0:
            raise ValueError(f"partition {self.id}: needs at least one box")
        if any(a <= 0 for a in self.areas_px2):
            raise ValueError(f"partition {self.id}: areas must be positive")

    @property
    def count(self) -> int:
        return len(self.areas_px2)


def scale_area(area_px2: float, width_px: float, height_px: float,
               input_size: float) -> float:
    """Box area after the block is resized to the model's square input."""
    if min(area_px2, width_px, height_px, input_size) <= 0:
        raise ValueError("scale_area inputs must be positive")
    return area_px2 * input_size ** 2 / (width_px * height_px)


def precision_lookup(profile: ModelProfile, area_px2: float) -> float:
    """Piecewise-linear mAP over bin centers, clamped at both ends."""
    if area_px2 <= 0:
        raise ValueError("area must be positive")
    centers = profile.bin_centers()
    maps = np.array([m for _, m in profile.curve])
    return float(np.interp(area_px2, centers, maps))


def partition_precision(part: PartitionDescriptor, profile: ModelProfile) -> float:
    """Mean per-box precision of the block under one model."""
    total = 0.0
    for a in part.areas_px2:
        total += precision_lookup(
            profile, scale_area(a, part.width_px, part.height_px, profile.input_size))
    return total / part.count


def partitions_from_config(config: ClusterConfig, frame: Frame,
                           margin: float = 0.0) -> list[PartitionDescriptor]:
    """Wrap each cluster in its pixel block and collect member box areas."""
    parts = []
    for pid, cluster in enumerate(config.clusters):
        x0, y0, x1, y1 = bounding_block(cluster, config.detections, margin, frame)
        areas = tuple(
            config.detections[i].w * frame.width_px *
            config.detections[i].h * frame.height_px
            for i in cluster.members
        )
        parts.append(PartitionDescriptor(pid, x1 - x0, y1 - y0, areas))
    return parts


@dataclass(frozen=True)
class OffloadPlan:
    """One model per partition, plus the achieved totals."""

    assignments: tuple[tuple[int, str, int, float], ...]  # (pid, model, latency, precision)
    total_precision: float
    total_latency_ms: int
    opt_t: int

    def as_mapping(self) -> dict[int, str]:
        return {pid: model for pid, model, _, _ in self.assignments}


def dp_plan(partitions, profiles, d_max: int) -> OffloadPlan:
    """Pick one model per partition maximizing summed precision under the
    latency-sum budget.

    Table semantics: dp[i][t] is the best precision over the first i
    partitions with latency sum within t (the zero row spreads 0 across
    every t, so each row folds the previous row shifted by each model's
    latency). Unreachable cells hold -inf as the explicit invalid marker.
    Ties prefer smaller latency, then smaller model input; the optimal
    column is the first t attaining the maximum.
    """
    if d_max < 0:
        raise ValueError("latency budget must be >= 0")
    if not partitions:
        raise ValueError("no partitions to plan")
    if not profiles:
        raise ValueError("no model profiles")
    n = len(partitions)
    # canonical model order realizes the tie-break under strict improvement
    order = sorted(range(len(profiles)),
                   key=lambda j: (profiles[j].latency_ms, profiles[j].input_size))
    prec = np.array([[partition_precision(p, prof) for prof in profiles]
                     for p in partitions])
    width = d_max + 1
    prev = np.zeros(width)
    choice = np.full((n, width), -1, dtype=int)
    for i in range(n):
        best = np.full(width, -np.inf)
        for j in order:
            d = profiles[j].latency_ms
            if d > d_max:
                continue
            cand = np.full(width, -np.inf)
            cand[d:] = prev[:width - d] + prec[i, j]
            better = cand > best
            best[better] = cand[better]
            choice[i][better] = j
        prev = best
    if not np.isfinite(prev).any():
        cheapest = sum(min(p.latency_ms for p in profiles) for _ in partitions)
        raise InfeasiblePlanError(
            f"budget {d_max} ms infeasible: cheapest assignment needs "
            f"{cheapest} ms (short by {cheapest - d_max} ms)")
    opt_t = int(np.argmax(prev))
    total_precision = float(prev[opt_t])
    t = opt_t
    picks = []
    for i in range(n - 1, -1, -1):
        j = int(choice[i][t])
        picks.append(j)
        t -= profiles[j].latency_ms
    picks.reverse()
    assignments = tuple(
        (part.id, profiles[j].name, profiles[j].latency_ms, float(prec[i, j]))
        for i, (part, j) in enumerate(zip(partitions, picks))
    )
    total_latency = sum(lat for _, _, lat, _ in assignments)
    # invariants asserted on every solve
    assert len(assignments) == n, "plan must assign exactly one model per partition"
    assert total_latency <= d_max, "plan exceeds the latency budget"
    return OffloadPlan(assignments, total_precision, total_latency, opt_t)


@dataclass(frozen=True)
class ScheduledTask:
    partition_id: int
    model: str
    latency_ms: int
    start_ms: int
    end_ms: int


@dataclass(frozen=True)
class ServerSchedule:
    lanes: tuple[tuple[ScheduledTask, ...], ...]
    makespan_ms: int


def assign_servers(plan: OffloadPlan, e: int) -> ServerSchedule:
    """Longest-processing-time-first list scheduling onto e server lanes.

    Blocks are placed by descending latency (partition id breaks ties) onto
    the currently least-loaded lane (lowest index breaks ties).
    """
    if e < 1:
        raise ValueError("need at least one server")
    tasks = sorted(plan.assignments, key=lambda a: (-a[2], a[0]))
    loads = [0] * e
    lanes: list[list[ScheduledTask]] = [[] for _ in range(e)]
    for pid, model, lat, _ in tasks:
        lane = loads.index(min(loads))
        lanes[lane].append(ScheduledTask(pid, model, lat, loads[lane], loads[lane] + lat))
        loads[lane] += lat
    return ServerSchedule(tuple(tuple(l) for l in lanes), max(loads) if loads else 0)


@dataclass(frozen=True)
class ScheduleMetrics:
    makespan_ms: int
    sum_latency_ms: int
    busy_ms: tuple[int, ...]
    utilization: tuple[float, ...]


def simulate(schedule: ServerSchedule) -> ScheduleMetrics:
    """Replay the schedule's time accounting.

    Conservation holds exactly: summed busy time equals summed latency.
    """
    busy = []
    total = 0
    makespan = 0
    for lane in schedule.lanes:
        t = 0
        lane_busy = 0
        for task in lane:
            if task.start_ms != t:
                raise ValueError(
                    f"lane gap/overlap at partition {task.partition_id}")
            if task.end_ms - task.start_ms != task.latency_ms:
                raise ValueError(
                    f"span != latency for partition {task.partition_id}")
            t = task.end_ms
            lane_busy += task.latency_ms
        busy.append(lane_busy)
        total += lane_busy
        makespan = max(makespan, t)
    if makespan != schedule.makespan_ms:
        raise ValueError("recorded makespan disagrees with replay")
    util = tuple(b / makespan if makespan > 0 else 0.0 for b in busy)
    return ScheduleMetrics(makespan, total, tuple(busy), util)
