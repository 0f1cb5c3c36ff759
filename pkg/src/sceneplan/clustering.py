"""Initial clustering and the merge/split primitives driving refinement.

Object centers are clustered in (x, y**alpha) space: raising the normalized
y-coordinate to a power below one stretches the top of the frame (small,
densely packed objects) and compresses the bottom (large, sparse objects),
so one bandwidth works across the whole frame. Split decisions reuse the
same transformed space when a transform is passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClusterConfig, Frame, make_cluster


@dataclass(frozen=True)
class TransformParams:
    """Exponent applied to normalized y before clustering; in (0, 1)."""

    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha {self.alpha} outside (0, 1)")


@dataclass(frozen=True)
class BandwidthSpec:
    """MeanShift bandwidth: a fixed radius or a nearest-neighbor quantile."""

    mode: str = "quantile"
    value: float = 0.2

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "quantile"):
            raise ValueError(f"bandwidth mode {self.mode!r} not fixed/quantile")
        if self.value <= 0.0:
            raise ValueError("bandwidth value must be positive")
        if self.mode == "quantile" and self.value >= 1.0:
            raise ValueError(f"quantile {self.value} must be below 1")


def transform_y(points, params: TransformParams = TransformParams()):
    """Replace each point's y by y**alpha; x stays untouched."""
    pts = np.asarray(points, dtype=float)
    y = pts[..., 1]
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("y coordinates outside [0, 1]")
    out = pts.copy()
    out[..., 1] = y ** params.alpha
    return out


def inverse_transform_y(points, params: TransformParams = TransformParams()):
    """Undo transform_y: y = y_t ** (1 / alpha)."""
    pts = np.asarray(points, dtype=float)
    out = pts.copy()
    out[..., 1] = pts[..., 1] ** (1.0 / params.alpha)
    return out


BANDWIDTH_FLOOR = 1e-3


def estimate_bandwidth(points, quantile: float = 0.2) -> float:
    """Quantile of the nearest-neighbor distance distribution.

    Subsampled to at most 1000 points (evenly spaced, deterministic).
    Degenerate inputs (all points coincident) fall back to a fixed floor.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to estimate a bandwidth")
    if not (0.0 < quantile < 1.0):
        raise ValueError(f"quantile {quantile} outside (0, 1)")
    if len(pts) > 1000:
        idx = np.linspace(0, len(pts) - 1, 1000).astype(int)
        pts = pts[idx]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    nn = dist.min(axis=1)
    return max(float(np.quantile(nn, quantile)), BANDWIDTH_FLOOR)


def resolve_bandwidth(spec: BandwidthSpec, points) -> float:
    if spec.mode == "fixed":
        return spec.value
    if len(points) < 2:
        return BANDWIDTH_FLOOR
    return estimate_bandwidth(points, spec.value)


def meanshift(points, bandwidth: float, tol: float = 1e-4, max_iter: int = 300):
    """Flat-kernel MeanShift; returns an integer cluster label per point.

    Each point seeds a mode that iterates to the mean of all points within
    the bandwidth until it moves less than ``tol`` (or ``max_iter`` caps).
    Converged modes closer than bandwidth/2 collapse onto the first-seen
    one, and every point joins its nearest surviving mode.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 1:
        raise ValueError("points must be a non-empty (n, 2) array")
    if bandwidth <= 0.0:
        raise ValueError(f"bandwidth {bandwidth} must be positive")
    modes = pts.copy()
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        sub = modes[active]
        dist = np.sqrt(((sub[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        within = dist <= bandwidth
        counts = within.sum(axis=1)
        new = (within[:, :, None] * pts[None, :, :]).sum(axis=1) / counts[:, None]
        shift = np.sqrt(((new - sub) ** 2).sum(axis=1))
        modes[active] = new
        still = shift >= tol
        active[np.flatnonzero(active)[~still]] = False

    # collapse near-duplicate modes, first-seen representative wins
    reps: list[np.ndarray] = []
    for m in modes:
        if not any(np.linalg.norm(m - r) <= bandwidth / 2.0 for r in reps):
            reps.append(m)
    rep_arr = np.array(reps)
    d = np.sqrt(((pts[:, None, :] - rep_arr[None, :, :]) ** 2).sum(axis=2))
    labels = d.argmin(axis=1)
    # drop representatives that attracted no points, keep label order stable
    used = sorted(set(int(l) for l in labels))
    remap = {old: new for new, old in enumerate(used)}
    return np.array([remap[int(l)] for l in labels], dtype=int)


def initial_clusters(
    frame: Frame,
    transform: TransformParams = TransformParams(),
    bandwidth: BandwidthSpec = BandwidthSpec(),
) -> ClusterConfig:
    """MeanShift over transformed object centers; the starting configuration."""
    if len(frame.detections) == 0:
        raise ValueError("empty scene")
    raw = np.array([[d.cx, d.cy] for d in frame.detections])
    pts = transform_y(raw, transform)
    bw = resolve_bandwidth(bandwidth, pts)
    labels = meanshift(pts, bw)
    clusters = []
    for lbl in range(labels.max() + 1):
        members = np.flatnonzero(labels == lbl)
        clusters.append(make_cluster(members.tolist(), frame.detections))
    return ClusterConfig(tuple(clusters), frame.detections)


def kmeans_1d(values, k: int = 2):
    """Optimal 2-way 1D partition by within-cluster sum of squares.

    Optimal 1D clusters are contiguous in sorted order, so every one of the
    n-1 sorted split points is scored and the best (first on ties) wins.
    Returns a 0/1 label per input value; 0 marks the lower group.
    """
    if k != 2:
        raise ValueError("only k=2 supported")
    vals = np.asarray(values, dtype=float)
    n = len(vals)
    if n < 2:
        raise ValueError("need at least 2 values to split")
    order = np.argsort(vals, kind="stable")
    s = vals[order]
    prefix = np.concatenate([[0.0], np.cumsum(s)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(s ** 2)])

    def sse(lo, hi):  # half-open [lo, hi)
        cnt = hi - lo
        tot = prefix[hi] - prefix[lo]
        return (prefix_sq[hi] - prefix_sq[lo]) - tot * tot / cnt

    costs = np.array([sse(0, m) + sse(m, n) for m in range(1, n)])
    split = int(np.argmin(costs)) + 1
    labels = np.empty(n, dtype=int)
    labels[order[:split]] = 0
    labels[order[split:]] = 1
    return labels


def _centroids(config: ClusterConfig, transform: TransformParams | None):
    """Cluster centroids, in raw space or as means of transformed centers."""
    if transform is None:
        return np.array([[c.mu_x, c.mu_y] for c in config.clusters])
    cents = []
    for c in config.clusters:
        pts = np.array([[config.detections[i].cx, config.detections[i].cy]
                        for i in c.members])
        cents.append(transform_y(pts, transform).mean(axis=0))
    return np.array(cents)


def select_merge_pair(config: ClusterConfig,
                      transform: TransformParams | None = None) -> tuple[int, int]:
    """Indices of the two clusters with minimum centroid distance.

    Ties break toward the lexicographically smallest (i, j).
    """
    if config.count < 2:
        raise ValueError("merge unavailable: fewer than 2 clusters")
    cents = _centroids(config, transform)
    best = (0, 1)
    best_d = np.inf
    for i in range(config.count):
        for j in range(i + 1, config.count):
            d = float(np.linalg.norm(cents[i] - cents[j]))
            if d < best_d:
                best, best_d = (i, j), d
    return best


def merge_clusters(config: ClusterConfig, i: int, j: int) -> ClusterConfig:
    """Replace clusters i and j with their union, appended at the end."""
    if i == j:
        raise ValueError("cannot merge a cluster with itself")
    if not (0 <= i < config.count and 0 <= j < config.count):
        raise ValueError(f"cluster index out of range: ({i}, {j})")
    merged = make_cluster(config.clusters[i].members + config.clusters[j].members,
                          config.detections)
    rest = tuple(c for k, c in enumerate(config.clusters) if k not in (i, j))
    return ClusterConfig(rest + (merged,), config.detections)


def split_cluster(config: ClusterConfig, i: int,
                  transform: TransformParams | None = None) -> ClusterConfig:
    """Split cluster i in two along its higher-variance center dimension.

    Variance is population variance over member centers (transformed y when
    a transform is given; ties go to y since vertical stratification
    dominates). The lower sub-cluster takes the split cluster's slot and
    the upper one is appended.
    """
    if not (0 <= i < config.count):
        raise ValueError(f"cluster index {i} out of range")
    cluster = config.clusters[i]
    if cluster.size < 2:
        raise ValueError("split unavailable: cluster has fewer than 2 members")
    pts = np.array([[config.detections[m].cx, config.detections[m].cy]
                    for m in cluster.members])
    if transform is not None:
        pts = transform_y(pts, transform)
    var_x, var_y = pts.var(axis=0)
    coord = pts[:, 0] if var_x > var_y else pts[:, 1]
    labels = kmeans_1d(coord)
    members = np.array(cluster.members)
    low = make_cluster(members[labels == 0].tolist(), config.detections)
    high = make_cluster(members[labels == 1].tolist(), config.detections)
    clusters = list(config.clusters)
    clusters[i] = low
    clusters.append(high)
    return ClusterConfig(tuple(clusters), config.detections)
