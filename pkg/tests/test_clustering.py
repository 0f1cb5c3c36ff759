import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneplan.clustering import (
    BandwidthSpec,
    TransformParams,
    estimate_bandwidth,
    initial_clusters,
    inverse_transform_y,
    kmeans_1d,
    meanshift,
    merge_clusters,
    select_merge_pair,
    split_cluster,
    transform_y,
)
from sceneplan.core import (
    ClusterConfig,
    DetectionBox,
    Frame,
    make_cluster,
    validate_partition,
)

from oracles import kmeans_1d_best_cost, labels_cost, random_config


def planted_blobs(rng, centers, sigma=0.01, per_blob=20):
    pts, labels = [], []
    for k, (cx, cy) in enumerate(centers):
        for _ in range(per_blob):
            pts.append([
                min(max(cx + rng.normal(0, sigma), 0.0), 1.0),
                min(max(cy + rng.normal(0, sigma), 0.0), 1.0),
            ])
            labels.append(k)
    return np.array(pts), np.array(labels)


def same_partition(a, b) -> bool:
    """Label agreement up to permutation."""
    groups_a = {}
    for i, l in enumerate(a):
        groups_a.setdefault(int(l), set()).add(i)
    groups_b = {}
    for i, l in enumerate(b):
        groups_b.setdefault(int(l), set()).add(i)
    return sorted(map(frozenset, groups_a.values())) == \
        sorted(map(frozenset, groups_b.values()))


# ---------------------------------------------------------------------------
# y transform
# ---------------------------------------------------------------------------

def test_transform_fixed_points():
    for alpha in (0.3, 0.5, 0.9):
        out = transform_y([(0.2, 0.0), (0.7, 1.0)], TransformParams(alpha))
        assert out[0, 1] == 0.0 and out[1, 1] == 1.0


def test_transform_direct_value():
    out = transform_y([(0.1, 0.25)], TransformParams(0.5))
    assert out[0] == pytest.approx([0.1, 0.5], abs=1e-12)


def test_transform_preserves_order(rng):
    y = rng.uniform(0, 1, 100)
    pts = np.stack([np.zeros(100), y], axis=1)
    yt = transform_y(pts, TransformParams(0.5))[:, 1]
    assert (np.argsort(y, kind="stable") == np.argsort(yt, kind="stable")).all()


def test_transform_invertible(rng):
    params = TransformParams(0.5)
    pts = np.stack([rng.uniform(0, 1, 1000), rng.uniform(0, 1, 1000)], axis=1)
    back = inverse_transform_y(transform_y(pts, params), params)
    assert np.abs(back - pts).max() < 1e-9


def test_transform_rejects_out_of_range():
    with pytest.raises(ValueError):
        transform_y([(0.5, 1.2)])


def test_transform_params_validated():
    with pytest.raises(ValueError):
        TransformParams(1.0)


# ---------------------------------------------------------------------------
# bandwidth
# ---------------------------------------------------------------------------

def test_bandwidth_two_points():
    assert estimate_bandwidth([(0.1, 0.5), (0.3, 0.5)], 0.5) == pytest.approx(0.2)


def test_bandwidth_unit_grid_vs_oracle():
    pts = np.array([[x, y] for x in np.arange(0.1, 1.0, 0.1)
                    for y in np.arange(0.1, 1.0, 0.1)])
    # oracle: brute-force nearest-neighbor distances, then the same quantile
    nn = []
    for i in range(len(pts)):
        best = min(np.hypot(*(pts[i] - pts[j])) for j in range(len(pts)) if j != i)
        nn.append(best)
    expected = float(np.quantile(nn, 0.5))
    assert expected == pytest.approx(0.1, abs=1e-9)
    assert estimate_bandwidth(pts, 0.5) == pytest.approx(expected, abs=1e-12)


def test_bandwidth_identical_points_floor():
    pts = [(0.5, 0.5)] * 10
    assert estimate_bandwidth(pts, 0.5) == 1e-3


def test_bandwidth_spec_validation():
    with pytest.raises(ValueError):
        BandwidthSpec("quantile", 1.5)
    with pytest.raises(ValueError):
        BandwidthSpec("nope", 0.5)


# ---------------------------------------------------------------------------
# meanshift
# ---------------------------------------------------------------------------

def test_meanshift_single_point():
    labels = meanshift(np.array([[0.4, 0.6]]), 0.1)
    assert labels.tolist() == [0]


def test_meanshift_identical_points():
    labels = meanshift(np.full((7, 2), 0.3), 0.1)
    assert labels.tolist() == [0] * 7


def test_meanshift_planted_blobs(rng):
    centers = [(0.2, 0.2), (0.8, 0.2), (0.5, 0.8)]
    pts, truth = planted_blobs(rng, centers)
    labels = meanshift(pts, 0.1)
    assert labels.max() + 1 == 3
    assert same_partition(labels, truth)


def test_meanshift_planted_recovery_many_seeds():
    centers = [(0.15, 0.2), (0.85, 0.25), (0.5, 0.85)]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pts, truth = planted_blobs(rng, centers, sigma=0.01, per_blob=15)
        labels = meanshift(pts, 0.1)
        assert same_partition(labels, truth), f"seed {seed}"


# ---------------------------------------------------------------------------
# 1D k-means
# ---------------------------------------------------------------------------

def test_kmeans_two_groups():
    labels = kmeans_1d([0.0, 0.1, 0.9, 1.0])
    assert labels.tolist() == [0, 0, 1, 1]


def test_kmeans_forced_pair():
    assert kmeans_1d([0.0, 1.0]).tolist() == [0, 1]


def test_kmeans_matches_exhaustive_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 60))
        vals = rng.uniform(0, 1, n).tolist()
        labels = kmeans_1d(vals)
        assert labels_cost(vals, labels) == pytest.approx(
            kmeans_1d_best_cost(vals), abs=1e-9)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=40))
@settings(max_examples=150, deadline=None)
def test_kmeans_optimal_property(vals):
    labels = kmeans_1d(vals)
    assert set(labels.tolist()) <= {0, 1}
    assert 0 in labels and 1 in labels
    assert labels_cost(vals, labels) <= kmeans_1d_best_cost(vals) + 1e-9


def test_kmeans_needs_two_values():
    with pytest.raises(ValueError):
        kmeans_1d([0.5])


# ---------------------------------------------------------------------------
# merge / split
# ---------------------------------------------------------------------------

def config_from_centers(centers, detections=None):
    boxes = detections or [DetectionBox(x, y, 0.05, 0.05) for x, y in centers]
    clusters = tuple(make_cluster([i], boxes) for i in range(len(boxes)))
    return ClusterConfig(clusters, tuple(boxes))


def test_select_merge_pair_unique_minimum():
    cfg = config_from_centers([(0.0, 0.0), (0.1, 0.0), (1.0, 1.0)])
    assert select_merge_pair(cfg) == (0, 1)


def test_select_merge_pair_tie_break():
    # pairwise-tied distances (0,1) and (0,2); lexicographic winner
    cfg = config_from_centers([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
    assert select_merge_pair(cfg) == (0, 1)


def test_select_merge_pair_matches_bruteforce(rng):
    for _ in range(20):
        centers = [(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
                   for _ in range(10)]
        cfg = config_from_centers(centers)
        best, best_d = None, np.inf
        for i in range(10):
            for j in range(i + 1, 10):
                d = np.hypot(centers[i][0] - centers[j][0],
                             centers[i][1] - centers[j][1])
                if d < best_d:
                    best, best_d = (i, j), d
        assert select_merge_pair(cfg) == best


def test_select_merge_pair_needs_two():
    cfg = config_from_centers([(0.5, 0.5)])
    with pytest.raises(ValueError, match="merge unavailable"):
        select_merge_pair(cfg)


def test_merge_two_singletons():
    cfg = config_from_centers([(0.0, 0.0), (1.0, 1.0)])
    merged = merge_clusters(cfg, 0, 1)
    assert merged.count == 1
    c = merged.clusters[0]
    assert (c.mu_x, c.mu_y, c.size) == (0.5, 0.5, 2)


def test_merge_conserves_members(rng):
    cfg = random_config(rng, 5)
    merged = merge_clusters(cfg, 1, 3)
    assert sum(c.size for c in merged.clusters) == len(cfg.detections)
    validate_partition(merged)


def test_merge_centroid_weighted_mean(rng):
    for _ in range(10):
        cfg = random_config(rng, 4)
        i, j = 0, 2
        a, b = cfg.clusters[i], cfg.clusters[j]
        merged = merge_clusters(cfg, i, j)
        c = merged.clusters[-1]
        # oracle: recompute from the raw member boxes
        members = sorted(a.members + b.members)
        xs = [cfg.detections[m].cx for m in members]
        ys = [cfg.detections[m].cy for m in members]
        assert c.mu_x == pytest.approx(sum(xs) / len(xs), abs=1e-12)
        assert c.mu_y == pytest.approx(sum(ys) / len(ys), abs=1e-12)
        ws = a.size + b.size
        assert c.mu_x == pytest.approx((a.mu_x * a.size + b.mu_x * b.size) / ws, abs=1e-9)


def test_merge_rejects_bad_indices(rng):
    cfg = random_config(rng, 3)
    with pytest.raises(ValueError):
        merge_clusters(cfg, 1, 1)
    with pytest.raises(ValueError):
        merge_clusters(cfg, 0, 7)


def test_split_along_x():
    boxes = [DetectionBox(x, 0.5, 0.05, 0.05) for x in (0.0, 0.05, 0.9, 0.95)]
    cfg = ClusterConfig((make_cluster([0, 1, 2, 3], boxes),), tuple(boxes))
    out = split_cluster(cfg, 0)
    assert out.count == 2
    assert out.clusters[0].members == (0, 1)
    assert out.clusters[1].members == (2, 3)


def test_split_forced_pair():
    boxes = [DetectionBox(0.2, 0.5, 0.05, 0.05), DetectionBox(0.8, 0.5, 0.05, 0.05)]
    cfg = ClusterConfig((make_cluster([0, 1], boxes),), tuple(boxes))
    out = split_cluster(cfg, 0)
    assert [c.size for c in out.clusters] == [1, 1]


def test_split_conserves_partition(rng):
    for _ in range(10):
        cfg = random_config(rng, 3, min_size=2, max_size=8)
        out = split_cluster(cfg, 1)
        assert out.count == cfg.count + 1
        assert sum(c.size for c in out.clusters) == len(cfg.detections)
        validate_partition(out)


def test_split_then_merge_restores_members(rng):
    cfg = random_config(rng, 2, min_size=3, max_size=8)
    out = split_cluster(cfg, 0)
    restored = merge_clusters(out, 0, out.count - 1)
    restored_sets = sorted(c.members for c in restored.clusters)
    original_sets = sorted(c.members for c in cfg.clusters)
    assert restored_sets == original_sets


def test_split_singleton_rejected(rng):
    cfg = config_from_centers([(0.5, 0.5), (0.2, 0.2)])
    with pytest.raises(ValueError, match="split unavailable"):
        split_cluster(cfg, 0)


def test_split_ties_go_to_y():
    # four points on a perfect square: var x == var y, split must use y
    boxes = [DetectionBox(c, r, 0.05, 0.05) for r in (0.2, 0.8) for c in (0.2, 0.8)]
    cfg = ClusterConfig((make_cluster([0, 1, 2, 3], boxes),), tuple(boxes))
    out = split_cluster(cfg, 0)
    assert out.clusters[0].members == (0, 1)
    assert out.clusters[1].members == (2, 3)


# ---------------------------------------------------------------------------
# initial clustering
# ---------------------------------------------------------------------------

def test_initial_clusters_planted_scene(rng):
    centers = [(0.2, 0.2), (0.8, 0.2), (0.5, 0.8)]
    pts, _ = planted_blobs(rng, centers, sigma=0.005, per_blob=10)
    boxes = tuple(DetectionBox(float(x), float(y), 0.02, 0.02) for x, y in pts)
    frame = Frame(1000, 1000, boxes)
    cfg = initial_clusters(frame, TransformParams(0.5), BandwidthSpec("fixed", 0.1))
    assert cfg.count == 3
    validate_partition(cfg)


def test_initial_clusters_empty_scene():
    with pytest.raises(ValueError, match="empty scene"):
        initial_clusters(Frame(100, 100, ()))
