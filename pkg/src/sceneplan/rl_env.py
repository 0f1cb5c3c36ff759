"""Cluster-refinement environment: state encoding, keep/merge/split actions,
and the composite clustering-quality reward.

Action ids are fixed-size regardless of the live cluster count N:
0 = keep, 1 = merge the closest centroid pair, 2 + i = split cluster i.
Invalid (masked) actions degrade to keep so episodes always run their full
length; sampling-time masking makes that a safety net rather than the rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    BandwidthSpec,
    TransformParams,
    initial_clusters,
    merge_clusters,
    select_merge_pair,
    split_cluster,
    transform_y,
)
from .core import ClusterConfig, Frame

KEEP, MERGE = 0, 1
SPLIT_BASE = 2
FEATURES_PER_CLUSTER = 5


@dataclass(frozen=True)
class RewardWeights:
    """Weights and bounds of the four reward components.

    alpha scales cluster tightness, beta the object-area variance, gamma
    the cluster-count band penalty, delta the close-centroid penalty.
    """

    alpha: float = 50.0
    beta: float = 1.0
    gamma: float = 1_000_000.0
    delta: float = 5.0
    n_min: int = 10
    n_max: int = 15
    d_m: float = 0.03

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0.0:
            raise ValueError("reward weights must be nonnegative")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError(f"cluster-count band [{self.n_min}, {self.n_max}] invalid")
        if self.d_m <= 0.0:
            raise ValueError("d_m must be positive")


def state_dim(n_pad: int) -> int:
    return FEATURES_PER_CLUSTER * n_pad + 1


def n_actions(n_pad: int) -> int:
    return SPLIT_BASE + n_pad


def encode_state(config: ClusterConfig, n_pad: int, total_detections: int,
                 include_count: bool = True) -> np.ndarray:
    """Flatten the configuration into a fixed-length feature vector.

    One (mu_x, mu_y, mu_w, mu_h, S_i / total) slot per cluster in index
    order, zero-padded (or truncated) to n_pad slots, then the normalized
    cluster count N / n_pad clipped to 1 (zeroed if ``include_count`` is
    off; the vector length never changes).
    """
    if n_pad < 1:
        raise ValueError("n_pad must be >= 1")
    s = np.zeros(state_dim(n_pad))
    for slot, c in enumerate(config.clusters[:n_pad]):
        base = slot * FEATURES_PER_CLUSTER
        s[base:base + FEATURES_PER_CLUSTER] = (
            c.mu_x, c.mu_y, c.mu_w, c.mu_h,
            c.size / total_detections if total_detections else 0.0,
        )
    if include_count:
        s[-1] = min(config.count / n_pad, 1.0)
    return s


def action_mask(config: ClusterConfig, n_pad: int) -> np.ndarray:
    """Validity per action id: keep always, merge iff N >= 2, split i iff
    cluster i exists and has at least 2 members."""
    mask = np.zeros(n_actions(n_pad), dtype=bool)
    mask[KEEP] = True
    mask[MERGE] = config.count >= 2
    for i, c in enumerate(config.clusters[:n_pad]):
        mask[SPLIT_BASE + i] = c.size >= 2
    return mask


def reward(config: ClusterConfig, weights: RewardWeights,
           transform: TransformParams | None = None,
           ) -> tuple[float, float, float, float, float]:
    """(R1, R2, R3, R4, R_total) for a configuration.

    R1: minus the mean over clusters of the mean member-center distance to
        the cluster centroid. Distances live in (x, y_t) space when a
        transform is given, matching the clustering geometry.
    R2: minus the mean over clusters of the population variance of member
        box areas (normalized w*h).
    R3: minus the distance of N to the [n_min, n_max] band (0 inside).
    R4: minus the number of unordered centroid pairs closer than d_m.
    R_total = alpha*R1 + beta*R2 + gamma*R3 + delta*R4.
    """
    dets = config.detections
    spreads = []
    area_vars = []
    centroids = []
    for c in config.clusters:
        pts = np.array([[dets[i].cx, dets[i].cy] for i in c.members])
        if transform is not None:
            pts = transform_y(pts, transform)
        centroid = pts.mean(axis=0)
        centroids.append(centroid)
        spreads.append(float(np.linalg.norm(pts - centroid, axis=1).mean()))
        areas = np.array([dets[i].area for i in c.members])
        area_vars.append(float(areas.var()))
    # fsum keeps the cross-cluster means insensitive to cluster order, so
    # reversing a split restores the reward bit for bit
    r1 = -math.fsum(spreads) / config.count
    r2 = -math.fsum(area_vars) / config.count
    n = config.count
    if n < weights.n_min:
        r3 = -float(weights.n_min - n)
    elif n > weights.n_max:
        r3 = -float(n - weights.n_max)
    else:
        r3 = 0.0
    close = 0
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(centroids[i] - centroids[j]) < weights.d_m:
                close += 1
    r4 = -float(close)
    total = weights.alpha * r1 + weights.beta * r2 + weights.gamma * r3 + weights.delta * r4
    return r1, r2, r3, r4, total


def apply_action(config: ClusterConfig, action: int,
                 transform: TransformParams | None = None,
                 ) -> tuple[ClusterConfig, bool, str]:
    """Apply an action id; invalid ones degrade to keep.

    Returns (next config, whether the action was valid, what ran).
    """
    if action == KEEP:
        return config, True, "keep"
    if action == MERGE:
        if config.count < 2:
            return config, False, "keep"
        i, j = select_merge_pair(config, transform)
        return merge_clusters(config, i, j), True, "merge"
    idx = action - SPLIT_BASE
    if 0 <= idx < config.count and config.clusters[idx].size >= 2:
        return split_cluster(config, idx, transform), True, "split"
    return config, False, "keep"


@dataclass
class StepOutcome:
    """Everything observable after one environment step."""

    config: ClusterConfig
    state: np.ndarray
    reward: float
    components: tuple[float, float, float, float]
    done: bool
    info: dict = field(default_factory=dict)


def step(config: ClusterConfig, action: int, weights: RewardWeights,
         n_pad: int, total_detections: int,
         transform: TransformParams | None = None,
         include_count: bool = True) -> StepOutcome:
    """One transition: apply the action, then score the new configuration.

    The reward is always computed on the post-action configuration. The
    ``done`` flag is left False here; episode length is the caller's
    business (see ClusterEnv).
    """
    if not (0 <= action < n_actions(n_pad)):
        raise ValueError(f"action {action} out of range")
    nxt, valid, applied = apply_action(config, action, transform)
    r1, r2, r3, r4, total = reward(nxt, weights, transform)
    return StepOutcome(
        config=nxt,
        state=encode_state(nxt, n_pad, total_detections, include_count),
        reward=total,
        components=(r1, r2, r3, r4),
        done=False,
        info={"action": action, "action_valid": valid, "applied": applied,
              "n": nxt.count},
    )


def reset(frame: Frame, transform: TransformParams = TransformParams(),
          bandwidth: BandwidthSpec = BandwidthSpec()) -> ClusterConfig:
    """Initial configuration: MeanShift over transformed object centers."""
    return initial_clusters(frame, transform, bandwidth)


class ClusterEnv:
    """Stateful wrapper bundling the pure functions into a gym-style loop.

    One instance per worker; instances share nothing. Episodes run exactly
    t_max steps (Algorithm-style fixed horizon), after which ``done`` turns
    True.
    """

    def __init__(
        self,
        frame: Frame,
        weights: RewardWeights = RewardWeights(),
        transform: TransformParams = TransformParams(),
        bandwidth: BandwidthSpec = BandwidthSpec(),
        n_pad: int = 30,
        t_max: int = 30,
        transformed_rewards: bool = True,
        include_count: bool = True,
    ):
        self.frame = frame
        self.weights = weights
        self.transform = transform
        self.bandwidth = bandwidth
        self.n_pad = n_pad
        self.t_max = t_max
        self.include_count = include_count
        # reward/merge/split geometry follows the clustering space unless
        # raw-y mode is requested
        self.geometry = transform if transformed_rewards else None
        self.config: ClusterConfig | None = None
        self.t = 0

    @property
    def total_detections(self) -> int:
        return len(self.frame.detections)

    def reset(self) -> np.ndarray:
        self.config = reset(self.frame, self.transform, self.bandwidth)
        self.t = 0
        return encode_state(self.config, self.n_pad, self.total_detections,
                            self.include_count)

    def mask(self) -> np.ndarray:
        if self.config is None:
            raise RuntimeError("reset() before mask()")
        return action_mask(self.config, self.n_pad)

    def step(self, action: int) -> StepOutcome:
        if self.config is None:
            raise RuntimeError("reset() before step()")
        out = step(self.config, action, self.weights, self.n_pad,
                   self.total_detections, self.geometry, self.include_count)
        self.config = out.config
        self.t += 1
        out.done = self.t >= self.t_max
        out.info["t"] = self.t
        return out
