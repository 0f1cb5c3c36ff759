"""Policy/critic networks, clipped-surrogate training, greedy inference,
and checkpoint persistence.

Both networks are plain two-hidden-layer MLPs (128 units, rectifier)
implemented directly in numpy with exact backpropagation; updates are the
plain gradient steps of the training algorithm (ascent on the clipped
surrogate for the policy, descent on the value MSE for the critic).
Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .clustering import BandwidthSpec, TransformParams
from .core import ClusterConfig, Frame
from .rl_env import (
    KEEP,
    ClusterEnv,
    RewardWeights,
    StepOutcome,
    n_actions,
    state_dim,
)


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or dimensionally incompatible checkpoints."""


@dataclass
class MlpParams:
    """Layer weights/biases of one MLP; weights[i] has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


@dataclass(frozen=True)
class Hyperparams:
    """Training knobs; defaults follow common clipped-surrogate practice."""

    gamma: float = 0.99
    clip_eps: float = 0.2
    lr_policy: float = 3e-4
    lr_critic: float = 1e-3
    batch_size: int = 64
    t_max: int = 30
    iterations: int = 50
    episodes_per_iter: int = 16
    epochs: int = 4
    entropy_coef: float = 0.01
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"discount {self.gamma} outside (0, 1)")
        if self.clip_eps <= 0.0:
            raise ValueError("clip parameter must be positive")
        for name in ("lr_policy", "lr_critic", "batch_size", "t_max",
                     "episodes_per_iter", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))


def init_mlp(rng: np.random.Generator, sizes) -> MlpParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _forward_cache(params: MlpParams, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    acts = [x]
    pre = []
    a = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if k == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Affine + rectifier composition; accepts one vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dim {batch.shape[1]} != expected {params.weights[0].shape[0]}")
    acts, _ = _forward_cache(params, batch)
    out = acts[-1]
    return out[0] if single else out


def _backward(params: MlpParams, acts, pre, dout):
    """Gradients of every weight/bias given dL/d(output)."""
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.biases)
    grad = dout
    for k in range(len(params.weights) - 1, -1, -1):
        dws[k] = acts[k].T @ grad
        dbs[k] = grad.sum(axis=0)
        if k > 0:
            grad = (grad @ params.weights[k].T) * (pre[k - 1] > 0.0)
    return dws, dbs


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities with invalid actions at -inf; rows sum to 1 over
    the valid set."""
    logits = np.asarray(logits, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("mask leaves no valid action")
    neg = np.where(mask, logits, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    shifted = neg - m
    lse = np.log(np.exp(np.where(mask, shifted, -np.inf)).sum(axis=-1, keepdims=True))
    return shifted - lse


def policy_sample(logits, mask, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an action from the masked softmax; never picks an invalid id."""
    logp = masked_log_softmax(logits, mask)
    p = np.exp(logp)
    p = p / p.sum()
    action = int(rng.choice(len(p), p=p))
    return action, float(logp[action])


def greedy_action(logits, mask) -> int:
    """Masked argmax; ties resolve to the lowest action id."""
    masked = np.where(np.asarray(mask, dtype=bool), logits, -np.inf)
    return int(np.argmax(masked))


def compute_returns_advantages(rewards, gamma: float, values):
    """Discounted returns by backward recursion and raw advantages G - V.

    Standardization is applied later, across a whole collection batch; the
    per-episode values returned here are untouched.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    g = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        g[t] = acc
    return g, g - values


def standardize_advantages(adv, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + eps)


@dataclass
class TrajectoryBatch:
    """Flat arrays of transitions ready for an update step."""

    states: np.ndarray      # (B, state_dim)
    actions: np.ndarray     # (B,) int
    old_logp: np.ndarray    # (B,) behavior-policy log-probs
    advantages: np.ndarray  # (B,) standardized
    returns: np.ndarray     # (B,)
    masks: np.ndarray       # (B, n_actions) bool

    def take(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.states[idx], self.actions[idx],
                               self.old_logp[idx], self.advantages[idx],
                               self.returns[idx], self.masks[idx])

    def __len__(self) -> int:
        return len(self.actions)


def _policy_objective_grad(policy: MlpParams, batch: TrajectoryBatch,
                           hyper: Hyperparams):
    """Clipped-surrogate value and its exact gradient (ascent direction).

    The reported surrogate excludes the entropy bonus; the gradient
    includes it.
    """
    b = len(batch)
    acts, pre = _forward_cache(policy, batch.states)
    logits = acts[-1]
    logp_all = masked_log_softmax(logits, batch.masks)
    p = np.exp(logp_all)
    # -inf log-probs of masked actions would poison products; zero them out
    safe_logp = np.where(batch.masks, logp_all, 0.0)
    rows = np.arange(b)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * adv
    l_clip = float(np.minimum(unclipped, clipped).mean())

    # gradient flows only where the unclipped branch is active
    active = (unclipped <= clipped).astype(float)
    dlogp = ratio * adv * active / b

    onehot = np.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - p)
    if hyper.entropy_coef > 0.0:
        entropy = -(p * safe_logp).sum(axis=1)
        dent = -p * (safe_logp + entropy[:, None])
        dlogits = dlogits + hyper.entropy_coef * dent / b
    dws, dbs = _backward(policy, acts, pre, dlogits)
    return l_clip, dws, dbs


def _critic_loss_grad(critic: MlpParams, batch: TrajectoryBatch):
    """Mean-squared value error and its exact gradient (descent direction)."""
    b = len(batch)
    acts, pre = _forward_cache(critic, batch.states)
    v = acts[-1][:, 0]
    err = v - batch.returns
    l_value = float((err ** 2).mean())
    dout = (2.0 * err / b)[:, None]
    dws, dbs = _backward(critic, acts, pre, dout)
    return l_value, dws, dbs


def ppo_update(policy: MlpParams, critic: MlpParams, batch: TrajectoryBatch,
               hyper: Hyperparams) -> tuple[MlpParams, MlpParams, float, float]:
    """One plain gradient step on each network over the given batch.

    Policy ascends the clipped surrogate (plus entropy bonus), critic
    descends the value MSE. Raises FloatingPointError on non-finite loss.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    l_clip, pdw, pdb = _policy_objective_grad(policy, batch, hyper)
    l_value, cdw, cdb = _critic_loss_grad(critic, batch)
    if not (np.isfinite(l_clip) and np.isfinite(l_value)):
        raise FloatingPointError(
            f"non-finite loss (clip={l_clip}, value={l_value}); update aborted")
    new_policy = MlpParams(
        [w + hyper.lr_policy * dw for w, dw in zip(policy.weights, pdw)],
        [b + hyper.lr_policy * db for b, db in zip(policy.biases, pdb)],
    )
    new_critic = MlpParams(
        [w - hyper.lr_critic * dw for w, dw in zip(critic.weights, cdw)],
        [b - hyper.lr_critic * db for b, db in zip(critic.biases, cdb)],
    )
    return new_policy, new_critic, l_clip, l_value


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    """Environment construction parameters shared across episodes."""

    weights: RewardWeights = RewardWeights()
    transform: TransformParams = TransformParams()
    bandwidth: BandwidthSpec = BandwidthSpec()
    n_pad: int = 30
    transformed_rewards: bool = True
    include_count: bool = True


@dataclass
class PolicyCheckpoint:
    """Trained (or freshly initialized) networks plus their context."""

    n_pad: int
    include_count: bool
    policy: MlpParams
    critic: MlpParams
    weights: RewardWeights
    hyper: Hyperparams
    meta: dict = field(default_factory=dict)
    version: int = 1

    @property
    def state_dim(self) -> int:
        return state_dim(self.n_pad)

    @property
    def n_actions(self) -> int:
        return n_actions(self.n_pad)


def make_env(frame: Frame, env_config: EnvConfig, t_max: int) -> ClusterEnv:
    return ClusterEnv(
        frame,
        weights=env_config.weights,
        transform=env_config.transform,
        bandwidth=env_config.bandwidth,
        n_pad=env_config.n_pad,
        t_max=t_max,
        transformed_rewards=env_config.transformed_rewards,
        include_count=env_config.include_count,
    )


def _collect_episode(env: ClusterEnv, policy: MlpParams, rng: np.random.Generator):
    states, actions, logps, rewards, masks = [], [], [], [], []
    s = env.reset()
    for _ in range(env.t_max):
        mask = env.mask()
        logits = mlp_forward(policy, s)
        a, logp = policy_sample(logits, mask, rng)
        out = env.step(a)
        states.append(s)
        actions.append(a)
        logps.append(logp)
        rewards.append(out.reward)
        masks.append(mask)
        s = out.state
    return states, actions, logps, rewards, masks, env.config.count


def sampler_from_spec(spec):
    """Turn a SceneSpec into a seed -> Frame sampler for training."""
    from .scene import generate_scene

    def sample(seed: int) -> Frame:
        return generate_scene(spec.with_seed(seed))

    return sample


def train(scene_sampler, env_config: EnvConfig, hyper: Hyperparams,
          log_path=None) -> PolicyCheckpoint:
    """Iterate exploration (fresh scenes, sampled actions) and optimization
    (minibatch clipped-surrogate / value-MSE steps); returns the final
    checkpoint. Fully deterministic for a fixed hyper.seed.
    """
    rng = np.random.default_rng(hyper.seed)
    dim = state_dim(env_config.n_pad)
    acts = n_actions(env_config.n_pad)
    policy = init_mlp(rng, [dim, *hyper.hidden, acts])
    critic = init_mlp(rng, [dim, *hyper.hidden, 1])
    log_rows = []
    mean_return = float("nan")
    for it in range(hyper.iterations):
        states, actions, logps, advantages, returns, masks = [], [], [], [], [], []
        ep_returns, finals = [], []
        for _ in range(hyper.episodes_per_iter):
            frame = scene_sampler(int(rng.integers(0, 2 ** 31 - 1)))
            env = make_env(frame, env_config, hyper.t_max)
            s, a, lp, r, m, n_final = _collect_episode(env, policy, rng)
            values = mlp_forward(critic, np.array(s))[:, 0]
            g, adv = compute_returns_advantages(r, hyper.gamma, values)
            states.extend(s)
            actions.extend(a)
            logps.extend(lp)
            advantages.extend(adv)
            returns.extend(g)
            masks.extend(m)
            ep_returns.append(float(np.sum(r)))
            finals.append(n_final)
        batch = TrajectoryBatch(
            states=np.array(states),
            actions=np.array(actions, dtype=int),
            old_logp=np.array(logps),
            advantages=standardize_advantages(np.array(advantages)),
            returns=np.array(returns),
            masks=np.array(masks, dtype=bool),
        )
        clip_losses, value_losses = [], []
        total = len(batch)
        for _ in range(hyper.epochs):
            perm = rng.permutation(total)
            for lo in range(0, total, hyper.batch_size):
                mb = batch.take(perm[lo:lo + hyper.batch_size])
                policy, critic, lc, lv = ppo_update(policy, critic, mb, hyper)
                clip_losses.append(lc)
                value_losses.append(lv)
        mean_return = float(np.mean(ep_returns))
        log_rows.append({
            "iteration": it,
            "mean_return": mean_return,
            "policy_loss": float(np.mean(clip_losses)),
            "value_loss": float(np.mean(value_losses)),
            "mean_N_final": float(np.mean(finals)),
        })
    if log_path is not None:
        log_path = str(log_path)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(log_path) or ".",
                                   suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=[
                "iteration", "mean_return", "policy_loss", "value_loss",
                "mean_N_final"])
            writer.writeheader()
            writer.writerows(log_rows)
        os.replace(tmp, log_path)
    return PolicyCheckpoint(
        n_pad=env_config.n_pad,
        include_count=env_config.include_count,
        policy=policy,
        critic=critic,
        weights=env_config.weights,
        hyper=hyper,
        meta={"iterations": hyper.iterations, "final_mean_return": mean_return},
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def greedy_policy(ckpt: PolicyCheckpoint):
    """Masked-argmax action chooser over the checkpoint's policy net."""

    def choose(state, mask, rng=None) -> int:
        return greedy_action(mlp_forward(ckpt.policy, state), mask)

    return choose


def keep_policy():
    def choose(state, mask, rng=None) -> int:
        return KEEP

    return choose


def random_policy():
    """Uniform over the currently valid actions; needs the caller's rng."""

    def choose(state, mask, rng) -> int:
        valid = np.flatnonzero(mask)
        return int(rng.choice(valid))

    return choose


def run_episode(env: ClusterEnv, policy_fn,
                rng: np.random.Generator | None = None,
                ) -> tuple[ClusterConfig, list[StepOutcome]]:
    """Roll one fixed-length episode; returns the final configuration and
    the per-step trace."""
    s = env.reset()
    trace = []
    for _ in range(env.t_max):
        out = env.step(policy_fn(s, env.mask(), rng))
        trace.append(out)
        s = out.state
    return env.config, trace


def infer_clusters(
    frame: Frame,
    ckpt: PolicyCheckpoint,
    transform: TransformParams | None = None,
    bandwidth: BandwidthSpec | None = None,
    t_max: int | None = None,
    n_pad: int | None = None,
    keep_streak_stop: int | None = None,
) -> ClusterConfig:
    """Greedy refinement: MeanShift reset, then exactly t_max masked-argmax
    steps. Deterministic.

    ``keep_streak_stop`` optionally ends the loop early once that many
    consecutive keeps occur; it is off by default so the loop always runs
    its full fixed length.
    """
    if n_pad is not None and n_pad != ckpt.n_pad:
        raise CheckpointError(
            f"checkpoint built for n_pad={ckpt.n_pad}, requested {n_pad}")
    env = ClusterEnv(
        frame,
        weights=ckpt.weights,
        transform=transform if transform is not None else TransformParams(),
        bandwidth=bandwidth if bandwidth is not None else BandwidthSpec(),
        n_pad=ckpt.n_pad,
        t_max=t_max if t_max is not None else ckpt.hyper.t_max,
        include_count=ckpt.include_count,
    )
    policy_fn = greedy_policy(ckpt)
    s = env.reset()
    streak = 0
    for _ in range(env.t_max):
        out = env.step(policy_fn(s, env.mask()))
        s = out.state
        streak = streak + 1 if out.info["action"] == KEEP else 0
        if keep_streak_stop is not None and streak >= keep_streak_stop:
            break
    return env.config


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------
#
#   bytes 0..10   magic "REPOSE-CKPT"
#   uint32 LE     format version
#   uint32 LE     header length in bytes
#   header        UTF-8 JSON: dims, weights, hyper, meta, array manifest
#   payload       row-major float64 LE arrays, in manifest order

CHECKPOINT_MAGIC = b"REPOSE-CKPT"
CHECKPOINT_VERSION = 1


def _array_manifest(ckpt: PolicyCheckpoint):
    arrays = []
    for net_name, net in (("policy", ckpt.policy), ("critic", ckpt.critic)):
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays.append((f"{net_name}.w{k}", w))
            arrays.append((f"{net_name}.b{k}", b))
    return arrays


def save_checkpoint(ckpt: PolicyCheckpoint, path) -> None:
    """Write the versioned, self-describing checkpoint container."""
    arrays = _array_manifest(ckpt)
    header = {
        "n_pad": ckpt.n_pad,
        "include_count": ckpt.include_count,
        "state_dim": ckpt.state_dim,
        "n_actions": ckpt.n_actions,
        "weights": asdict(ckpt.weights),
        "hyper": asdict(ckpt.hyper),
        "meta": ckpt.meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for _, a in arrays:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> PolicyCheckpoint:
    """Read and validate a checkpoint; any inconsistency raises CheckpointError."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated before header")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < off + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    off += hlen
    try:
        manifest = header["arrays"]
        n_pad = int(header["n_pad"])
        include_count = bool(header["include_count"])
        weights = RewardWeights(**header["weights"])
        hyper = Hyperparams(**header["hyper"])
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid header: {e}") from None
    arrays = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < off + nbytes:
            raise CheckpointError(f"checkpoint truncated inside array {name}")
        arrays[name] = np.frombuffer(
            data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError("trailing bytes after final array")

    def collect(net_name: str) -> MlpParams:
        ws, bs = [], []
        for k in range(len(manifest)):
            if f"{net_name}.w{k}" not in arrays:
                break
            ws.append(arrays[f"{net_name}.w{k}"])
            bs.append(arrays[f"{net_name}.b{k}"])
        if not ws:
            raise CheckpointError(f"no {net_name} arrays in checkpoint")
        return MlpParams(ws, bs)

    policy = collect("policy")
    critic = collect("critic")
    expected_dim = state_dim(n_pad)
    if policy.weights[0].shape[0] != expected_dim:
        raise CheckpointError(
            f"policy input dim {policy.weights[0].shape[0]} != "
            f"state dim {expected_dim} for n_pad={n_pad}")
    if policy.weights[-1].shape[1] != n_actions(n_pad):
        raise CheckpointError("policy output dim inconsistent with n_pad")
    if critic.weights[0].shape[0] != expected_dim or critic.weights[-1].shape[1] != 1:
        raise CheckpointError("critic dims inconsistent with header")
    return PolicyCheckpoint(
        n_pad=n_pad,
        include_count=include_count,
        policy=policy,
        critic=critic,
        weights=weights,
        hyper=hyper,
        meta=meta,
        version=version,
    )
