import math

import numpy as np
import pytest

from sceneplan.clustering import BandwidthSpec, TransformParams
from sceneplan.core import DetectionBox, Frame
from sceneplan.ppo import (
    CheckpointError,
    EnvConfig,
    Hyperparams,
    MlpParams,
    PolicyCheckpoint,
    TrajectoryBatch,
    compute_returns_advantages,
    greedy_action,
    infer_clusters,
    init_mlp,
    load_checkpoint,
    masked_log_softmax,
    mlp_forward,
    policy_sample,
    ppo_update,
    save_checkpoint,
    standardize_advantages,
    train,
)
from sceneplan.rl_env import RewardWeights, n_actions, reset, state_dim

from oracles import (
    finite_diff_grads,
    mlp_reference,
    returns_reference,
)


def tiny_hyper(**kw):
    base = dict(gamma=0.9, clip_eps=0.2, lr_policy=1e-3, lr_critic=1e-3,
                batch_size=8, t_max=4, iterations=2, episodes_per_iter=2,
                epochs=1, entropy_coef=0.01, hidden=(8, 8), seed=0)
    base.update(kw)
    return Hyperparams(**base)


def small_frame(rng, n=12):
    boxes = tuple(DetectionBox(float(x), float(y), 0.03, 0.03)
                  for x, y in rng.uniform(0.1, 0.9, (n, 2)))
    return Frame(640, 640, boxes)


def tiny_env_config():
    return EnvConfig(
        weights=RewardWeights(alpha=5, beta=1, gamma=10, delta=2,
                              n_min=2, n_max=3, d_m=0.05),
        transform=TransformParams(0.5),
        bandwidth=BandwidthSpec("fixed", 0.2),
        n_pad=4,
    )


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_forward_zero_params_zero_output():
    params = MlpParams(
        [np.zeros((3, 4)), np.zeros((4, 2))],
        [np.zeros(4), np.zeros(2)])
    assert (mlp_forward(params, np.ones(3)) == 0).all()


def test_forward_single_layer_hand_computed():
    params = MlpParams([np.array([[1.0, -2.0], [0.5, 3.0]])],
                       [np.array([0.1, -0.2])])
    out = mlp_forward(params, np.array([2.0, 1.0]))
    # output layer is affine, no rectifier: [2+0.5+0.1, -4+3-0.2]
    assert out == pytest.approx([2.6, -1.2])


def test_forward_matches_reference(rng):
    params = init_mlp(rng, [5, 16, 16, 3])
    for _ in range(10):
        x = rng.normal(size=5)
        assert mlp_forward(params, x) == pytest.approx(
            mlp_reference(params, x), abs=1e-6)


def test_forward_batch_shape(rng):
    params = init_mlp(rng, [5, 8, 2])
    out = mlp_forward(params, rng.normal(size=(7, 5)))
    assert out.shape == (7, 2)


def test_forward_dim_mismatch(rng):
    params = init_mlp(rng, [5, 8, 2])
    with pytest.raises(ValueError):
        mlp_forward(params, np.ones(4))


# ---------------------------------------------------------------------------
# masked sampling
# ---------------------------------------------------------------------------

def test_sample_single_valid_action(rng):
    logits = np.array([5.0, -1.0, 3.0])
    mask = np.array([False, True, False])
    action, logp = policy_sample(logits, mask, rng)
    assert action == 1 and logp == 0.0


def test_sample_uniform_frequencies():
    rng = np.random.default_rng(7)
    logits = np.zeros(6)
    mask = np.array([True, True, True, True, False, False])
    n = 100_000
    counts = np.zeros(6)
    for _ in range(n):
        a, _ = policy_sample(logits, mask, rng)
        counts[a] += 1
    freqs = counts / n
    sigma = math.sqrt(0.25 * 0.75 / n)
    for k in range(4):
        assert abs(freqs[k] - 0.25) < 3 * sigma + 1e-12
    assert counts[4] == 0 and counts[5] == 0


def test_sample_never_masked(rng):
    logits = np.array([0.0, 100.0, 0.0])
    mask = np.array([True, False, True])
    for _ in range(1000):
        a, _ = policy_sample(logits, mask, rng)
        assert a != 1


def test_masked_probabilities_sum_to_one(rng):
    for _ in range(20):
        logits = rng.normal(size=8) * 3
        mask = rng.random(8) < 0.6
        mask[0] = True
        logp = masked_log_softmax(logits, mask)
        p = np.exp(logp)
        assert p[~mask].sum() == 0.0
        assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_all_masked_rejected(rng):
    with pytest.raises(ValueError):
        masked_log_softmax(np.zeros(3), np.zeros(3, dtype=bool))


def test_greedy_tie_break_lowest_id():
    logits = np.array([1.0, 1.0, 1.0])
    mask = np.array([True, True, True])
    assert greedy_action(logits, mask) == 0
    assert greedy_action(logits, np.array([False, True, True])) == 1


# ---------------------------------------------------------------------------
# returns / advantages
# ---------------------------------------------------------------------------

def test_returns_single_step():
    g, a = compute_returns_advantages([-5.0], 0.9, [2.0])
    assert g.tolist() == [-5.0]
    assert a.tolist() == [-7.0]


def test_returns_geometric():
    g, _ = compute_returns_advantages([-1.0, -1.0, -1.0], 0.5, [0.0, 0.0, 0.0])
    assert g == pytest.approx([-1.75, -1.5, -1.0])


def test_returns_match_forward_sum_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 30))
        rewards = rng.normal(size=n)
        g, adv = compute_returns_advantages(rewards, 0.93, np.zeros(n))
        assert g == pytest.approx(returns_reference(rewards, 0.93), abs=1e-9)
        assert adv == pytest.approx(g)


def test_standardize():
    adv = standardize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)
    assert adv.std() == pytest.approx(1.0, rel=1e-6)


# ---------------------------------------------------------------------------
# update step
# ---------------------------------------------------------------------------

def make_batch(rng, policy, n=12, n_act=4, ratio=None, adv=None):
    """A consistent batch; old_logp comes from the policy itself unless a
    target ratio is forced."""
    dim = policy.weights[0].shape[0]
    states = rng.normal(size=(n, dim))
    masks = np.ones((n, n_act), dtype=bool)
    masks[:, -1] = rng.random(n) < 0.5
    logits = mlp_forward(policy, states)
    actions = []
    logps = []
    for k in range(n):
        a, lp = policy_sample(logits[k], masks[k], rng)
        actions.append(a)
        logps.append(lp)
    old_logp = np.array(logps)
    if ratio is not None:
        old_logp = old_logp - math.log(ratio)
    advantages = adv if adv is not None else rng.normal(size=n)
    return TrajectoryBatch(states, np.array(actions), old_logp,
                           np.asarray(advantages, dtype=float),
                           rng.normal(size=n), masks)


def test_update_identity_ratio_surrogate(rng):
    policy = init_mlp(rng, [6, 8, 8, 4])
    critic = init_mlp(rng, [6, 8, 8, 1])
    batch = make_batch(rng, policy)
    _, _, l_clip, _ = ppo_update(policy, critic, batch, tiny_hyper())
    assert l_clip == pytest.approx(float(batch.advantages.mean()), abs=1e-12)


def test_update_clip_region_flat(rng):
    # beyond the clip boundary the per-sample objective stops moving with r
    policy = init_mlp(rng, [6, 8, 8, 4])
    critic = init_mlp(rng, [6, 8, 8, 1])
    hyper = tiny_hyper(entropy_coef=0.0)
    pos = [ppo_update(policy, critic,
                      make_batch(np.random.default_rng(3), policy, ratio=r,
                                 adv=np.ones(12)), hyper)[2]
           for r in (1.3, 1.7, 2.5)]
    assert pos[0] == pytest.approx(1.2, abs=1e-9)
    assert pos[0] == pytest.approx(pos[1], abs=1e-12)
    assert pos[1] == pytest.approx(pos[2], abs=1e-12)
    neg = [ppo_update(policy, critic,
                      make_batch(np.random.default_rng(4), policy, ratio=r,
                                 adv=-np.ones(12)), hyper)[2]
           for r in (0.7, 0.4, 0.1)]
    assert neg[0] == pytest.approx(-0.8, abs=1e-9)
    assert neg[0] == pytest.approx(neg[1], abs=1e-12)
    assert neg[1] == pytest.approx(neg[2], abs=1e-12)


def test_update_inside_clip_region_tracks_ratio(rng):
    policy = init_mlp(rng, [6, 8, 8, 4])
    critic = init_mlp(rng, [6, 8, 8, 1])
    hyper = tiny_hyper(entropy_coef=0.0)
    r = 1.1
    batch = make_batch(np.random.default_rng(5), policy, ratio=r, adv=np.ones(12))
    _, _, l_clip, _ = ppo_update(policy, critic, batch, hyper)
    assert l_clip == pytest.approx(r, rel=1e-9)


def test_update_rejects_empty(rng):
    policy = init_mlp(rng, [6, 8, 4])
    critic = init_mlp(rng, [6, 8, 1])
    empty = TrajectoryBatch(np.zeros((0, 6)), np.zeros(0, dtype=int),
                            np.zeros(0), np.zeros(0), np.zeros(0),
                            np.zeros((0, 4), dtype=bool))
    with pytest.raises(ValueError):
        ppo_update(policy, critic, empty, tiny_hyper())


def test_update_aborts_on_nonfinite(rng):
    policy = init_mlp(rng, [6, 8, 4])
    critic = init_mlp(rng, [6, 8, 1])
    batch = make_batch(rng, policy, n_act=4)
    batch.advantages[0] = np.nan
    with pytest.raises(FloatingPointError):
        ppo_update(policy, critic, batch, tiny_hyper())


# ---------------------------------------------------------------------------
# gradient checks (finite-difference oracle)
# ---------------------------------------------------------------------------

def surrogate_loss_fn(batch, hyper):
    """From-scratch clipped surrogate + entropy, for finite differencing."""

    def loss(params):
        total = 0.0
        for k in range(len(batch)):
            out = mlp_reference(params, batch.states[k])
            valid = batch.masks[k]
            z = np.where(valid, out, -np.inf)
            m = z[valid].max()
            logsum = m + math.log(np.exp(z[valid] - m).sum())
            logp = z - logsum
            r = math.exp(logp[batch.actions[k]] - batch.old_logp[k])
            a = batch.advantages[k]
            obj = min(r * a, min(max(r, 1 - hyper.clip_eps), 1 + hyper.clip_eps) * a)
            ent = -sum(math.exp(lp) * lp for lp, v in zip(logp, valid) if v)
            total += obj + hyper.entropy_coef * ent
        return total / len(batch)

    return loss


def value_loss_fn(batch):
    def loss(params):
        total = 0.0
        for k in range(len(batch)):
            v = mlp_reference(params, batch.states[k])[0]
            total += (v - batch.returns[k]) ** 2
        return total / len(batch)

    return loss


def relative_errors(analytic, fd):
    errs = []
    for a_arr, f_arr in zip(analytic, fd):
        denom = np.maximum(np.abs(a_arr) + np.abs(f_arr), 1e-8)
        errs.append(np.abs(a_arr - f_arr) / denom)
    return max(float(e.max()) for e in errs)


def assert_no_kink_inputs(params, states):
    from sceneplan.ppo import _forward_cache

    _, pre = _forward_cache(params, states)
    for z in pre[:-1]:
        assert np.abs(z).min() > 1e-6, "pre-activation too close to rectifier kink"


def test_policy_gradient_matches_finite_differences(rng):
    from sceneplan.ppo import _policy_objective_grad

    hyper = tiny_hyper(entropy_coef=0.01)
    policy = init_mlp(rng, [5, 6, 6, 4])
    behavior = init_mlp(np.random.default_rng(99), [5, 6, 6, 4])
    batch = make_batch(rng, behavior, n=5, n_act=4)
    assert_no_kink_inputs(policy, batch.states)
    _, dws, dbs = _policy_objective_grad(policy, batch, hyper)
    fd_ws, fd_bs = finite_diff_grads(policy, surrogate_loss_fn(batch, hyper))
    assert relative_errors(dws, fd_ws) < 1e-4
    assert relative_errors(dbs, fd_bs) < 1e-4


def test_critic_gradient_matches_finite_differences(rng):
    from sceneplan.ppo import _critic_loss_grad

    critic = init_mlp(rng, [5, 6, 6, 1])
    batch = make_batch(rng, init_mlp(rng, [5, 6, 6, 4]), n=5, n_act=4)
    assert_no_kink_inputs(critic, batch.states)
    _, dws, dbs = _critic_loss_grad(critic, batch)
    fd_ws, fd_bs = finite_diff_grads(critic, value_loss_fn(batch))
    assert relative_errors(dws, fd_ws) < 1e-4
    assert relative_errors(dbs, fd_bs) < 1e-4


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def scene_sampler(seed):
    return small_frame(np.random.default_rng(seed % 50))


def test_train_zero_iterations_returns_init():
    ckpt = train(scene_sampler, tiny_env_config(), tiny_hyper(iterations=0))
    assert ckpt.meta["iterations"] == 0
    assert math.isnan(ckpt.meta["final_mean_return"])
    assert ckpt.n_pad == 4
    assert ckpt.policy.weights[0].shape == (state_dim(4), 8)


def test_train_deterministic():
    a = train(scene_sampler, tiny_env_config(), tiny_hyper(iterations=2))
    b = train(scene_sampler, tiny_env_config(), tiny_hyper(iterations=2))
    for wa, wb in zip(a.policy.weights + a.critic.weights,
                      b.policy.weights + b.critic.weights):
        assert (wa == wb).all()
    assert a.meta == b.meta


def test_train_writes_log(tmp_path):
    log = tmp_path / "log.csv"
    train(scene_sampler, tiny_env_config(), tiny_hyper(iterations=3), log_path=log)
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "iteration,mean_return,policy_loss,value_loss,mean_N_final"
    assert len(lines) == 4


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def make_ckpt(rng, n_pad=4):
    return PolicyCheckpoint(
        n_pad=n_pad,
        include_count=True,
        policy=init_mlp(rng, [state_dim(n_pad), 8, 8, n_actions(n_pad)]),
        critic=init_mlp(rng, [state_dim(n_pad), 8, 8, 1]),
        weights=RewardWeights(alpha=5, beta=1, gamma=10, delta=2,
                              n_min=2, n_max=3, d_m=0.05),
        hyper=tiny_hyper(),
        meta={"iterations": 0, "final_mean_return": -1.5},
    )


def test_checkpoint_roundtrip_bitexact(tmp_path, rng):
    ckpt = make_ckpt(rng)
    path = tmp_path / "p.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.n_pad == ckpt.n_pad
    assert back.weights == ckpt.weights
    assert back.hyper == ckpt.hyper
    assert back.meta == ckpt.meta
    for a, b in zip(ckpt.policy.weights + ckpt.policy.biases +
                    ckpt.critic.weights + ckpt.critic.biases,
                    back.policy.weights + back.policy.biases +
                    back.critic.weights + back.critic.biases):
        assert a.shape == b.shape
        assert (a == b).all()


def test_checkpoint_truncated_rejected(tmp_path, rng):
    path = tmp_path / "p.ckpt"
    save_checkpoint(make_ckpt(rng), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 17])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_rejected(tmp_path, rng):
    path = tmp_path / "p.ckpt"
    save_checkpoint(make_ckpt(rng), path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version_rejected(tmp_path, rng):
    path = tmp_path / "p.ckpt"
    save_checkpoint(make_ckpt(rng), path)
    blob = bytearray(path.read_bytes())
    blob[11] = 99  # version field
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_infer_rejects_mismatched_n_pad(tmp_path, rng):
    ckpt = make_ckpt(rng, n_pad=4)
    frame = small_frame(rng)
    with pytest.raises(CheckpointError, match="n_pad"):
        infer_clusters(frame, ckpt, n_pad=8)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_infer_keep_preferring_policy_is_meanshift(rng):
    # zero logits everywhere: greedy tie-break picks keep each step
    n_pad = 4
    zero = MlpParams(
        [np.zeros((state_dim(n_pad), 8)), np.zeros((8, n_actions(n_pad)))],
        [np.zeros(8), np.zeros(n_actions(n_pad))])
    ckpt = make_ckpt(rng, n_pad=n_pad)
    ckpt.policy = zero
    frame = small_frame(rng)
    transform = TransformParams(0.5)
    bandwidth = BandwidthSpec("fixed", 0.2)
    out = infer_clusters(frame, ckpt, transform, bandwidth, t_max=6)
    assert out == reset(frame, transform, bandwidth)


def test_infer_single_cluster_scene_safe(rng):
    frame = Frame(100, 100, (DetectionBox(0.5, 0.5, 0.05, 0.05),))
    ckpt = make_ckpt(rng)
    out = infer_clusters(frame, ckpt, t_max=5)
    assert out.count == 1
    assert out.clusters[0].members == (0,)


def test_infer_deterministic(rng):
    ckpt = make_ckpt(rng)
    frame = small_frame(rng)
    a = infer_clusters(frame, ckpt, t_max=5)
    b = infer_clusters(frame, ckpt, t_max=5)
    assert a == b
