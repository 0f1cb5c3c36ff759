"""Command-line surface: gen-scene, train, partition, plan, pipeline, eval.

A single JSON config file can drive every command; command-line flags
override file values, which override built-in defaults. All outputs are
deterministic under a fixed seed and written atomically (temp + rename).

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/validation,
3 infeasible plan.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile

import numpy as np

from .clustering import BandwidthSpec, TransformParams
from .core import Frame
from .offload import (
    InfeasiblePlanError,
    PartitionDescriptor,
    assign_servers,
    default_profiles,
    dp_plan,
    load_profiles,
    partitions_from_config,
    simulate,
)
from .ppo import (
    CheckpointError,
    EnvConfig,
    Hyperparams,
    greedy_policy,
    keep_policy,
    load_checkpoint,
    make_env,
    random_policy,
    run_episode,
    sampler_from_spec,
    save_checkpoint,
    train,
)
from .rl_env import RewardWeights
from .scene import (
    coarse_detect,
    generate_scene,
    load_detections,
    save_detections,
    scene_spec_from_dict,
    load_scene_spec,
)

DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "scene_spec": None,
    "detections": None,
    "profile": None,
    "checkpoint": None,
    "n": 1,
    "e": 4,
    "t_max": 30,
    "n_pad": 30,
    "d_max": 2000,
    "transform_alpha": 0.5,
    "bandwidth_mode": "quantile",
    "bandwidth_value": 0.2,
    "nms_iou": 0.5,
    "block_margin": 0.0,
    "min_visible": 0.25,
    "drop_prob": 0.0,
    "jitter_sigma": 0.0,
    "num_scenes": 1,
    "episodes": 100,
    "policy": "trained",
    "reward": {
        "alpha": 50.0, "beta": 1.0, "gamma": 1000000.0, "delta": 5.0,
        "n_min": 10, "n_max": 15, "d_m": 0.03,
    },
    "train": {
        "gamma": 0.99, "clip_eps": 0.2, "lr_policy": 3e-4, "lr_critic": 1e-3,
        "batch_size": 64, "iterations": 50, "episodes_per_iter": 16,
        "epochs": 4, "entropy_coef": 0.01,
    },
}


def load_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
        for key, value in user.items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(cfg[key], dict) and isinstance(value, dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    """Command-line flags beat config-file values."""
    direct = ["seed", "out_dir", "detections", "checkpoint", "profile",
              "d_max", "t_max", "n_pad", "num_scenes", "episodes", "policy",
              "iterations", "n", "e"]
    for name in direct:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "iterations":
            cfg["train"]["iterations"] = value
        else:
            cfg[name] = value
    if getattr(args, "scene_spec", None) is not None:
        cfg["scene_spec"] = args.scene_spec
    return cfg


def _weights(cfg: dict) -> RewardWeights:
    return RewardWeights(**cfg["reward"])


def _transform(cfg: dict) -> TransformParams:
    return TransformParams(cfg["transform_alpha"])


def _bandwidth(cfg: dict) -> BandwidthSpec:
    return BandwidthSpec(cfg["bandwidth_mode"], cfg["bandwidth_value"])


def _hyper(cfg: dict) -> Hyperparams:
    return Hyperparams(seed=cfg["seed"], t_max=cfg["t_max"], **cfg["train"])


def _env_config(cfg: dict) -> EnvConfig:
    return EnvConfig(weights=_weights(cfg), transform=_transform(cfg),
                     bandwidth=_bandwidth(cfg), n_pad=cfg["n_pad"])


def _scene_spec(cfg: dict):
    raw = cfg["scene_spec"]
    if raw is None:
        raise ValueError("no scene spec configured (scene_spec)")
    if isinstance(raw, str):
        return load_scene_spec(raw)
    return scene_spec_from_dict(raw)


def _profiles(cfg: dict):
    if cfg["profile"] is None:
        return default_profiles()
    return load_profiles(cfg["profile"])


def write_text(path, text: str) -> None:
    path = str(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, fieldnames, rows) -> None:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    writer.writerows(rows)
    write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# pipeline pieces shared by partition / pipeline / eval
# ---------------------------------------------------------------------------

def _policy_fn(cfg: dict, n_pad_hint: int):
    """Resolve the policy mode; returns (policy_fn, n_pad, t_max, weights)."""
    mode = cfg["policy"]
    if mode == "trained":
        if cfg["checkpoint"] is None:
            raise ValueError("trained policy requested but no checkpoint configured")
        ckpt = load_checkpoint(cfg["checkpoint"])
        return greedy_policy(ckpt), ckpt.n_pad, ckpt.weights
    if mode == "keep":
        return keep_policy(), n_pad_hint, _weights(cfg)
    if mode == "random":
        return random_policy(), n_pad_hint, _weights(cfg)
    raise ValueError(f"unknown policy mode {mode!r}")


def _partition_frame(frame: Frame, cfg: dict, scene_seed: int) -> dict:
    """Coarse-detect, refine clusters with the configured policy, and build
    the clusters report for one frame."""
    if len(frame.detections) == 0:
        raise ValueError("empty scene")
    coarse = coarse_detect(
        frame, cfg["n"], cfg["e"],
        iou_threshold=cfg["nms_iou"], min_visible=cfg["min_visible"],
        drop_prob=cfg["drop_prob"], jitter_sigma=cfg["jitter_sigma"],
        seed=scene_seed,
    )
    if len(coarse.detections) == 0:
        raise ValueError("empty scene after coarse detection")
    policy_fn, n_pad, weights = _policy_fn(cfg, cfg["n_pad"])
    env = make_env(coarse, EnvConfig(weights=weights, transform=_transform(cfg),
                                     bandwidth=_bandwidth(cfg), n_pad=n_pad),
                   cfg["t_max"])
    rng = np.random.default_rng(scene_seed + 1)
    final, trace = run_episode(env, policy_fn, rng)
    from .core import bounding_block

    clusters = []
    for cid, cluster in enumerate(final.clusters):
        x0, y0, x1, y1 = bounding_block(cluster, final.detections,
                                        cfg["block_margin"], coarse)
        areas = [final.detections[i].w * coarse.width_px *
                 final.detections[i].h * coarse.height_px
                 for i in cluster.members]
        clusters.append({
            "id": cid,
            "members": list(cluster.members),
            "size": cluster.size,
            "centroid": [cluster.mu_x, cluster.mu_y],
            "mean_wh": [cluster.mu_w, cluster.mu_h],
            "block_px": [x0, y0, x1, y1],
            "member_areas_px2": areas,
        })
    return {
        "scene_seed": scene_seed,
        "width_px": coarse.width_px,
        "height_px": coarse.height_px,
        "coarse_detections": len(coarse.detections),
        "t_max": cfg["t_max"],
        "n_final": final.count,
        "trace": [
            {"step": t + 1, "action": out.info["action"],
             "applied": out.info["applied"], "valid": out.info["action_valid"],
             "n": out.info["n"], "reward": out.reward,
             "components": list(out.components)}
            for t, out in enumerate(trace)
        ],
        "clusters": clusters,
    }


def load_clusters(path) -> tuple[dict, list[PartitionDescriptor]]:
    """Re-read a clusters report and rebuild its partition descriptors."""
    with open(path, "r", encoding="utf-8") as f:
        report = json.load(f)
    parts = []
    for c in report["clusters"]:
        x0, y0, x1, y1 = c["block_px"]
        parts.append(PartitionDescriptor(
            int(c["id"]), int(x1 - x0), int(y1 - y0),
            tuple(float(a) for a in c["member_areas_px2"])))
    return report, parts


def _plan_payload(parts, profiles, d_max: int, e: int) -> dict:
    plan = dp_plan(parts, profiles, d_max)
    schedule = assign_servers(plan, e)
    metrics = simulate(schedule)
    return {
        "assignments": {str(pid): model for pid, model, _, _ in plan.assignments},
        "total_precision": plan.total_precision,
        "total_latency_ms": plan.total_latency_ms,
        "opt_t_ms": plan.opt_t,
        "makespan_ms": metrics.makespan_ms,
        "servers": [
            {
                "server": lane_id,
                "busy_ms": metrics.busy_ms[lane_id],
                "utilization": metrics.utilization[lane_id],
                "tasks": [
                    {"partition": t.partition_id, "model": t.model,
                     "latency_ms": t.latency_ms, "start_ms": t.start_ms,
                     "end_ms": t.end_ms}
                    for t in lane
                ],
            }
            for lane_id, lane in enumerate(schedule.lanes)
        ],
    }


def load_plan(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        plan = json.load(f)
    for key in ("assignments", "total_precision", "total_latency_ms",
                "makespan_ms", "servers"):
        if key not in plan:
            raise ValueError(f"{path}: plan missing key {key!r}")
    return plan


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    frame = generate_scene(spec)
    save_detections(frame, args.out)
    print(f"wrote {len(frame.detections)} detections to {args.out}")


def cmd_train(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = _scene_spec(cfg)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "policy.ckpt")
    log_path = os.path.join(out_dir, "training_log.csv")
    ckpt = train(sampler_from_spec(spec), _env_config(cfg), _hyper(cfg),
                 log_path=log_path)
    save_checkpoint(ckpt, ckpt_path)
    print(f"wrote {ckpt_path} (final mean return "
          f"{ckpt.meta.get('final_mean_return')})")


def cmd_partition(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg["detections"] is None:
        raise ValueError("no detections file configured")
    frame = load_detections(cfg["detections"])
    report = _partition_frame(frame, cfg, cfg["seed"])
    out = args.out or os.path.join(cfg["out_dir"], "clusters.json")
    dump_json(report, out)
    print(f"wrote {out} ({report['n_final']} clusters)")


def cmd_plan(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    _, parts = load_clusters(args.clusters)
    payload = _plan_payload(parts, _profiles(cfg), cfg["d_max"], cfg["e"])
    out = args.out or os.path.join(cfg["out_dir"], "plan.json")
    dump_json(payload, out)
    print(f"wrote {out} (precision {payload['total_precision']:.4f}, "
          f"latency {payload['total_latency_ms']} ms)")


def cmd_pipeline(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    out_dir = cfg["out_dir"]
    profiles = _profiles(cfg)
    if cfg["detections"] is not None:
        frames = [(cfg["seed"], load_detections(cfg["detections"]))]
    else:
        spec = _scene_spec(cfg)
        frames = [(cfg["seed"] + k, generate_scene(spec.with_seed(cfg["seed"] + k)))
                  for k in range(cfg["num_scenes"])]
    scenes = []
    rows = []
    for scene_seed, frame in frames:
        clusters = _partition_frame(frame, cfg, scene_seed)
        parts = [PartitionDescriptor(
            c["id"], c["block_px"][2] - c["block_px"][0],
            c["block_px"][3] - c["block_px"][1], tuple(c["member_areas_px2"]))
            for c in clusters["clusters"]]
        plan = _plan_payload(parts, profiles, cfg["d_max"], cfg["e"])
        last = clusters["trace"][-1]
        r1, r2, r3, r4 = last["components"]
        scenes.append({"scene_seed": scene_seed, "clusters": clusters, "plan": plan})
        rows.append({
            "scene_id": scene_seed,
            "n_final": clusters["n_final"],
            "r1": r1, "r2": r2, "r3": r3, "r4": r4,
            "reward": last["reward"],
            "plan_precision": plan["total_precision"],
            "sum_latency_ms": plan["total_latency_ms"],
            "makespan_ms": plan["makespan_ms"],
        })
    dump_json({"scenes": scenes}, os.path.join(out_dir, "report.json"))
    write_csv(os.path.join(out_dir, "metrics.csv"),
              ["scene_id", "n_final", "r1", "r2", "r3", "r4", "reward",
               "plan_precision", "sum_latency_ms", "makespan_ms"], rows)
    print(f"wrote {out_dir}/report.json and {out_dir}/metrics.csv "
          f"({len(rows)} scene(s))")


def cmd_eval(args) -> None:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg["checkpoint"] is None:
        raise ValueError("eval needs a trained checkpoint")
    ckpt = load_checkpoint(cfg["checkpoint"])
    spec = _scene_spec(cfg)
    episodes = cfg["episodes"]
    base = cfg["seed"] + 10_000
    frames = [(base + k, generate_scene(spec.with_seed(base + k)))
              for k in range(episodes)]
    policies = [
        ("trained", greedy_policy(ckpt)),
        ("random", random_policy()),
        ("keep", keep_policy()),
    ]
    env_cfg = EnvConfig(weights=ckpt.weights, transform=_transform(cfg),
                        bandwidth=_bandwidth(cfg), n_pad=ckpt.n_pad)
    rows = []
    for name, policy_fn in policies:
        for scene_seed, frame in frames:
            env = make_env(frame, env_cfg, cfg["t_max"])
            rng = np.random.default_rng(scene_seed)
            final, trace = run_episode(env, policy_fn, rng)
            in_range = ckpt.weights.n_min <= final.count <= ckpt.weights.n_max
            rows.append({
                "policy": name,
                "scene_seed": scene_seed,
                "final_reward": trace[-1].reward,
                "final_n": final.count,
                "in_range": int(in_range),
            })
    out = os.path.join(cfg["out_dir"], "eval.csv")
    write_csv(out, ["policy", "scene_seed", "final_reward", "final_n",
                    "in_range"], rows)
    for name, _ in policies:
        sub = [r for r in rows if r["policy"] == name]
        mean_r = float(np.mean([r["final_reward"] for r in sub]))
        mean_n = float(np.mean([r["final_n"] for r in sub]))
        frac = float(np.mean([r["in_range"] for r in sub]))
        print(f"{name:8s} mean_final_reward={mean_r:.4f} "
              f"mean_N={mean_n:.2f} in_range={frac:.2f}")
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneplan",
        description="RL scene partitioning and latency-budgeted model planning",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")

    p = sub.add_parser("gen-scene", help="generate a synthetic detection file")
    common(p)
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output detection JSON")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train the refinement policy")
    common(p)
    p.add_argument("--scene-spec", dest="scene_spec", help="scene spec JSON")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("partition", help="cluster one detection file")
    common(p)
    p.add_argument("--detections", help="detection file (JSON or CSV)")
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--policy", choices=["trained", "keep", "random"],
                   help="policy mode")
    p.add_argument("--t-max", dest="t_max", type=int, help="refinement steps")
    p.add_argument("--out", help="clusters JSON path")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("plan", help="assign models to a clusters report")
    common(p)
    p.add_argument("--clusters", required=True, help="clusters JSON")
    p.add_argument("--profile", help="model profile JSON (default: bundled)")
    p.add_argument("--d-max", dest="d_max", type=int, help="latency budget (ms)")
    p.add_argument("--e", type=int, help="edge server count")
    p.add_argument("--out", help="plan JSON path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("pipeline", help="generate/load, partition, plan, simulate")
    common(p)
    p.add_argument("--scene-spec", dest="scene_spec", help="scene spec JSON")
    p.add_argument("--detections", help="detection file instead of generation")
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--policy", choices=["trained", "keep", "random"])
    p.add_argument("--num-scenes", dest="num_scenes", type=int)
    p.add_argument("--d-max", dest="d_max", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="trained vs random vs keep-only baselines")
    common(p)
    p.add_argument("--scene-spec", dest="scene_spec")
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--episodes", type=int, help="held-out episodes per policy")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.func(args)
        return 0
    except InfeasiblePlanError as e:
        print(json.dumps({"error": "infeasible", "reason": str(e)}),
              file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # fall-through runtime failures
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
