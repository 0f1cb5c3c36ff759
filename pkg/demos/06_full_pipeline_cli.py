"""The whole pipeline through the command-line surface.

Equivalent shell session:

    sceneplan gen-scene --spec spec.json --out dets.json
    sceneplan train     --config config.json
    sceneplan partition --config config.json --detections dets.json --out clusters.json
    sceneplan plan      --config config.json --clusters clusters.json --out plan.json
    sceneplan pipeline  --config config.json
    sceneplan eval      --config config.json --episodes 20

Here the same commands run in-process and the outputs are summarized.
"""

import json
import pathlib
import tempfile

from sceneplan.cli import main

workdir = pathlib.Path(tempfile.mkdtemp(prefix="sceneplan_demo_"))
print(f"working in {workdir}\n")

spec = {
    "width_px": 1280, "height_px": 1280, "count_range": [14, 20],
    "strata": [
        {"y_band": [0.05, 0.45], "size_range": [0.012, 0.03], "density": 0.65},
        {"y_band": [0.55, 0.95], "size_range": [0.06, 0.12], "density": 0.35},
    ],
    "seed": 0,
}
(workdir / "spec.json").write_text(json.dumps(spec, indent=2))

config = {
    "seed": 5,
    "out_dir": str(workdir / "out"),
    "scene_spec": str(workdir / "spec.json"),
    "checkpoint": str(workdir / "out" / "policy.ckpt"),
    "policy": "trained",
    "n": 1, "e": 4, "t_max": 10, "n_pad": 8, "d_max": 1500,
    "bandwidth_mode": "fixed", "bandwidth_value": 0.16,
    "num_scenes": 3, "episodes": 20,
    "reward": {"alpha": 2.0, "beta": 0.2, "gamma": 1.0, "delta": 0.4,
               "n_min": 2, "n_max": 4, "d_m": 0.05},
    "train": {"iterations": 100, "episodes_per_iter": 16, "batch_size": 64,
              "epochs": 4, "lr_policy": 0.01, "lr_critic": 0.001,
              "gamma": 0.9, "clip_eps": 0.2, "entropy_coef": 0.01},
}
(workdir / "config.json").write_text(json.dumps(config, indent=2))
cfg = ["--config", str(workdir / "config.json")]

print("== gen-scene ==")
assert main(["gen-scene", "--spec", str(workdir / "spec.json"),
             "--out", str(workdir / "dets.json")]) == 0

print("\n== train (100 iterations) ==")
assert main(["train", *cfg]) == 0

print("\n== partition ==")
assert main(["partition", *cfg, "--detections", str(workdir / "dets.json"),
             "--out", str(workdir / "clusters.json")]) == 0

print("\n== plan ==")
assert main(["plan", *cfg, "--clusters", str(workdir / "clusters.json"),
             "--out", str(workdir / "plan.json")]) == 0

print("\n== pipeline (3 scenes) ==")
assert main(["pipeline", *cfg]) == 0

print("\n== eval (trained vs random vs keep) ==")
assert main(["eval", *cfg]) == 0

plan = json.loads((workdir / "plan.json").read_text())
print(f"\nplan summary: precision {plan['total_precision']:.3f}, "
      f"latency {plan['total_latency_ms']} ms, "
      f"makespan {plan['makespan_ms']} ms")
metrics = (workdir / "out" / "metrics.csv").read_text().strip().splitlines()
print(f"pipeline metrics rows: {len(metrics) - 1}")
print(f"\nartifacts left in {workdir}")
