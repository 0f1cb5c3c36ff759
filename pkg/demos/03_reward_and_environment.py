"""The four-part clustering reward and the fixed-horizon environment loop.

Walks a hand-scripted policy (merge while over the count band, then keep)
through one episode and prints the reward decomposition at every step.
"""

from sceneplan import (
    BandwidthSpec,
    ClusterEnv,
    RewardWeights,
    SceneSpec,
    Stratum,
    TransformParams,
    generate_scene,
)
from sceneplan.rl_env import KEEP, MERGE

spec = SceneSpec(
    width_px=1280, height_px=1280, count_min=16, count_max=16,
    strata=(Stratum(0.05, 0.45, 0.012, 0.03, 0.65),
            Stratum(0.55, 0.95, 0.06, 0.12, 0.35)),
    seed=4,
)
weights = RewardWeights(alpha=2.0, beta=0.2, gamma=1.0, delta=0.4,
                        n_min=2, n_max=4, d_m=0.05)
env = ClusterEnv(
    generate_scene(spec),
    weights=weights,
    transform=TransformParams(0.5),
    bandwidth=BandwidthSpec("fixed", 0.16),
    n_pad=8,
    t_max=10,
)

state = env.reset()
print(f"initial clusters: {env.config.count} "
      f"(target band [{weights.n_min}, {weights.n_max}])")
print(f"state vector: length {len(state)} "
      f"(5 features x 8 slots + normalized count)")
print()
print("step  action  N   R1(tight)  R2(areavar)  R3(count)  R4(close)  reward")
done = False
t = 0
while not done:
    action = MERGE if env.config.count > weights.n_max else KEEP
    out = env.step(action)
    r1, r2, r3, r4 = out.components
    name = out.info["applied"]
    print(f"{t + 1:4d}  {name:6s} {out.info['n']:2d}   {r1:9.4f}  {r2:11.6f}"
          f"  {r3:9.1f}  {r4:9.1f}  {out.reward:7.3f}")
    done = out.done
    t += 1

print(f"\nfinal N = {env.config.count}; merging stopped once the count "
      "penalty R3 hit zero")
