"""
Short training run followed by a comparison with capacity-proportional sharing.

Trains the five agents for a few episodes on the bundled default scenario,
then rolls out the greedy policies and the proportional baseline on the
bundled comparison scenario (low, spread initial SoCs and a long charging
ramp). Episode count is a command-line argument; expect about 1.5 s per
episode.

    python demos/train_and_compare.py 60
"""

import sys
from dataclasses import replace

from dessmarl.cli import load_config, resolve
from dessmarl.orchestrator import evaluate, pinned_units, run_baseline, train


def main(episodes=60):
    scenario, cfg = resolve(load_config("default"))
    cfg = replace(cfg, episodes=episodes)

    def progress(m):
        if m.episode % 10 == 0 or m.episode == episodes - 1:
            print(f"episode {m.episode:4d}  mean reward {m.mean_reward:8.4f}  end variance {m.soc_variance_end:.2e}")

    res = train(cfg, scenario, on_episode=progress)

    cmp_scenario, cmp_cfg = resolve(load_config("comparison"))
    base = run_baseline(cmp_scenario, cmp_cfg)
    marl = evaluate(res.agents, cmp_scenario, cmp_cfg)
    print(f"\nproportional baseline: terminal variance {base.variance[-1]:.5f}, "
          f"pinned units {[i + 1 for i in pinned_units(base, cmp_scenario)]}")
    print(f"trained agents:        terminal variance {marl.variance[-1]:.5f}, "
          f"pinned units {[i + 1 for i in pinned_units(marl, cmp_scenario)]}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 60)
