"""A tour of the synthetic world: tasks, rendered grids, parsing, and rule rewards.

Run:  python demos/01_synthetic_world.py [out_dir]
"""

# %% setup
import sys
from pathlib import Path

import numpy as np

from thinkgen_lab.generator import save_png
from thinkgen_lab.rewards import RolloutArtifacts, route_reward
from thinkgen_lab.world import Scene, default_table, make_task, parse_scene, render

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/world")
out.mkdir(parents=True, exist_ok=True)
table = default_table()

# %% one task per image scenario, with its target grid
# Every image task carries a target scene; rendering it gives a 16x16x4 binary
# grid (one channel per color plane), and parsing that grid recovers the scene.
for scenario in ("composition", "text-render", "edit", "reasoning"):
    task = make_task(scenario, "train", 7, table)
    grid = render(task.target)
    save_png(grid, out / f"{scenario}.png")
    assert parse_scene(grid) == task.target
    print(f"{scenario:12s} prompt: {' '.join(task.prompt)}")
    print(f"{'':12s} target: {task.target.to_json()}")

# %% reasoning prompts name a key; the knowledge table says what it means
task = make_task("reasoning", "train", 3, table)
key = task.payload["key"]
print(f"\n{key} -> {' '.join(table[key].rewrite())}")

# %% rewards: the exact target scores 1, a damaged grid scores less
task = make_task("composition", "held-out", 11, table)
good = render(task.target)
bad = render(Scene(task.target.objects[:-1]))  # the last object is missing
for name, grid in (("exact", good), ("one object short", bad), ("noise", np.random.default_rng(0).random(good.shape))):
    rec = route_reward("composition", RolloutArtifacts(task.payload, grid=grid))
    print(f"{name:16s} reward {rec.score:.3f}  checks {rec.sub_scores}")

# %% reflection is scored on text alone, with normalized edit distance
task = make_task("reflection", "train", 2, table)
gt = task.payload["response"]
for guess in (gt, gt[:-1], ["no", "change"]):
    rec = route_reward("reflection", RolloutArtifacts(task.payload, response=list(guess)))
    print(f"reflection {' '.join(guess)!r:40s} -> {rec.score:.3f}")
print(f"\npngs written to {out}")
