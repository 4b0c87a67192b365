"""Side-by-side generations with and without a think block, from a trained checkpoint.

Train first (about 25 minutes on one core):
    thinkgen-lab train --out runs/main
then:
    python demos/04_think_on_off.py runs/main/checkpoints/stage3 [out_dir]

Reasoning prompts only name a key ("show k031"); with think on, the planner
recalls what the key means and the instruction after ``</think>`` spells it
out. With think off, the generator sees the bare key.
"""

# %%
import sys
from pathlib import Path

from thinkgen_lab.bridge import RL
from thinkgen_lab.autodiff import stream
from thinkgen_lab.generator import initial_noise, save_png
from thinkgen_lab.planner import sample_rollout
from thinkgen_lab.recipe import load_models
from thinkgen_lab.rewards import RolloutArtifacts, route_reward
from thinkgen_lab.system import conditions, generate, prompt_seq, pseudo_cot_seqs, task_refs
from thinkgen_lab.world import make_task, render

ckpt = Path(sys.argv[1])
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/think_on_off")
out.mkdir(parents=True, exist_ok=True)
models = load_models(ckpt)
vocab = models.vocab

# %%
for i, scenario in enumerate(("reasoning", "reasoning", "composition", "text-render")):
    task = make_task(scenario, "held-out", 100 + i, models.table)
    noise = initial_noise(models.generator.cfg.geometry, 1, 0, "demo", i)
    seq = sample_rollout(models.planner, vocab, prompt_seq(models, task, RL), max_new=64,
                         seed_stream=stream(0, "demo", i), greedy=True)
    rows = {}
    if not seq.malformed:
        rows["on"] = (seq, vocab.decode(seq.ids[seq.think_open + 1:seq.think_close]))
    rows["off"] = (pseudo_cot_seqs(models, [task])[0], [])
    print(f"\n[{scenario}] {' '.join(task.prompt)}")
    save_png(render(task.target), out / f"{i}_{scenario}_target.png")
    for mode, (s, think) in rows.items():
        grid = generate(models, conditions(models, [s]), task_refs([task]), noise)[0]
        score = route_reward(scenario, RolloutArtifacts(task.payload, grid=grid)).score
        save_png(grid, out / f"{i}_{scenario}_think_{mode}.png")
        instr = " ".join(vocab.decode(s.instruction(vocab)))
        print(f"  think {mode:3s} reward {score:.2f}  think: {' '.join(think) or '-'}  |  instruction: {instr}")
print(f"\nimages in {out}")
