"""All six stages on toy-sized models, with the freeze ledger printed per stage.

The models are far too small to be good; the point is the plumbing: which
parameter groups each stage touches, what gets written to disk, and how the
evaluation tables look. A full-size run is ``thinkgen-lab train`` followed by
``thinkgen-lab grpo --stage mllm`` and ``--stage dit``.

Run:  python demos/03_tiny_recipe.py [out_dir]
"""

# %%
import json
import sys
from dataclasses import replace
from pathlib import Path

from thinkgen_lab.recipe import RecipeConfig, default_stages, load_models, run_recipe
from thinkgen_lab.evaluation import evaluate, reasoning_suite

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/tiny_recipe")

# %% configuration: every stage shortened, models shrunk
budgets = (40, 10, 20, 10, 3, 3)
stages = [replace(s, steps=n, warmup=min(s.warmup, n // 4)) for s, n in zip(default_stages(), budgets)]
cfg = RecipeConfig(seed=5, stages=stages, eval_tasks=4, k=4,
                   planner={"d": 24, "n_layers": 2, "n_heads": 2},
                   generator={"d": 24, "n_layers": 1, "n_heads": 2, "d_cond": 24, "n_freq": 4})
cfg.grpo.n1 = cfg.grpo.n2 = 4
cfg.grpo.max_new = 16
cfg = replace(cfg, stages=[replace(s, batch_size=2) if s.stage == 4 else s for s in cfg.stages])

# %% run it
report = run_recipe(cfg, out, evaluate_after=(3,))
for st in report["stages"]:
    print(f"stage {st['stage']}: trained {st['trainable']}, changed {st['changed_groups']}, "
          f"ledger ok: {st['ledger_ok']}, {st['seconds']}s")

# %% what landed on disk
for p in sorted(out.rglob("*")):
    if p.is_file() and p.suffix in (".jsonl", ".json", ".png"):
        print(p.relative_to(out))

# %% evaluation after stage 3, and the reasoning suite on the final checkpoint
print(json.dumps({k: {m: round(v["mean_reward"], 3) for m, v in t.items()}
                  for k, t in report["eval"]["stage3"].items()}, indent=1))
final = load_models(out / "checkpoints" / "stage5", expect_stage=5)
for think in ("on", "off"):
    res = evaluate(final, reasoning_suite(final.table, 8, think), max_new=16)
    print(f"reasoning, think {think}: {res['mean_reward']:.3f} (mean CoT length {res['mean_cot_len']:.1f})")
