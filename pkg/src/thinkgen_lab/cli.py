"""Command-line entry point: ``thinkgen-lab <command> [flags]``.

Commands: gen-data, train, grpo, eval, score, plot, inspect. Every command is
deterministic given its inputs and ``--seed``.
"""

from __future__ import annotations

import os

# BLAS reads these at import time, so they are set before numpy loads.
if os.environ.get("THINKGEN_LAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["THINKGEN_LAB_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .autodiff.rng import stream  # noqa: E402
from .bridge import RL  # noqa: E402
from .errors import ThinkGenError  # noqa: E402
from .evaluation import evaluate, reasoning_suite, scenario_suite, short_prompt_suite  # noqa: E402
from .generator import initial_noise, save_png  # noqa: E402
from .planner import sample_rollout  # noqa: E402
from .plots import plot_metrics  # noqa: E402
from .recipe import (  # noqa: E402
    MetricsWriter, RecipeConfig, StageConfig, load_models, run_recipe, run_stage, save_models,
)
from .rewards import RolloutArtifacts, route_reward  # noqa: E402
from .system import build_models, conditions, generate, prompt_seq, task_refs  # noqa: E402
from .world import SCENARIOS, SPLITS, Task, make_tasks, read_jsonl, render, write_jsonl  # noqa: E402


def _load_config(path) -> RecipeConfig:
    if path is None:
        return RecipeConfig()
    return RecipeConfig.from_json(json.loads(Path(path).read_text()))


def _stage_number(value: str) -> int:
    names = {"mllm": 4, "dit": 5}
    if value in names:
        return names[value]
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"stage must be 0-5, 'mllm' or 'dit', got {value!r}") from None
    if not 0 <= n <= 5:
        raise argparse.ArgumentTypeError(f"stage must be 0-5, got {n}")
    return n


def cmd_gen_data(args) -> int:
    tasks = make_tasks(args.scenario, args.split, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, tasks)
    print(f"wrote {len(tasks)} {args.scenario} tasks to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    cfg = replace(cfg, seed=args.seed if args.seed is not None else cfg.seed)
    wanted = set(args.stage) if args.stage else {0, 1, 2, 3}
    if wanted & {4, 5}:
        raise ThinkGenError("train covers stages 0-3; use the grpo command for stages 4-5")
    cfg = replace(cfg, stages=[s for s in cfg.stages if s.stage in wanted])
    if args.steps is not None:
        cfg = replace(cfg, stages=[replace(s, steps=args.steps) for s in cfg.stages])
    report = run_recipe(cfg, args.out, start_from=args.resume, evaluate_after=(3,) if 3 in wanted else (),
                        log=print)
    print(json.dumps(report["stages"], indent=1))
    return 0


def cmd_grpo(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    stage = args.stage[0] if args.stage else 4
    if stage not in (4, 5):
        raise ThinkGenError("grpo runs stage 4 (mllm) or stage 5 (dit)")
    base = next((s for s in cfg.stages if s.stage == stage), None)
    if base is None:
        base = StageConfig(stage, cfg.grpo.lr_planner if stage == 4 else cfg.grpo.lr_generator,
                           cfg.grpo.tasks_per_step if stage == 4 else cfg.grpo.dit_tasks_per_step)
    if args.steps is not None:
        base = replace(base, steps=args.steps)
    if args.resume:
        models = load_models(args.resume)
    else:
        print("no --from checkpoint given; starting from freshly initialised models", file=sys.stderr)
        models = build_models(seed, cfg.planner, cfg.generator, cfg.k, cfg.connector, cfg.mode)
    out = Path(args.out)
    writer = MetricsWriter(out / "metrics" / f"stage{stage}.jsonl")
    rep = run_stage(models, base, seed, cfg.grpo, args.scenario, on_step=writer)
    writer.close()
    save_models(models, out / "checkpoints" / f"stage{stage}", stage, seed)
    plot_metrics(writer.path, out / "plots", prefix=f"stage{stage}")
    print(json.dumps(rep.summary()))
    return 0


def _suite(args, models):
    think = args.think
    if args.scenario == "reasoning":
        return reasoning_suite(models.table, min(args.n, len(models.table.held_out_keys)), think)
    if args.scenario == "short-prompt":
        return short_prompt_suite(args.n, args.seed, think)
    return scenario_suite(args.scenario, args.n, args.seed, think, models.table)


def cmd_eval(args) -> int:
    models = load_models(args.resume)
    names = [args.scenario] if args.scenario else [*SCENARIOS, "short-prompt"]
    results = {}
    for name in names:
        args.scenario = name
        results[name] = evaluate(models, _suite(args, models), args.seed)
    text = json.dumps(results, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_score(args) -> int:
    """Score records ``{"task": {...}, "grid": [...]}`` or ``{"task": ..., "response": [...]}``.

    With ``--oracle`` the input is a task JSONL and each task is scored on its
    own ground-truth render (a sanity check that should give 1.0).
    """
    rows = []
    if args.oracle:
        for t in read_jsonl(args.input):
            grid = render(t.target) if t.target is not None else None
            response = t.payload.get("response") if t.scenario == "reflection" else None
            rows.append((t, grid, response))
    else:
        with open(args.input) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    grid = np.asarray(d["grid"], dtype=np.float64) if "grid" in d else None
                    rows.append((Task.from_json(d["task"]), grid, d.get("response")))
    out_lines = []
    for t, grid, response in rows:
        rec = route_reward(t.scenario, RolloutArtifacts(t.payload, grid=grid, response=response))
        out_lines.append(json.dumps({"task_id": t.task_id, **json.loads(rec.to_json())}, sort_keys=True))
    text = "\n".join(out_lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_plot(args) -> int:
    paths = plot_metrics(args.input, args.out, prefix=Path(args.input).stem)
    for p in paths:
        print(p)
    return 0


def cmd_inspect(args) -> int:
    models = load_models(args.resume)
    scenario = args.scenario or "composition"
    task = make_tasks(scenario, "held-out", 1, args.seed, models.table)[0]
    vocab = models.vocab
    seq = sample_rollout(models.planner, vocab, prompt_seq(models, task, RL), max_new=64,
                         seed_stream=stream(args.seed, "inspect"), greedy=args.think == "on")
    info = {"task": task.task_id, "prompt": vocab.decode(seq.ids[:seq.prompt_len]),
            "malformed": seq.malformed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not seq.malformed:
        info["think"] = vocab.decode(seq.ids[seq.think_open + 1:seq.think_close])
        info["instruction"] = vocab.decode(seq.instruction(vocab))
        cond = conditions(models, [seq])
        info["condition_shape"] = [int(cond.valid.sum()), int(cond.states.shape[-1])]
        noise = initial_noise(models.generator.cfg.geometry, 1, args.seed, "inspect")
        grid = generate(models, cond, task_refs([task]), noise)[0]
        save_png(grid, out / "grid.png")
        rec = route_reward(task.scenario, RolloutArtifacts(task.payload, grid=grid,
                                                           response=info["instruction"]))
        info["reward"] = json.loads(rec.to_json())
    (out / "rollout.json").write_text(json.dumps(info, indent=1))
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thinkgen-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)
        return sp

    g = common(sub.add_parser("gen-data", help="write task JSONL"))
    g.add_argument("--scenario", choices=SCENARIOS, required=True)
    g.add_argument("--split", choices=SPLITS, default="train")
    g.add_argument("--n", type=int, default=100)

    t = common(sub.add_parser("train", help="stages 0-3"))
    t.add_argument("--stage", type=_stage_number, action="append")
    t.add_argument("--steps", type=int)
    t.add_argument("--from", dest="resume", help="checkpoint directory of the preceding stage")

    r = common(sub.add_parser("grpo", help="stage 4 (mllm) or 5 (dit)"))
    r.add_argument("--stage", type=_stage_number, action="append")
    r.add_argument("--steps", type=int)
    r.add_argument("--scenario", choices=SCENARIOS)
    r.add_argument("--from", dest="resume")

    e = common(sub.add_parser("eval", help="held-out suites"), out_required=False)
    e.add_argument("--from", dest="resume", required=True)
    e.add_argument("--think", choices=("on", "off"), default="on")
    e.add_argument("--scenario", choices=[*SCENARIOS, "short-prompt"])
    e.add_argument("--n", type=int, default=24)

    s = sub.add_parser("score", help="batch rule-based rewards")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.add_argument("--oracle", action="store_true")

    pl = sub.add_parser("plot", help="reward and CoT-length curves")
    pl.add_argument("--in", dest="input", required=True)
    pl.add_argument("--out", required=True)

    i = common(sub.add_parser("inspect", help="dump one rollout"))
    i.add_argument("--from", dest="resume", required=True)
    i.add_argument("--scenario", choices=SCENARIOS)
    i.add_argument("--think", choices=("on", "off"), default="on")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "grpo": cmd_grpo, "eval": cmd_eval, "score": cmd_score,
            "plot": cmd_plot, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", 0) is None:
        args.seed = None if args.command in ("train", "grpo") else 0
    try:
        return COMMANDS[args.command](args)
    except ThinkGenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
