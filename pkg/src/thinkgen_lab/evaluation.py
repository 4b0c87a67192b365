"""Held-out evaluation suites with a think on/off toggle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff.rng import stream
from .bridge import PRETRAIN, RL
from .errors import ContractError
from .generator import initial_noise
from .planner import sample_batch
from .rewards import RolloutArtifacts, needs_generator, route_reward
from .system import Models, conditions, generate, prompt_seq, task_refs
from .world import SCENARIOS, KnowledgeTable, Task, make_task

THINK_MODES = ("on", "off")


@dataclass
class EvalSuite:
    name: str
    scenario: str
    tasks: list[Task]
    think: str = "on"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if self.think not in THINK_MODES:
            raise ContractError(f"think must be 'on' or 'off', got {self.think!r}")
        if not self.tasks:
            raise ContractError("an evaluation suite needs at least one task")

    def with_think(self, think: str) -> "EvalSuite":
        return EvalSuite(self.name, self.scenario, self.tasks, think)


def check_disjoint(suite: EvalSuite, table: KnowledgeTable, train_ids: Sequence[str] = ()) -> None:
    """Refuse to evaluate on anything that could have been trained on."""
    seen = set(train_ids)
    train_keys = set(table.train_keys)
    for t in suite.tasks:
        if t.split != "held-out":
            raise ContractError(f"task {t.task_id} is not from the held-out split")
        if t.task_id in seen:
            raise ContractError(f"task {t.task_id} also appears in training data")
        if t.scenario == "reasoning" and t.payload["key"] in train_keys:
            raise ContractError(f"knowledge key {t.payload['key']} is a training key")


def reasoning_suite(table: KnowledgeTable, n: int = 40, think: str = "on") -> EvalSuite:
    keys = table.held_out_keys
    if n > len(keys):
        raise ContractError(f"only {len(keys)} held-out keys exist")
    # make_task picks key index seed % len(keys), so seeds 0..n-1 give n distinct keys
    return EvalSuite("reasoning", "reasoning", [make_task("reasoning", "held-out", i, table) for i in range(n)], think)


def scenario_suite(scenario: str, n: int, seed: int = 0, think: str = "on", table: KnowledgeTable | None = None,
                   name: str | None = None) -> EvalSuite:
    tasks = [make_task(scenario, "held-out", 10_000 * seed + i, table) for i in range(n)]
    return EvalSuite(name or scenario, scenario, tasks, think)


def short_prompt_suite(n: int, seed: int = 0, think: str = "off") -> EvalSuite:
    """Single-object composition prompts (three tokens), where extra padding context matters most."""
    tasks, i = [], 0
    while len(tasks) < n:
        t = make_task("composition", "held-out", 10_000 * seed + 5_000 + i)
        i += 1
        if len(t.payload["objects"]) == 1:
            tasks.append(t)
    return EvalSuite("short-prompt", "composition", tasks, think)


def evaluate(models: Models, suite: EvalSuite, seed: int = 0, steps: int = 20, cfg: float = 4.0,
             cutoff: float = 0.6, max_new: int = 64) -> dict:
    """Mean reward (and sub-scores) of greedy planner decoding plus ODE sampling.

    With think off the planner is not sampled at all: the pseudo-CoT template
    supplies an empty think block and repeats the prompt as the instruction.
    """
    check_disjoint(suite, models.table)
    vocab = models.vocab
    tasks = suite.tasks
    if suite.think == "on":
        prompts = [prompt_seq(models, t, RL) for t in tasks]
        seqs = sample_batch(models.planner, vocab, prompts, [stream(seed, "eval", t.task_id) for t in tasks],
                            max_new=max_new, greedy=True)
    else:
        seqs = [prompt_seq(models, t, PRETRAIN) for t in tasks]
    rows = [i for i, s in enumerate(seqs) if not s.malformed and needs_generator(suite.scenario)]
    grids = {}
    if rows:
        cond = conditions(models, [seqs[i] for i in rows])
        geo = models.generator.cfg.geometry
        noise = np.stack([initial_noise(geo, 1, seed, "eval-noise", tasks[i].task_id)[0] for i in rows])
        x = generate(models, cond, task_refs([tasks[i] for i in rows]), noise, steps, cfg, cutoff)
        grids = {r: x[j] for j, r in enumerate(rows)}
    records = []
    for i, (t, s) in enumerate(zip(tasks, seqs)):
        art = RolloutArtifacts(t.payload, grid=grids.get(i), malformed=s.malformed)
        if suite.scenario == "reflection" and not s.malformed:
            art.response = vocab.decode(s.instruction(vocab))
        records.append(route_reward(suite.scenario, art))
    subs: dict[str, list[float]] = {}
    for r in records:
        for k, v in r.sub_scores.items():
            subs.setdefault(k, []).append(float(v))
    return {
        "suite": suite.name, "scenario": suite.scenario, "think": suite.think, "n": len(tasks),
        "mean_reward": float(np.mean([r.score for r in records])),
        "malformed": float(np.mean([r.malformed for r in records])),
        "mean_cot_len": float(np.mean([s.think_len for s in seqs])),
        "sub_scores": {k: float(np.mean(v)) for k, v in sorted(subs.items())},
    }


def default_suites(models: Models, n: int = 24, seed: int = 0) -> list[EvalSuite]:
    out = [reasoning_suite(models.table, 40)]
    for sc in ("composition", "text-render", "edit", "reflection"):
        out.append(scenario_suite(sc, n, seed, table=models.table))
    out.append(short_prompt_suite(n, seed, "on"))
    return out


def run_suites(models: Models, n: int = 24, seed: int = 0, suites: Sequence[EvalSuite] | None = None) -> dict:
    """Every suite under both think modes: ``{suite: {"on": table, "off": table}}``."""
    out = {}
    for s in suites or default_suites(models, n, seed):
        out[s.name] = {mode: evaluate(models, s.with_think(mode), seed) for mode in THINK_MODES}
    return out
