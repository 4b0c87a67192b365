"""The coupled planner -> bridge -> generator system and helpers shared by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import array_hash
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .bridge import CUT, PRETRAIN, RL, Bridge, ConditionBatch, PromptTemplate, build_prompt, refine_batch
from .generator import FlowGenerator, GenConfig, ode_sample
from .planner import PlannerConfig, PlannerPolicy, TokenSeq, Vocab, pad_ids
from .world import KnowledgeTable, Task, render

GROUPS = ("planner", "pads", "connector", "generator")


@dataclass
class Models:
    vocab: Vocab
    planner: PlannerPolicy
    bridge: Bridge
    generator: FlowGenerator
    table: KnowledgeTable
    cache: "StateCache" = field(default_factory=lambda: StateCache())

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "planner": self.planner.named_parameters("planner."),
            "pads": self.bridge.prepad.named_parameters("bridge.prepad."),
            "connector": self.bridge.connector.named_parameters("bridge.connector."),
            "generator": self.generator.named_parameters("generator."),
        }

    def params_for(self, groups: Sequence[str]) -> dict[str, Tensor]:
        out = {}
        all_groups = self.groups()
        for g in groups:
            out.update(all_groups[g])
        return out

    def hashes(self) -> dict[str, str]:
        out = {}
        for params in self.groups().values():
            out.update({k: array_hash(p.data) for k, p in params.items()})
        return out


def build_models(seed: int = 0, planner: dict | None = None, gen: dict | None = None, k: int = 25,
                 connector: str = "linear", mode: str = CUT, table: KnowledgeTable | None = None) -> Models:
    vocab = Vocab()
    pcfg = PlannerConfig(len(vocab), **(planner or {}))
    # A small live head lets stage 1 align the bridge; with a zero head no
    # gradient would reach anything upstream of the frozen generator. Clean-grid
    # prediction spares the small network from reproducing the noise itself,
    # and snapping the last tenth of the path keeps the near-clean tail (where
    # the velocity target blows up as 1/(1-t)) from drowning the condition signal.
    gcfg = GenConfig(**{"head_std": 0.02, "target": "x1", "pos_std": 0.5, "snap": 0.1, **(gen or {})})
    return Models(vocab, PlannerPolicy(pcfg, seed), Bridge(pcfg.d, gcfg.d_cond, k, seed, connector, mode),
                  FlowGenerator(gcfg, seed), table or KnowledgeTable(seed=0))


def group_of(name: str) -> str:
    if name.startswith("bridge.prepad."):
        return "pads"
    if name.startswith("bridge.connector."):
        return "connector"
    return name.split(".", 1)[0]


def changed_groups(before: dict[str, str], after: dict[str, str]) -> set[str]:
    return {group_of(k) for k in before if before[k] != after[k]}


def changed_params(before: dict[str, str], after: dict[str, str]) -> set[str]:
    return {k for k in before if before[k] != after[k]}


class StateCache:
    """Last-two-layer planner states per (planner version, token ids), for frozen-planner stages."""

    def __init__(self, limit: int = 50_000):
        self.store: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self.limit = limit

    def states(self, planner: PlannerPolicy, seqs: Sequence[TokenSeq], pad: int) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(B, T, d)`` arrays of layers L-1 and L."""
        keys = [(planner.version, s.ids) for s in seqs]
        missing = list(dict.fromkeys(k for k in keys if k not in self.store))
        if missing:
            if len(self.store) + len(missing) > self.limit:
                self.store.clear()
            miss_seqs = [TokenSeq(k[1]) for k in missing]
            with T.no_grad():
                st = planner.hidden(pad_ids(miss_seqs, pad))
            for i, k in enumerate(missing):
                n = len(k[1])
                self.store[k] = (st[-2].data[i, :n], st[-1].data[i, :n])
        width = max(len(s) for s in seqs)
        d = planner.cfg.d
        a = np.zeros((len(seqs), width, d))
        b = np.zeros((len(seqs), width, d))
        for i, k in enumerate(keys):
            sa, sb = self.store[k]
            a[i, :len(sa)], b[i, :len(sb)] = sa, sb
        return a, b


def prompt_seq(models: Models, task: Task, mode: str) -> TokenSeq:
    return build_prompt(PromptTemplate(mode), task.prompt, models.vocab, task.context)


def pseudo_cot_seqs(models: Models, tasks: Sequence[Task]) -> list[TokenSeq]:
    return [prompt_seq(models, t, PRETRAIN) for t in tasks]


def conditions(models: Models, seqs: Sequence[TokenSeq], states=None) -> ConditionBatch:
    """Bridge output for sequences; planner states come from the cache unless given."""
    if states is None:
        states = models.cache.states(models.planner, seqs, models.vocab.pad)
    return refine_batch(states, seqs, models.vocab, models.bridge)


def task_refs(tasks: Sequence[Task]) -> np.ndarray | None:
    if not tasks[0].refs:
        return None
    return np.stack([np.stack([render(r) for r in t.refs]) for t in tasks])


def target_grids(tasks: Sequence[Task]) -> np.ndarray:
    return np.stack([render(t.target) for t in tasks])


def generate(models: Models, cond: ConditionBatch, refs, noise: np.ndarray, steps: int = 20, cfg: float = 4.0,
             cutoff: float = 0.6) -> np.ndarray:
    with T.no_grad():
        x, _ = ode_sample(models.generator, cond, refs, steps, cfg, cutoff, noise)
    return x


def rl_prompts(models: Models, tasks: Sequence[Task]) -> list[TokenSeq]:
    return [prompt_seq(models, t, RL) for t in tasks]
