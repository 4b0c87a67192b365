"""Synthetic transcripts used to pretrain the planner before the recipe starts.

The planner stands in for a pretrained multimodal LLM, so it needs prior
abilities: answering in the ``<think> ... </think> answer`` format, knowing
the knowledge-table facts, and rewriting captions. Its habits are deliberately
mixed: the canonical caption is only one of several rewrites, and a composition
think block is sometimes a full layout plan and sometimes skipped. Policy
gradients can only reweight behaviour the planner already samples, so these
mixtures are what reinforcement learning has to choose from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .planner import END_THINK, EOS, SYS, THINK
from .world import (
    COLORS, COUNT_WORDS, COUNTS, PLURAL, SHAPES, SINGULAR, KnowledgeTable, Task, caption_tokens, layout,
    make_task,
)

FILLERS = ("please", "draw", "a", "nice", "picture", "of")
CANONICAL_REWRITE_P = 0.25
SKIP_PLAN_P = 0.3  # share of composition transcripts that close the think block at once


@dataclass(frozen=True)
class Transcript:
    tokens: list[str]
    loss_from: int  # first position whose next-token prediction is trained


def think_body(task: Task) -> list[str]:
    """Visible reasoning for a task (empty for scenarios that need none)."""
    if task.scenario == "composition":
        return layout(task.payload).description()
    if task.scenario == "reasoning":
        return [task.payload["key"], "is", *task.payload["rewrite"]]
    return []


def answer(task: Task) -> list[str]:
    """The ideal post-``</think>`` instruction."""
    pl = task.payload
    if task.scenario == "reasoning":
        return list(pl["rewrite"])
    if task.scenario == "reflection":
        return list(pl["response"])
    return list(task.prompt)


def _swap_word(rng, word: str) -> str:
    if word in COLORS:
        return str(rng.choice([c for c in COLORS if c != word]))
    if word in SHAPES:
        return str(rng.choice([s for s in SHAPES if s != word]))
    if word in SINGULAR:
        return PLURAL[str(rng.choice([s for s in SHAPES if s != SINGULAR[word]]))]
    if word in COUNTS:
        return COUNT_WORDS[int(rng.choice([c for c in (2, 3) if c != COUNTS[word]]))] if COUNTS[word] > 1 else word
    return word


def noisy_rewrite(rng, caption: list[str]) -> list[str]:
    """A caption rewrite drawn from imperfect habits; canonical with probability 1/4."""
    if rng.random() < CANONICAL_REWRITE_P:
        return list(caption)
    kind = rng.choice(["substitute", "drop", "filler", "reorder"], p=[0.4, 0.3, 0.15, 0.15])
    out = list(caption)
    if kind == "substitute":
        slots = [i for i, w in enumerate(out) if w in COLORS or w in SHAPES or w in SINGULAR]
        i = int(rng.choice(slots))
        out[i] = _swap_word(rng, out[i])
    elif kind == "drop":
        if len(out) > 3:
            out = out[:3]
        else:
            out = out[1:]
    elif kind == "filler":
        out = [*FILLERS, *out]
    elif len(out) > 3:
        out = out[4:] + [out[3]] + out[:3]
    else:
        out = [out[1], out[0], out[2]]
    return out


def task_transcript(task: Task, rng) -> Transcript:
    prompt = [SYS, *task.context, *task.prompt, THINK]
    ans = answer(task)
    think = think_body(task)
    if task.scenario == "composition":
        ans = noisy_rewrite(rng, caption_tokens(task.payload))
        if rng.random() < SKIP_PLAN_P:
            think = []
    return Transcript(prompt + think + [END_THINK, *ans, EOS], len(prompt) - 1)


def fact_transcript(table: KnowledgeTable, key: str, rng) -> Transcript:
    k = table[key]
    prefix = [SYS, *rng.choice(FILLERS, size=int(rng.integers(0, 5)))]
    return Transcript([*map(str, prefix), key, "is", *k.rewrite(), EOS], len(prefix))


CORPUS_MIX = {"composition": 0.3, "reasoning": 0.2, "fact": 0.25, "text-render": 0.1, "edit": 0.075,
              "reflection": 0.075}


def sample_transcripts(rng, n: int, table: KnowledgeTable, mix: dict[str, float] | None = None) -> list[Transcript]:
    """Draw ``n`` transcripts. Reasoning transcripts use train keys only; facts cover every key."""
    mix = mix or CORPUS_MIX
    names = list(mix)
    p = np.array([mix[k] for k in names])
    out = []
    for kind in rng.choice(len(names), size=n, p=p / p.sum()):
        kind = names[int(kind)]
        if kind == "fact":
            out.append(fact_transcript(table, str(rng.choice(list(table.entries))), rng))
        else:
            seed = int(rng.integers(1 << 30))
            out.append(task_transcript(make_task(kind, "train", seed, table), rng))
    return out
