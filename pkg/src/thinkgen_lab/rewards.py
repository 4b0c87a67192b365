"""Rule models: exact per-scenario rewards over the micro-world."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .world import Scene, as_grid, parse_scene, render

REWARD_VERSION = "rules-1"


@dataclass
class RewardRecord:
    scenario: str
    score: float
    sub_scores: dict[str, float] = field(default_factory=dict)
    malformed: bool = False
    degenerate: bool = False
    version: str = REWARD_VERSION

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"reward {self.score} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Token-level edit distance (unit-cost insert/delete/substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def ned(a: Sequence, b: Sequence) -> float:
    """Levenshtein distance over the longer length; 0 for two empty sequences."""
    n = max(len(a), len(b))
    return levenshtein(a, b) / n if n else 0.0


def _matches(scene: Scene, spec: dict):
    return [o for o in scene.objects if o.shape == spec["shape"] and o.color == spec["color"]]


def _relation_holds(a, b, rel: str) -> bool:
    (ra, ca), (rb, cb) = a.pos, b.pos
    return {"left-of": ca < cb, "right-of": ca > cb, "above": ra < rb, "below": ra > rb}[rel]


def composition_checks(scene: Scene, payload: dict) -> dict[str, float]:
    specs = payload["objects"]
    checks: dict[str, float] = {}
    for i, spec in enumerate(specs):
        sfx = "" if len(specs) == 1 else f"_{i}"
        same_shape = [o for o in scene.objects if o.shape == spec["shape"]]
        hits = _matches(scene, spec)
        checks["count" + sfx] = float(len(hits) == spec["count"])
        checks["color" + sfx] = float(bool(hits))
        checks["shape" + sfx] = float(bool(same_shape))
    rel = payload.get("relation")
    if rel:
        a_objs, b_objs = _matches(scene, specs[rel["a"]]), _matches(scene, specs[rel["b"]])
        checks["relation"] = float(any(_relation_holds(a, b, rel["rel"]) for a in a_objs for b in b_objs))
    return checks


def reward_composition(grid, payload: dict, strict: bool = False, scenario: str = "composition") -> RewardRecord:
    """Fraction of passed sub-checks (count, color, shape per object spec, plus relation).

    ``strict`` turns it into all-or-nothing.
    """
    checks = composition_checks(parse_scene(grid), payload)
    frac = sum(checks.values()) / len(checks)
    score = float(frac == 1.0) if strict else frac
    return RewardRecord(scenario, score, checks)


def reward_text(grid, words: Sequence[str]) -> RewardRecord:
    if not words:
        raise ContractError("reward_text needs at least one target word")
    decoded = parse_scene(grid).glyphs
    got = Counter(decoded.split())
    matched = sum((got & Counter(words)).values())
    acc = matched / len(words)
    d = ned(list(decoded), list(" ".join(words)))
    return RewardRecord("text-render", acc, {"word_acc": acc, "ned": d, "ned_similarity": 1.0 - d})


def reward_edit(grid, target) -> RewardRecord:
    """Cosine similarity of the flattened grids mapped from [-1, 1] to [0, 1]."""
    a, b = as_grid(grid).reshape(-1), as_grid(target).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"reward_edit: grid shapes differ, {as_grid(grid).shape} vs {as_grid(target).shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return RewardRecord("edit", 0.0, {"cosine": 0.0}, degenerate=True)
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return RewardRecord("edit", min(1.0, max(0.0, (cos + 1.0) / 2.0)), {"cosine": cos})


def reward_reasoning(grid, payload: dict, malformed: bool = False) -> RewardRecord:
    """Composition reward against the knowledge-expanded scene."""
    if malformed:
        return RewardRecord("reasoning", 0.0, malformed=True)
    rec = reward_composition(grid, {"objects": payload["objects"], "relation": payload.get("relation")},
                             scenario="reasoning")
    return rec


def reward_reflection(response: Sequence[str], gt_response: Sequence[str]) -> RewardRecord:
    if not response and not gt_response:
        return RewardRecord("reflection", 1.0, {"ned": 0.0}, degenerate=True)
    d = ned(list(response), list(gt_response))
    return RewardRecord("reflection", 1.0 - d, {"ned": d})


@dataclass
class RolloutArtifacts:
    """What a rollout produced: a grid for image scenarios, answer tokens for reflection."""

    payload: dict
    grid: np.ndarray | None = None
    response: list[str] | None = None
    malformed: bool = False


IMAGE_SCENARIOS = ("composition", "reasoning", "text-render", "edit")


def needs_generator(scenario: str) -> bool:
    return scenario in IMAGE_SCENARIOS


def route_reward(scenario: str, artifacts: RolloutArtifacts, strict: bool = False) -> RewardRecord:
    """Dispatch a rollout to its scenario's rule model."""
    if scenario not in IMAGE_SCENARIOS and scenario != "reflection":
        raise ContractError(f"unknown scenario {scenario!r}")
    if artifacts.malformed:
        return RewardRecord(scenario, 0.0, malformed=True)
    pl = artifacts.payload
    if scenario == "reflection":
        if artifacts.response is None:
            raise ContractError("reflection scoring needs the response tokens")
        return reward_reflection(artifacts.response, pl["response"])
    if artifacts.grid is None:
        raise ContractError(f"{scenario} scoring needs a generated grid")
    if scenario == "composition":
        return reward_composition(artifacts.grid, pl, strict=strict)
    if scenario == "reasoning":
        return reward_reasoning(artifacts.grid, pl)
    if scenario == "text-render":
        return reward_text(artifacts.grid, pl["words"])
    return reward_edit(artifacts.grid, render(Scene.from_json(pl["target"])))
