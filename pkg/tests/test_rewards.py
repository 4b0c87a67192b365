import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thinkgen_lab.autodiff import stream
from thinkgen_lab.errors import ContractError, ShapeError
from thinkgen_lab.rewards import (
    REWARD_VERSION, RolloutArtifacts, levenshtein, ned, reward_composition, reward_edit, reward_reasoning,
    reward_reflection, reward_text, route_reward,
)
from thinkgen_lab.world import KnowledgeTable, Scene, SceneObject, layout, make_task, render


def edit_distance_oracle(a, b):
    """Top-down recursive definition, memoized."""
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def test_ned_matches_oracle_10k():
    rng = stream(1, "ned")
    alphabet = ["a", "b", "c", "d", "the", "image"]
    for _ in range(10_000):
        a = list(rng.choice(alphabet, size=int(rng.integers(0, 9))))
        b = list(rng.choice(alphabet, size=int(rng.integers(0, 9))))
        dist = edit_distance_oracle(tuple(a), tuple(b))
        assert levenshtein(a, b) == dist
        n = max(len(a), len(b))
        assert ned(a, b) == (dist / n if n else 0.0)


tokens = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=8)


@settings(max_examples=300, deadline=None)
@given(tokens, tokens, tokens)
def test_ned_symmetry_and_triangle(a, b, c):
    assert ned(a, b) == ned(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert 0.0 <= ned(a, b) <= 1.0
    assert (ned(a, b) == 0.0) == (a == b)


def test_composition_target_scores_one():
    for seed in range(100):
        t = make_task("composition", "train", seed)
        rec = reward_composition(render(t.target), t.payload)
        assert rec.score == 1.0 and rec.version == REWARD_VERSION


def test_composition_partial_count():
    payload = {"objects": [{"count": 2, "color": "red", "shape": "cube"}], "relation": None}
    grid = render(Scene((SceneObject((1, 0), "red", "cube"),)))
    rec = reward_composition(grid, payload)
    assert rec.sub_scores == {"count": 0.0, "color": 1.0, "shape": 1.0}
    assert rec.score == pytest.approx(2 / 3, abs=1e-15)
    assert reward_composition(grid, payload, strict=True).score == 0.0


def test_composition_relation_check():
    payload = {"objects": [{"count": 1, "color": "red", "shape": "ball"}, {"count": 1, "color": "blue", "shape": "tri"}],
               "relation": {"a": 0, "rel": "left-of", "b": 1}}
    good = render(layout(payload))
    swapped = render(Scene((SceneObject((1, 2), "red", "ball"), SceneObject((1, 1), "blue", "tri"))))
    assert reward_composition(good, payload).sub_scores["relation"] == 1.0
    rec = reward_composition(swapped, payload)
    assert rec.sub_scores["relation"] == 0.0 and rec.score == pytest.approx(6 / 7)


def test_noise_grid_strict_zero():
    rng = stream(0, "noise-reward")
    payload = {"objects": [{"count": 3, "color": "cyan", "shape": "tri"}], "relation": None}
    for _ in range(20):
        assert reward_composition(rng.normal(0, 1, (16, 16, 4)), payload, strict=True).score == 0.0


def test_text_reward():
    words = ["ab", "c"]
    assert reward_text(render(Scene((), "ab c")), words).score == 1.0
    rec = reward_text(render(Scene((), "a b")), ["a", "b", "c", "d"])
    assert rec.score == 0.5
    empty = reward_text(render(Scene()), ["abc"])
    assert empty.score == 0.0 and empty.sub_scores["ned"] == 1.0 and empty.sub_scores["ned_similarity"] == 0.0
    with pytest.raises(ContractError):
        reward_text(render(Scene()), [])


def test_edit_reward_cosine():
    rng = stream(4, "cosine")
    g = rng.normal(size=(16, 16, 4))
    assert reward_edit(g, g).score == pytest.approx(1.0, abs=1e-15)
    assert reward_edit(g, -g).score == pytest.approx(0.0, abs=1e-15)
    for _ in range(50):
        a, b = rng.normal(size=(16, 16, 4)), rng.normal(size=(16, 16, 4))
        dot = sum(float(x) * float(y) for x, y in zip(a.ravel(), b.ravel()))
        na = math.sqrt(sum(float(x) ** 2 for x in a.ravel()))
        nb = math.sqrt(sum(float(y) ** 2 for y in b.ravel()))
        assert abs(reward_edit(a, b).score - (dot / (na * nb) + 1) / 2) <= 1e-12
    zero = reward_edit(np.zeros((16, 16, 4)), g)
    assert zero.score == 0.0 and zero.degenerate
    with pytest.raises(ShapeError):
        reward_edit(g, g[:8])


def test_reasoning_expansion_beats_literal_for_every_key():
    table = KnowledgeTable()
    for split in ("train", "held-out"):
        keys = table.keys(split)
        for t in (make_task("reasoning", split, i, table) for i in range(len(keys))):
            good = reward_reasoning(render(t.target), t.payload).score
            lit = reward_reasoning(render(Scene.from_json(t.payload["literal"])), t.payload).score
            assert good == 1.0 and lit < good
    assert reward_reasoning(render(Scene()), {"objects": []}, malformed=True).score == 0.0


def test_reflection_reward():
    assert reward_reflection(["a", "b"], ["a", "b"]).score == 1.0
    assert reward_reflection(["a", "b", "c"], ["a", "b", "d"]).score == pytest.approx(2 / 3, abs=1e-15)
    assert reward_reflection(["a"], []).score == 0.0
    both = reward_reflection([], [])
    assert both.score == 1.0 and both.degenerate


def test_route_reward():
    t = make_task("reflection", "train", 3)
    rec = route_reward("reflection", RolloutArtifacts(t.payload, response=list(t.payload["response"])))
    assert rec.score == 1.0 and rec.scenario == "reflection"
    for sc in ("composition", "reasoning", "text-render", "edit", "reflection"):
        task = make_task(sc, "train", 1)
        assert route_reward(sc, RolloutArtifacts(task.payload, malformed=True)).score == 0.0
    c = make_task("composition", "train", 2)
    direct = reward_composition(render(c.target), c.payload)
    routed = route_reward("composition", RolloutArtifacts(c.payload, grid=render(c.target)))
    assert routed.sub_scores == direct.sub_scores
    e = make_task("edit", "train", 2)
    assert route_reward("edit", RolloutArtifacts(e.payload, grid=render(e.target))).score == pytest.approx(1.0)
    with pytest.raises(ContractError):
        route_reward("painting", RolloutArtifacts({}))
    with pytest.raises(ContractError):
        route_reward("composition", RolloutArtifacts(c.payload))
