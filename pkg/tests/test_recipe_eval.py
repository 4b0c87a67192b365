import math

import numpy as np
import pytest

from thinkgen_lab import evaluation
from thinkgen_lab.autodiff import stream
from thinkgen_lab.autodiff.nn import AdamW
from thinkgen_lab.errors import ContractError
from thinkgen_lab.evaluation import (
    EvalSuite, check_disjoint, evaluate, reasoning_suite, scenario_suite, short_prompt_suite,
)
from thinkgen_lab.generator import initial_noise
from thinkgen_lab.recipe import (
    RecipeConfig, StageConfig, check_order, load_models, run_recipe, run_stage, save_models, supervised_step,
    supervised_tasks,
)
from thinkgen_lab.system import build_models, conditions, generate, group_of, pseudo_cot_seqs, target_grids
from thinkgen_lab.world import make_task

SMALL_PLANNER = {"d": 16, "n_layers": 2, "n_heads": 2}
SMALL_GEN = {"d": 16, "n_layers": 1, "n_heads": 2, "d_cond": 16, "n_freq": 4}


def small_models(seed=0, live_head=True):
    m = build_models(seed, SMALL_PLANNER, SMALL_GEN, k=4)
    if live_head:
        # a zero output head blocks every gradient upstream of it
        m.generator.out.weight.data = stream(seed, "head").normal(0, 0.2, m.generator.out.weight.shape)
    return m


def test_stage_config_validation():
    with pytest.raises(ContractError):
        StageConfig(9, 1e-3, 4)
    with pytest.raises(ContractError):
        StageConfig(2, 1e-3, 4, trainable=("planner", "generator"))
    with pytest.raises(ContractError):
        StageConfig(2, 1e-3, 4, schedule="linear")
    assert StageConfig(5, 1e-3, 1).trainable == ("generator",)


def test_cosine_schedule_with_warmup():
    cfg = StageConfig(1, 1.0, 4, "cosine", warmup=10, steps=110)
    assert cfg.lr_at(0) < cfg.lr_at(5) < cfg.lr_at(9) <= 1.0
    # after warmup: half a cosine over the remaining 100 steps
    assert math.isclose(cfg.lr_at(60), 0.5 * (1 + math.cos(math.pi * 0.5)), abs_tol=1e-9)
    assert StageConfig(2, 0.3, 4).lr_at(77) == 0.3


def test_stage_order_checks():
    check_order([StageConfig(1, 1e-3, 2), StageConfig(3, 1e-3, 2)])
    with pytest.raises(ContractError):
        check_order([StageConfig(3, 1e-3, 2), StageConfig(2, 1e-3, 2)])
    with pytest.raises(ContractError):
        check_order([StageConfig(2, 1e-3, 2), StageConfig(2, 1e-3, 2)])


def test_missing_predecessor_is_refused(tmp_path):
    cfg = RecipeConfig(stages=[StageConfig(2, 1e-3, 2, steps=1)], planner=SMALL_PLANNER, generator=SMALL_GEN, k=4)
    with pytest.raises(ContractError):
        run_recipe(cfg, tmp_path / "run")
    m = small_models()
    save_models(m, tmp_path / "ck", stage=0, seed=0)
    with pytest.raises(ContractError):
        run_recipe(cfg, tmp_path / "run", start_from=tmp_path / "ck")


def test_recipe_config_json_round_trip():
    cfg = RecipeConfig(seed=3, planner=SMALL_PLANNER, k=7)
    back = RecipeConfig.from_json(cfg.to_json())
    assert back == cfg


def test_supervised_step_refuses_rl_stages():
    m = small_models()
    opt = AdamW(m.params_for(("generator",)), lr=1e-3)
    tasks = [make_task("composition", "train", 0, m.table)]
    for stage in (0, 4, 5):
        with pytest.raises(ContractError):
            supervised_step(StageConfig(stage, 1e-3, 1), tasks, m, opt, 0, 0)


def test_supervised_tasks_share_a_scenario():
    m = small_models()
    cfg = StageConfig(2, 1e-3, 6, steps=10)
    for step in range(10):
        tasks = supervised_tasks(cfg, step, 0, m)
        assert len(tasks) == 6 and len({t.scenario for t in tasks}) == 1
        assert all(t.split == "train" for t in tasks)


def test_full_condition_dropout_ignores_the_bridge():
    m = small_models()
    opt = AdamW(m.params_for(("generator", "connector")), lr=0.0)
    cfg = StageConfig(2, 0.0, 3, drop_rate=1.0)
    tasks = [make_task("composition", "train", i, m.table) for i in range(3)]
    a = supervised_step(cfg, tasks, m, opt, 0, 0)["loss"]
    m.bridge.connector.proj.weight.data = m.bridge.connector.proj.weight.data + 1.0
    b = supervised_step(cfg, tasks, m, opt, 0, 0)["loss"]
    assert a == b


@pytest.mark.parametrize("stage,groups", [(1, {"connector", "pads"}), (2, {"connector", "generator"}),
                                          (3, {"connector", "generator"})])
def test_supervised_stage_changes_only_its_groups(stage, groups):
    m = small_models()
    rep = run_stage(m, StageConfig(stage, 1e-2, 2, steps=2), seed=0)
    assert rep.ledger_ok
    assert {group_of(n) for n in rep.changed} == groups
    assert all(not p.requires_grad for p in m.params_for(("planner", "pads", "connector", "generator")).values())


def test_rl_stages_follow_the_stage_schedule(monkeypatch):
    import thinkgen_lab.grpo as grpo

    seen = []

    def fake_step(models, tasks, cfg, opt, ref, step, seed, lr=None):
        seen.append(lr)
        return {"step": step}

    monkeypatch.setattr(grpo, "mllm_grpo_step", fake_step)
    m = small_models()
    run_stage(m, StageConfig(4, 1e-3, 1, "cosine", warmup=0, steps=4), seed=0, scenario="composition")
    assert seen[0] == pytest.approx(1e-3) and seen == sorted(seen, reverse=True) and seen[-1] > 0


def test_checkpoint_round_trip_restores_stage(tmp_path):
    m = small_models()
    save_models(m, tmp_path / "ck", stage=2, seed=0)
    back = load_models(tmp_path / "ck", expect_stage=2)
    assert back.hashes() == m.hashes()
    with pytest.raises(ContractError):
        load_models(tmp_path / "ck", expect_stage=3)


def test_prepadding_rows_reach_the_generator():
    m = small_models()
    tasks = short_prompt_suite(2, 0).tasks
    seqs = pseudo_cot_seqs(m, tasks)
    noise = initial_noise(m.generator.cfg.geometry, 2, 0, "pad")
    a = generate(m, conditions(m, seqs), None, noise, steps=3)
    m.bridge.prepad.pads.data = m.bridge.prepad.pads.data + 0.5
    b = generate(m, conditions(m, seqs), None, noise, steps=3)
    assert not np.allclose(a, b)


# -- evaluation -------------------------------------------------------------------------------


def test_reasoning_suite_uses_distinct_held_out_keys():
    m = small_models()
    suite = reasoning_suite(m.table, 40)
    keys = [t.payload["key"] for t in suite.tasks]
    assert len(set(keys)) == 40
    assert not set(keys) & set(m.table.train_keys)
    check_disjoint(suite, m.table)
    with pytest.raises(ContractError):
        reasoning_suite(m.table, len(m.table.held_out_keys) + 1)


def test_disjointness_violations_are_refused():
    m = small_models()
    train = make_task("composition", "train", 1, m.table)
    with pytest.raises(ContractError):
        check_disjoint(EvalSuite("x", "composition", [train]), m.table)
    suite = scenario_suite("edit", 3, table=m.table)
    with pytest.raises(ContractError):
        check_disjoint(suite, m.table, train_ids=[suite.tasks[1].task_id])


def test_suite_validation():
    with pytest.raises(ContractError):
        EvalSuite("x", "poetry", [make_task("edit", "held-out", 0)])
    with pytest.raises(ContractError):
        EvalSuite("x", "edit", [make_task("edit", "held-out", 0)], think="maybe")
    with pytest.raises(ContractError):
        EvalSuite("x", "edit", [])


def test_short_prompt_suite_is_single_object():
    s = short_prompt_suite(10, seed=2)
    assert all(len(t.payload["objects"]) == 1 and len(t.prompt) == 3 for t in s.tasks)


def test_perfect_generator_scores_one(monkeypatch):
    """With the generator swapped for the ground-truth renderer every image suite scores 1."""
    m = small_models()

    def oracle(models, cond, refs, noise, *a):
        return target_grids(current)

    monkeypatch.setattr(evaluation, "generate", oracle)
    for sc in ("composition", "text-render", "edit", "reasoning"):
        suite = scenario_suite(sc, 6, table=m.table, think="off")
        current = suite.tasks
        out = evaluate(m, suite)
        assert out["mean_reward"] == pytest.approx(1.0, abs=1e-12), sc
        assert out["malformed"] == 0.0 and out["mean_cot_len"] == 0.0


def test_think_off_never_samples_the_planner(monkeypatch):
    m = small_models()

    def boom(*a, **k):
        raise AssertionError("planner sampled with think off")

    monkeypatch.setattr(evaluation, "sample_batch", boom)
    out = evaluate(m, scenario_suite("composition", 3, think="off"), steps=2)
    assert out["think"] == "off" and out["n"] == 3


def test_evaluation_is_reproducible():
    m = small_models()
    suite = scenario_suite("text-render", 4, seed=1, table=m.table)
    a = evaluate(m, suite, seed=5, steps=3, max_new=8)
    b = evaluate(m, suite, seed=5, steps=3, max_new=8)
    assert a == b
