import numpy as np
import pytest

from thinkgen_lab.autodiff import stream
from thinkgen_lab.autodiff import tensor as T
from thinkgen_lab.autodiff.gradcheck import grad_check
from thinkgen_lab.autodiff.nn import AdamW
from thinkgen_lab.autodiff.tensor import Tensor, backward
import thinkgen_lab.grpo as grpo
from thinkgen_lab.checks import run_bandit
from thinkgen_lab.errors import ContractError
from thinkgen_lab.grpo import (
    GrpoConfig, RolloutGroup, compute_advantages, dit_grpo_step, grpo_loss, mllm_grpo_step, run_grpo_stage,
    set_trainable, surrogate_term, token_kl,
)
from thinkgen_lab.planner import TokenSeq, pad_ids
from thinkgen_lab.system import build_models
from thinkgen_lab.world import make_task

SMALL_PLANNER = dict(d=16, n_layers=2, n_heads=2, context=128)
SMALL_GEN = dict(d=16, n_layers=1, n_heads=2, d_cond=16)


def advantage_oracle(r):
    n = len(r)
    mean = sum(r) / n
    var = sum((x - mean) ** 2 for x in r) / n
    if var == 0:
        return [0.0] * n
    return [(x - mean) / max(var**0.5, 1e-8) for x in r]


def test_advantages_match_oracle_on_1000_groups():
    rng = stream(0, "adv")
    for i in range(1000):
        g = int(rng.integers(2, 25))
        r = rng.random(g) if i % 3 else rng.integers(0, 3, g).astype(float)
        assert np.allclose(compute_advantages(r), advantage_oracle(list(r)), rtol=0, atol=1e-9)


def test_advantage_hand_values():
    assert np.allclose(compute_advantages([1, 2, 3]), [-1.2247, 0, 1.2247], atol=1e-4)
    assert np.array_equal(compute_advantages([0.4] * 8), np.zeros(8))
    a = compute_advantages(stream(1).random(8))
    assert abs(a.sum()) < 1e-9 and abs(a.std() - 1) < 1e-6
    with pytest.raises(ContractError):
        compute_advantages([1.0])


def test_clip_hand_cases():
    assert surrogate_term(1.5, 1.0, 0.2) == 1.2
    assert surrogate_term(0.5, -1.0, 0.2) == -0.8
    new = Tensor(np.log([[1.5], [0.5]]))
    out = grpo_loss(new, np.zeros((2, 1)), np.array([1.0, -1.0]), np.ones((2, 1)), 0.2)
    assert abs(-out.loss.data * 2 - (1.2 - 0.8)) < 1e-12
    assert out.clip_frac == 1.0


def test_config_validation():
    for bad in (dict(clip_eps=0.0), dict(clip_eps=1.0), dict(beta=-1), dict(n1=1), dict(n2=1)):
        with pytest.raises(ContractError):
            GrpoConfig(**bad)


def test_loss_rejects_misaligned_inputs():
    with pytest.raises(ContractError):
        grpo_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 2)), np.zeros(2), np.ones((2, 3)))
    with pytest.raises(ContractError):
        grpo_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(3), np.ones((2, 3)))
    with pytest.raises(ContractError):
        grpo_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(2), np.ones((2, 3)), beta=0.1)


def three_token_policy(theta):
    """Per-position logits for a 3-token vocabulary; theta is (positions, 3)."""
    return T.log_softmax(theta, axis=-1)


def test_on_policy_gradient_equals_reinforce_oracle():
    rng = stream(2, "pg")
    logits = rng.standard_normal((4, 3))
    tokens = np.array([[0, 2, 1], [1, 1, 0], [2, 0, 0], [0, 1, 2]])  # 4 trajectories x 3 steps
    lengths = np.array([3, 2, 3, 1])
    mask = (np.arange(3)[None] < lengths[:, None]).astype(float)
    adv = np.array([0.7, -1.1, 0.3, 0.1])
    # policy: token distribution depends only on the step index; theta is (3 steps, 3 tokens)
    theta = Tensor(logits[:3].copy(), requires_grad=True)
    logp = three_token_policy(theta)
    new = T.gather(T.reshape(logp, (1, 3, 3)) + Tensor(np.zeros((4, 3, 3))), tokens[:, :, None], axis=-1)
    new = new.reshape(4, 3)
    out = grpo_loss(new, new.data.copy(), adv, mask)
    backward(out.loss)
    # oracle: -(1 / sum|o|) sum_i A_i sum_t d log pi(a_it | t) / d theta
    p = np.exp(logits[:3] - logits[:3].max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = np.zeros((3, 3))
    for i in range(4):
        for t in range(lengths[i]):
            onehot = np.eye(3)[tokens[i, t]]
            want[t] += adv[i] * (onehot - p[t])
    want *= -1.0 / lengths.sum()
    assert np.allclose(theta.grad, want, rtol=0, atol=1e-8)


def test_loss_gradient_matches_finite_differences():
    rng = stream(3, "fd")
    tokens = rng.integers(0, 3, size=(3, 4))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], dtype=float)
    adv = np.array([1.3, -0.4, -0.9])
    ref = rng.standard_normal((4, 3))
    ref = ref - np.log(np.exp(ref).sum(axis=1, keepdims=True))
    theta0 = rng.standard_normal((4, 3))
    # old log-probs chosen so that some ratios sit outside the clip range
    old_theta = theta0 + rng.normal(0, 0.6, theta0.shape)
    old_lp = old_theta - np.log(np.exp(old_theta).sum(axis=1, keepdims=True))
    old = np.take_along_axis(np.broadcast_to(old_lp, (3, 4, 3)), tokens[:, :, None], axis=-1)[..., 0]

    def loss_of(p):
        lp = T.log_softmax(p[0], axis=-1)
        full = T.reshape(lp, (1, 4, 3)) + Tensor(np.zeros((3, 4, 3)))
        new = T.gather(full, tokens[:, :, None], axis=-1).reshape(3, 4)
        kl = token_kl(full, np.broadcast_to(ref, (3, 4, 3)))
        return grpo_loss(new, old, adv, mask, 0.2, 0.05, kl).loss

    report = grad_check(loss_of, [theta0])
    assert report.worst <= 1e-5


def test_clip_fraction_is_zero_right_after_refresh():
    lp = Tensor(stream(5).standard_normal((3, 4)))
    out = grpo_loss(lp, lp.data.copy(), np.array([1.0, -1.0, 0.5]), np.ones((3, 4)))
    assert out.clip_frac == 0.0


def test_exact_kl_matches_direct_sum():
    rng = stream(4, "kl")
    a = rng.standard_normal((2, 3, 5))
    b = rng.standard_normal((2, 3, 5))
    la = a - np.log(np.exp(a).sum(-1, keepdims=True))
    lb = b - np.log(np.exp(b).sum(-1, keepdims=True))
    want = (np.exp(la) * (la - lb)).sum(-1)
    assert np.allclose(token_kl(Tensor(la), lb).data, want, atol=1e-14)
    assert np.allclose(token_kl(Tensor(la), la).data, 0.0, atol=1e-14)


def test_rollout_group_lengths_must_agree():
    with pytest.raises(ContractError):
        RolloutGroup("t", [1, 2], np.zeros(2), np.zeros(3), ("n",))
    assert RolloutGroup("t", [1, 2], np.zeros(2), np.zeros(2), ("n",)).size == 2


def test_bandit_converges_quickly():
    run = run_bandit(0)
    assert run.steps_to_target is not None and run.steps_to_target < 500


@pytest.fixture()
def models():
    return build_models(0, SMALL_PLANNER, SMALL_GEN)


def test_reflection_groups_never_call_the_generator(models, monkeypatch):
    monkeypatch.setattr(grpo, "sample_batch", lambda *a, **k: pseudo_rollouts(models, a[2], a[3]))
    cfg = GrpoConfig(max_new=6, tasks_per_step=2, beta=0.0)
    tasks = [make_task("reflection", "train", i) for i in range(2)]
    set_trainable(models, ("planner",))
    opt = AdamW(models.params_for(("planner",)))
    models.generator.calls = 0
    m = mllm_grpo_step(models, tasks, cfg, opt, None, 0, 0)
    assert m["skipped_groups"] == 0
    assert models.generator.calls == 0
    mllm_grpo_step(models, [make_task("composition", "train", 0)], cfg, opt, None, 1, 0)
    assert models.generator.calls > 0


def test_group_members_share_start_noise(models, monkeypatch):
    seen = []
    real = grpo._ode

    def spy(m, cond, refs, noise, cfg):
        seen.append(noise.copy())
        return real(m, cond, refs, noise, cfg)

    monkeypatch.setattr(grpo, "_ode", spy)
    tasks = [make_task("composition", "train", i) for i in range(2)]
    vocab = models.vocab
    seqs = []
    for t in tasks:
        ids = vocab.encode(["[SYS]", *t.prompt, "<think>", "</think>", *t.prompt, "<eos>"])
        seqs += [TokenSeq.marked(vocab, ids, prompt_len=len(t.prompt) + 2)] * 3
    with T.no_grad():
        st = models.planner.hidden(pad_ids(seqs, vocab.pad))
    r = grpo.score_rollouts(models, tasks, seqs, 3, [st[-2].data, st[-1].data], GrpoConfig(rollout_steps=2), 0,
                            ("u", 0))
    noise = seen[0]
    assert np.array_equal(noise[0], noise[1]) and np.array_equal(noise[1], noise[2])
    assert not np.array_equal(noise[0], noise[3])
    # identical text and identical noise -> identical rewards
    assert r[0] == r[1] == r[2]


def test_planner_and_generator_cannot_train_together(models):
    with pytest.raises(ContractError):
        run_grpo_stage(models, "mllm", 1, GrpoConfig(), 0, trainable=("planner", "generator"))
    set_trainable(models, ("generator",))
    with pytest.raises(ContractError):
        mllm_grpo_step(models, [make_task("composition", "train", 0)], GrpoConfig(), None, None, 0, 0)
    set_trainable(models, ("planner",))
    with pytest.raises(ContractError):
        dit_grpo_step(models, [make_task("composition", "train", 0)], GrpoConfig(), None, None, 0, 0)


def test_dit_step_rejects_other_scenarios(models):
    set_trainable(models, ("generator",))
    with pytest.raises(ContractError):
        dit_grpo_step(models, [make_task("edit", "train", 0)], GrpoConfig(), None, None, 0, 0)


def test_stage_freezes_the_other_module(models):
    cfg = GrpoConfig(max_new=8, tasks_per_step=2, n1=2)
    before = models.hashes()
    run = run_grpo_stage(models, "mllm", 2, cfg, 0, scenario="reasoning")
    after = models.hashes()
    assert all(before[k] == after[k] for k in before if not k.startswith("planner."))
    assert run.changed <= {"planner"}
    assert len(run.metrics) == 2
    assert set(run.metrics[0]) == {"step", "stage", "scenario", "mean_reward", "mean_cot_len", "clip_frac", "kl",
                                   "skipped_groups"}


def test_baseline_matches_the_rewards_of_a_real_run(models):
    cfg = GrpoConfig(max_new=8, tasks_per_step=2, n1=2, rollout_steps=2)
    before = models.hashes()
    base = grpo.mllm_baseline(models, cfg, 3, "composition", [0, 1])
    assert models.hashes() == before
    set_trainable(models, ("planner",))
    # a zero learning rate keeps the policy fixed, so each step sees the baseline policy
    cfg0 = GrpoConfig(max_new=8, tasks_per_step=2, n1=2, rollout_steps=2, lr_planner=0.0)
    run = run_grpo_stage(models, "mllm", 2, cfg0, 3, scenario="composition")
    assert [m["mean_reward"] for m in run.metrics] == base


def pseudo_rollouts(models, prompts, rngs, *a, **k):
    """Stand-in planner sampler: close the think block at once and repeat the prompt."""
    vocab = models.vocab
    out = []
    for p in prompts:
        body = [*p.ids[1:-1], vocab.end_think, *p.ids[1:-1], vocab.eos]
        out.append(TokenSeq.marked(vocab, [*p.ids, *body], prompt_len=len(p), logps=(0.0,) * len(body)))
    return out


def test_degenerate_dit_group_is_skipped(models, monkeypatch):
    monkeypatch.setattr(grpo, "sample_batch", lambda *a, **k: pseudo_rollouts(models, a[2], a[3]))
    set_trainable(models, ("generator",))
    opt = AdamW(models.params_for(("generator",)))
    before = models.hashes()
    cfg = GrpoConfig(sigma_scale=1e-12, rollout_steps=4, n2=4)
    m = dit_grpo_step(models, [make_task("composition", "train", 3)], cfg, opt, None, 0, 0)
    assert m["skipped_groups"] == 1
    assert models.hashes() == before


def test_dit_step_updates_only_the_generator(models, monkeypatch):
    monkeypatch.setattr(grpo, "sample_batch", lambda *a, **k: pseudo_rollouts(models, a[2], a[3]))
    set_trainable(models, ("generator",))
    # a non-zero output head so trajectories (and rewards) differ across the group
    models.generator.out.weight.data = stream(1, "w").normal(0, 0.5, models.generator.out.weight.shape)
    opt = AdamW(models.params_for(("generator",)))
    before = models.hashes()
    cfg = GrpoConfig(sigma_scale=3.0, rollout_steps=4, n2=6, dit_scenarios=("text-render",))
    for step in range(3):
        m = dit_grpo_step(models, [make_task("text-render", "train", step)], cfg, opt, None, step, 0)
    after = models.hashes()
    changed = {k for k in before if before[k] != after[k]}
    assert changed and all(k.startswith("generator.") for k in changed)
    assert 0.0 <= m["clip_frac"] <= 1.0
