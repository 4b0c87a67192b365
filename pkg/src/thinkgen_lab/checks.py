"""Small self-contained training problems with known answers.

Two sanity problems exercise the RL and flow-matching machinery without the
rest of the system: a two-armed bandit solved by the MLLM-GRPO update, and a
one-dimensional Gaussian-to-Gaussian flow whose optimal velocity field has a
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.nn import AdamW
from .autodiff.rng import stream
from .autodiff.tensor import backward, no_grad
from .generator import FlowGenerator, GenConfig, fm_loss, ode_sample
from .grpo import compute_advantages, grpo_loss
from .planner import PlannerConfig, PlannerPolicy, TokenSeq, Vocab, sample_batch, score_batch

BANDIT_ACTIONS = ("left", "right")


@dataclass
class BanditRun:
    probs: list[float]  # probability of the better arm before each update
    steps_to_target: int | None

    @property
    def final(self) -> float:
        return self.probs[-1]


def bandit_prob(policy: PlannerPolicy, vocab: Vocab, arm: str) -> float:
    prompt = np.array([[vocab.sys]])
    with no_grad():
        z = policy.forward(prompt)[0].data[0, -1]
    p = np.exp(z - z.max())
    return float(p[vocab.index[arm]] / p.sum())


def run_bandit(seed: int, steps: int = 500, group: int = 8, lr: float = 1e-2, pay=(0.8, 0.2),
               target: float = 0.95, stop_at_target: bool = True) -> BanditRun:
    """Two-armed Bernoulli bandit; a rollout is one sampled token after ``[SYS]``.

    Tokens other than the two arms pay 0. Arm 0 (``left``) is the better one.
    """
    vocab = Vocab(BANDIT_ACTIONS)
    policy = PlannerPolicy(PlannerConfig(len(vocab), d=8, n_layers=2, n_heads=2, context=4, zero_head=True), seed)
    opt = AdamW(policy.named_parameters(), lr=lr)
    prompt = TokenSeq((vocab.sys,), prompt_len=1)
    payoff = {vocab.index[a]: p for a, p in zip(BANDIT_ACTIONS, pay)}
    probs, hit = [], None
    for step in range(steps):
        probs.append(bandit_prob(policy, vocab, BANDIT_ACTIONS[0]))
        if hit is None and probs[-1] >= target:
            hit = step
            if stop_at_target:
                break
        rngs = [stream(seed, "bandit", step, i) for i in range(group)]
        seqs = sample_batch(policy, vocab, [prompt] * group, rngs, 1.0, max_new=1)
        coin = stream(seed, "bandit-pay", step).random(group)
        rewards = np.array([float(coin[i] < payoff.get(s.generated[0], 0.0)) for i, s in enumerate(seqs)])
        adv = compute_advantages(rewards)
        if not adv.any():
            continue
        sc = score_batch(policy, vocab, seqs)
        old = np.array([[s.logps[0]] for s in seqs])
        out = grpo_loss(sc.logps, old, adv, sc.mask)
        opt.zero_grad()
        backward(out.loss)
        opt.step()
    if hit is None:
        probs.append(bandit_prob(policy, vocab, BANDIT_ACTIONS[0]))
        if probs[-1] >= target:
            hit = steps
    return BanditRun(probs, hit)


# -- one-dimensional flow ------------------------------------------------------------

ONE_D = GenConfig(height=1, width=1, channels=1, patch=1, d=32, n_layers=2, n_heads=2, d_cond=4, n_freq=8,
                  max_cond_rows=1)


def train_1d_flow(mu: float, steps: int = 1500, batch: int = 256, lr: float = 3e-3, seed: int = 0):
    """Fit ``v(x, t)`` for ``x0 ~ N(0, 1)``, ``x1 ~ N(mu, 1)`` with the null condition; returns the generator."""
    gen = FlowGenerator(ONE_D, seed)
    opt = AdamW(gen.named_parameters(), lr=lr)
    for step in range(steps):
        rng = stream(seed, "flow1d", step)
        x1 = mu + rng.standard_normal((batch, 1, 1, 1))
        loss = fm_loss(gen, x1, gen.uncond(batch), None, rng)
        opt.zero_grad()
        backward(loss)
        opt.step(lr * 0.5 * (1 + np.cos(np.pi * step / steps)))
    return gen


def velocity_1d(gen: FlowGenerator, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    with no_grad():
        return gen(np.asarray(x).reshape(-1, 1, 1, 1), t, gen.uncond(len(x))).data.reshape(-1)


def sample_1d(gen: FlowGenerator, n: int, seed: int = 0, steps: int = 20) -> np.ndarray:
    noise = stream(seed, "flow1d-sample").standard_normal((n, 1, 1, 1))
    x, _ = ode_sample(gen, gen.uncond(n), None, steps, cfg=1.0, cutoff=0.0, noise=noise)
    return x.reshape(-1)
