"""Group-relative policy optimisation for the planner (MLLM-GRPO) and the generator (DiT-GRPO)."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import AdamW
from .autodiff.rng import stream
from .autodiff.tensor import Tensor, backward
from .bridge import ConditionBatch
from .errors import ContractError
from .generator import active_steps, default_sigmas, initial_noise, ode_sample, sde_sample, score_trajectory
from .planner import TokenSeq, sample_batch, score_batch
from .rewards import RolloutArtifacts, needs_generator, route_reward
from .system import Models, changed_groups, conditions, rl_prompts, task_refs
from .world import SCENARIOS, Task, make_task

DEFAULT_MIXTURE = {"composition": 5.0, "reasoning": 10.0, "text-render": 3.0, "edit": 3.0, "reflection": 3.0}


@dataclass
class GrpoConfig:
    clip_eps: float = 0.2
    beta: float = 0.01
    beta_dit: float = 0.0
    n1: int = 8
    n2: int = 24
    adv_eps: float = 1e-8
    lr_planner: float = 1e-4
    lr_generator: float = 2e-5
    steps_mllm: int = 300
    steps_dit: int = 300
    mixture: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    dit_scenarios: tuple[str, ...] = ("composition", "text-render")
    tasks_per_step: int = 8
    dit_tasks_per_step: int = 1
    temperature: float = 1.0
    max_new: int = 64
    rollout_steps: int = 10
    cfg: float = 4.0
    cutoff: float = 0.6
    sigma_scale: float = 0.1
    active_frac: float = 0.6
    inner_epochs: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ContractError("clip epsilon must lie in (0, 1)")
        if self.beta < 0 or self.beta_dit < 0:
            raise ContractError("KL coefficients must be non-negative")
        if self.n1 < 2 or self.n2 < 2:
            raise ContractError("group sizes must be at least 2")
        if self.inner_epochs < 1:
            raise ContractError("inner_epochs must be >= 1")


# -- advantages and the clipped objective ----------------------------------------

def compute_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """``(R - mean) / max(std, eps)`` with the population std.

    A group whose rewards are all identical gets exact zeros.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("a group needs at least two rewards")
    if r.max() == r.min():
        return np.zeros_like(r)
    mu = r.mean()
    return (r - mu) / max(float(np.sqrt(((r - mu) ** 2).mean())), eps)


def surrogate_term(ratio: float, advantage: float, eps: float) -> float:
    """``min(r A, clip(r, 1 - eps, 1 + eps) A)`` for scalars."""
    return min(ratio * advantage, min(max(ratio, 1.0 - eps), 1.0 + eps) * advantage)


@dataclass
class LossOut:
    loss: Tensor
    clip_frac: float
    kl: float


def grpo_loss(new_logps: Tensor, old_logps: np.ndarray, advantages: np.ndarray, mask: np.ndarray,
              clip_eps: float = 0.2, beta: float = 0.0, kl: Tensor | None = None) -> LossOut:
    """Negative clipped-surrogate objective with an optional KL penalty.

    All per-token arrays are ``(B, G)``; ``mask`` marks real tokens so that
    ``mask.sum(1)`` is ``|o_i|``. The sum over tokens is divided by
    ``sum_i |o_i|``; ``kl`` is a differentiable per-token KL to the reference.
    """
    old = np.asarray(old_logps, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if new_logps.shape != old.shape or old.shape != mask.shape or adv.shape != (old.shape[0],):
        raise ContractError(f"misaligned inputs: new {new_logps.shape}, old {old.shape}, mask {mask.shape}, "
                            f"advantages {adv.shape}")
    if beta > 0 and (kl is None or kl.shape != mask.shape):
        raise ContractError("a positive beta needs a per-token KL tensor shaped like the mask")
    denom = mask.sum()
    if denom <= 0:
        raise ContractError("no tokens to optimise")
    # padded slots use the new value as "old" so their ratio is exactly 1
    old = np.where(mask > 0, old, new_logps.data)
    ratio = T.exp(new_logps - old)
    a = adv[:, None]
    term = T.minimum(ratio * a, T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a)
    obj = (term * mask).sum() * (1.0 / denom)
    kl_mean = 0.0
    if kl is not None:
        kl_mean = float((kl.data * mask).sum() / denom)
        if beta > 0:
            obj = obj - (kl * mask).sum() * (beta / denom)
    r = ratio.data
    clip_frac = float(((np.abs(r - 1.0) > clip_eps) * mask).sum() / denom)
    return LossOut(-obj, clip_frac, kl_mean)


def token_kl(log_probs: Tensor, ref_log_probs: np.ndarray) -> Tensor:
    """Exact ``KL(pi || pi_ref)`` per token from full log-distributions ``(B, G, V)``."""
    return (T.exp(log_probs) * (log_probs - ref_log_probs)).sum(axis=-1)


def gaussian_kl(means: Tensor, ref_means: np.ndarray, sigmas: np.ndarray) -> Tensor:
    """KL between equal-variance isotropic Gaussians: ``|mu - mu_ref|^2 / (2 sigma^2)`` per leading index."""
    diff = means - ref_means
    lead = means.shape[:2]
    sq = (diff * diff).reshape(*lead, -1).sum(axis=-1)
    return sq * (0.5 / np.asarray(sigmas) ** 2)


# -- rollout groups --------------------------------------------------------------

@dataclass
class RolloutGroup:
    task_id: str
    trajectories: list
    rewards: np.ndarray
    advantages: np.ndarray
    noise_id: tuple

    def __post_init__(self):
        if not len(self.trajectories) == len(self.rewards) == len(self.advantages):
            raise ContractError("group arrays must have equal length")

    @property
    def size(self) -> int:
        return len(self.trajectories)


def score_rollouts(models: Models, tasks: Sequence[Task], seqs: Sequence[TokenSeq], group: int, states,
                   cfg: GrpoConfig, seed: int, noise_path: tuple) -> np.ndarray:
    """Reward for every rollout; all members of a group share the group's start noise.

    Reflection rollouts are scored from text alone and never reach the generator.
    """
    rewards = np.zeros(len(seqs))
    vocab = models.vocab
    image_rows = [i for i, s in enumerate(seqs) if not s.malformed and needs_generator(tasks[i // group].scenario)]
    grids = {}
    if image_rows:
        sub = [seqs[i] for i in image_rows]
        st = [states[-2][image_rows], states[-1][image_rows]]
        with T.no_grad():
            cond = conditions(models, sub, st)
        geo = models.generator.cfg.geometry
        noise = np.stack([initial_noise(geo, 1, seed, *noise_path, i // group)[0] for i in image_rows])
        refs = task_refs([tasks[i // group] for i in image_rows])
        with T.no_grad():
            x = _ode(models, cond, refs, noise, cfg)
        grids = {row: x[j] for j, row in enumerate(image_rows)}
    for i, s in enumerate(seqs):
        task = tasks[i // group]
        art = RolloutArtifacts(task.payload, grid=grids.get(i), malformed=s.malformed)
        if task.scenario == "reflection" and not s.malformed:
            art.response = vocab.decode(s.instruction(vocab))
        rewards[i] = route_reward(task.scenario, art).score
    return rewards


def _ode(models: Models, cond, refs, noise, cfg: GrpoConfig) -> np.ndarray:
    x, _ = ode_sample(models.generator, cond, refs, cfg.rollout_steps, cfg.cfg, cfg.cutoff, noise)
    return x


def _metrics(step: int, stage: str, scenario: str, rewards: np.ndarray, cot: Sequence[int], clip_frac: float,
             kl: float, skipped: int) -> dict:
    return {"step": step, "stage": stage, "scenario": scenario, "mean_reward": float(np.mean(rewards)),
            "mean_cot_len": float(np.mean(cot)), "clip_frac": clip_frac, "kl": kl, "skipped_groups": skipped}


def mllm_rollouts(models: Models, tasks: Sequence[Task], cfg: GrpoConfig, step: int, seed: int):
    """Sample and reward N1 planner rollouts per task; returns ``(seqs, scored, rewards)``."""
    g = cfg.n1
    prompts = [p for p in rl_prompts(models, tasks) for _ in range(g)]
    rngs = [stream(seed, "mllm-rollout", step, i // g, i % g) for i in range(len(prompts))]
    seqs = sample_batch(models.planner, models.vocab, prompts, rngs, cfg.temperature, cfg.max_new)
    # one differentiable scoring pass also yields the hidden states the bridge needs
    sc = score_batch(models.planner, models.vocab, seqs, cfg.temperature)
    states = [sc.states[-2].data, sc.states[-1].data]
    return seqs, sc, score_rollouts(models, tasks, seqs, g, states, cfg, seed, ("mllm", step))


def mllm_baseline(models: Models, cfg: GrpoConfig, seed: int, scenario: str | None, steps: Sequence[int]) -> list[float]:
    """Mean rollout reward per step of an MLLM-GRPO run, drawn without any update.

    Tasks, sampling streams and generator settings match what ``run_grpo_stage``
    would use at those step indices, so the numbers are directly comparable.
    """
    out = []
    for step in steps:
        tasks = rl_tasks(choose_scenario(cfg, "mllm", step, seed, scenario), cfg.tasks_per_step, "mllm", step,
                         seed, models)
        with T.no_grad():
            out.append(float(np.mean(mllm_rollouts(models, tasks, cfg, step, seed)[2])))
    return out


def mllm_grpo_step(models: Models, tasks: Sequence[Task], cfg: GrpoConfig, opt: AdamW, ref_planner, step: int,
                   seed: int, lr: float | None = None) -> dict:
    """One MLLM-GRPO update: N1 planner rollouts per task, generator frozen."""
    if any(p.requires_grad for p in models.generator.parameters()):
        raise ContractError("the generator must be frozen during MLLM-GRPO")
    g = cfg.n1
    vocab, planner = models.vocab, models.planner
    seqs, sc, rewards = mllm_rollouts(models, tasks, cfg, step, seed)
    adv = np.zeros(len(seqs))
    mask = sc.mask.copy()
    skipped = 0
    for j in range(len(tasks)):
        sl = slice(j * g, (j + 1) * g)
        if all(s.malformed for s in seqs[sl]):
            skipped += 1
            mask[sl] = 0.0
            continue
        adv[sl] = compute_advantages(rewards[sl], cfg.adv_eps)
    clip_frac = kl_val = 0.0
    if mask.any():
        old = _pad_logps(seqs, mask.shape[1])
        ref_lp = None
        if cfg.beta > 0:
            with T.no_grad():
                ref_lp = score_batch(ref_planner, vocab, seqs, cfg.temperature).log_probs.data
        for epoch in range(cfg.inner_epochs):
            if epoch:
                sc = score_batch(planner, vocab, seqs, cfg.temperature)
            kl = token_kl(sc.log_probs, ref_lp) if ref_lp is not None else None
            out = grpo_loss(sc.logps, old, adv, mask, cfg.clip_eps, cfg.beta, kl)
            opt.zero_grad()
            backward(out.loss)
            opt.step(lr)
            clip_frac, kl_val = out.clip_frac, out.kl
        planner.version = f"mllm-{step}"
    return _metrics(step, "mllm", tasks[0].scenario, rewards, [s.think_len for s in seqs], clip_frac, kl_val, skipped)


def _pad_logps(seqs: Sequence[TokenSeq], g: int) -> np.ndarray:
    out = np.zeros((len(seqs), g))
    for i, s in enumerate(seqs):
        out[i, :s.length] = s.logps
    return out


def dit_grpo_step(models: Models, tasks: Sequence[Task], cfg: GrpoConfig, opt: AdamW, ref_generator, step: int,
                  seed: int, lr: float | None = None) -> dict:
    """One DiT-GRPO update: a single frozen-planner rollout per task, N2 SDE trajectories each."""
    if any(p.requires_grad for p in models.planner.parameters()):
        raise ContractError("the planner must be frozen during DiT-GRPO")
    for t in tasks:
        if t.scenario not in cfg.dit_scenarios:
            raise ContractError(f"DiT-GRPO covers {cfg.dit_scenarios}, not {t.scenario!r}")
    g = cfg.n2
    vocab, gen = models.vocab, models.generator
    prompts = rl_prompts(models, tasks)
    seqs = sample_batch(models.planner, vocab, prompts, [stream(seed, "dit-plan", step, i) for i in range(len(tasks))],
                        cfg.temperature, cfg.max_new)
    ok = [i for i, s in enumerate(seqs) if not s.malformed]
    skipped = len(tasks) - len(ok)
    rewards_all: list[float] = [0.0] * (skipped * g)
    clip_frac = kl_val = 0.0
    if ok:
        with T.no_grad():
            base = conditions(models, [seqs[i] for i in ok])
        rep = np.repeat(np.arange(len(ok)), g)
        cond = ConditionBatch(Tensor(base.states.data[rep]), base.valid[rep])
        refs = task_refs([tasks[ok[j]] for j in rep])
        geo = gen.cfg.geometry
        # one start latent per group; members differ only through their SDE increments
        noise = np.concatenate([initial_noise(geo, g, seed, "dit", step, i, shared=True) for i in ok])
        sig = default_sigmas(cfg.rollout_steps, cfg.sigma_scale)
        traj = sde_sample(gen, cond, refs, cfg.rollout_steps, sig, noise, stream(seed, "dit-eps", step), cfg.cfg,
                          cfg.cutoff, noise_id=("dit", step))
        rewards = np.array([route_reward(tasks[ok[j]].scenario, RolloutArtifacts(tasks[ok[j]].payload,
                                                                                 grid=traj.final[r])).score
                            for r, j in enumerate(rep)])
        rewards_all += list(rewards)
        adv = np.zeros(len(rep))
        keep = np.zeros(len(rep), dtype=bool)
        for j in range(len(ok)):
            sl = slice(j * g, (j + 1) * g)
            a = compute_advantages(rewards[sl], cfg.adv_eps)
            if np.all(a == 0):
                skipped += 1
                continue
            adv[sl], keep[sl] = a, True
        if keep.any():
            n = active_steps(cfg.rollout_steps, cfg.active_frac)
            sub = ConditionBatch(Tensor(cond.states.data[keep]), cond.valid[keep])
            sub_traj = _rows(traj, keep)
            sub_refs = None if refs is None else refs[keep]
            old = sub_traj.logps[:n].T
            mask = np.ones_like(old)
            ref_means = None
            if cfg.beta_dit > 0:
                with T.no_grad():
                    ref_means = score_trajectory(ref_generator, sub_traj, sub, sub_refs, cfg.active_frac).means.data
            for _ in range(cfg.inner_epochs):
                sc = score_trajectory(gen, sub_traj, sub, sub_refs, cfg.active_frac)
                kl = None
                if ref_means is not None:
                    kl = gaussian_kl(sc.means, ref_means, sub_traj.sigmas[:n]).transpose(1, 0)
                out = grpo_loss(sc.logps, old, adv[keep], mask, cfg.clip_eps, cfg.beta_dit, kl)
                opt.zero_grad()
                backward(out.loss)
                opt.step(lr)
                clip_frac, kl_val = out.clip_frac, out.kl
    return _metrics(step, "dit", tasks[0].scenario, np.array(rewards_all) if rewards_all else np.zeros(1),
                    [s.think_len for s in seqs], clip_frac, kl_val, skipped)


def _rows(traj, keep):
    return replace(traj, latents=traj.latents[:, keep], logps=traj.logps[:, keep])


# -- stage alternation -------------------------------------------------------------

STAGE_GROUPS = {"mllm": ("planner",), "dit": ("generator",)}


def set_trainable(models: Models, groups: Sequence[str]) -> None:
    for name, params in models.groups().items():
        for p in params.values():
            p.requires_grad = name in groups


def choose_scenario(cfg: GrpoConfig, stage: str, step: int, seed: int, fixed: str | None = None) -> str:
    if fixed:
        return fixed
    names = list(cfg.dit_scenarios) if stage == "dit" else [k for k in cfg.mixture if cfg.mixture[k] > 0]
    w = np.array([cfg.mixture.get(k, 1.0) for k in names], dtype=np.float64)
    rng = stream(seed, "scenario", stage, step)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def rl_tasks(scenario: str, n: int, stage: str, step: int, seed: int, models: Models) -> list[Task]:
    rng = stream(seed, "rl-tasks", stage, step)
    return [make_task(scenario, "train", int(s), models.table) for s in rng.integers(0, 1 << 30, size=n)]


@dataclass
class StageRun:
    stage: str
    steps: int
    trainable: tuple[str, ...]
    metrics: list[dict]
    changed: set
    ref_hash: str


def run_grpo_stage(models: Models, stage: str, steps: int, cfg: GrpoConfig, seed: int,
                   scenario: str | None = None, trainable: Sequence[str] | None = None,
                   on_step: Callable[[dict], None] | None = None,
                   lr_at: Callable[[int], float] | None = None) -> StageRun:
    """Run one SepGRPO stage with the freeze contract enforced and pi_ref snapshotted at its start.

    ``lr_at(step)`` overrides the constant learning rate from ``cfg`` per step.
    """
    groups = tuple(trainable or STAGE_GROUPS[stage])
    if "planner" in groups and "generator" in groups:
        raise ContractError("planner and generator may not be trained together")
    if scenario is not None and scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}")
    set_trainable(models, groups)
    before = models.hashes()
    ref = copy.deepcopy(models.planner if stage == "mllm" else models.generator)
    ref.set_trainable(False)
    ref_hash = _module_hash(ref)
    opt = AdamW(models.params_for(groups), lr=cfg.lr_planner if stage == "mllm" else cfg.lr_generator)
    metrics = []
    n_tasks = cfg.tasks_per_step if stage == "mllm" else cfg.dit_tasks_per_step
    for step in range(steps):
        sc = choose_scenario(cfg, stage, step, seed, scenario)
        tasks = rl_tasks(sc, n_tasks, stage, step, seed, models)
        lr = lr_at(step) if lr_at else None
        if stage == "mllm":
            m = mllm_grpo_step(models, tasks, cfg, opt, ref, step, seed, lr)
        else:
            m = dit_grpo_step(models, tasks, cfg, opt, ref, step, seed, lr)
        metrics.append(m)
        if on_step:
            on_step(m)
    set_trainable(models, ())
    return StageRun(stage, steps, groups, metrics, changed_groups(before, models.hashes()), ref_hash)


def _module_hash(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.param_hashes().items()):
        h.update(f"{k}:{v}".encode())
    return h.hexdigest()[:16]


def alternate(models: Models, stages: Sequence[str], budgets: Sequence[int], cfg: GrpoConfig, seed: int,
              scenario: str | None = None, on_step=None) -> list[StageRun]:
    """Run SepGRPO stages in order, e.g. ``["mllm", "dit"]``."""
    if len(stages) != len(budgets) or any(b <= 0 for b in budgets):
        raise ContractError("one positive budget per stage is required")
    runs = []
    for st, b in zip(stages, budgets):
        if st not in STAGE_GROUPS:
            raise ContractError(f"unknown SepGRPO stage {st!r}")
        sc = scenario if (scenario is None or st == "mllm" or scenario in cfg.dit_scenarios) else None
        runs.append(run_grpo_stage(models, st, b, cfg, seed, sc, on_step=on_step))
    return runs
