"""The five-stage recipe: supervised stages 1-3, then SepGRPO stages 4-5.

A stage-0 pass pretrains the planner on synthetic transcripts first, standing
in for the pretrained language model the recipe assumes. Every stage records
which parameters changed (by content hash) so the freeze contract can be
audited after the fact.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import AdamW, lr_at
from .autodiff.rng import stream
from .autodiff.tensor import backward
from .bridge import CUT
from .checkpoint import load_module, read_manifest, save_module
from .corpus import CORPUS_MIX, sample_transcripts
from .errors import ContractError
from .evaluation import run_suites
from .generator import drop_conditions, fm_loss
from .grpo import GrpoConfig, run_grpo_stage, set_trainable
from .planner import PlannerPolicy
from .plots import plot_metrics
from .system import (
    Models, build_models, changed_params, conditions, group_of, pseudo_cot_seqs, target_grids, task_refs,
)
from .world import Task, make_task

SUPERVISED_MIX = {"composition": 0.5, "text-render": 0.3, "edit": 0.2}
FINETUNE_MIX = {"composition": 0.6, "text-render": 0.2, "edit": 0.2}
STAGE_TRAINABLE = {
    0: ("planner",),
    1: ("connector", "pads"),
    2: ("generator", "connector"),
    3: ("generator", "connector"),
    4: ("planner",),
    5: ("generator",),
}


@dataclass
class StageConfig:
    stage: int
    lr: float
    batch_size: int
    schedule: str = "constant"
    warmup: int = 0
    steps: int = 100
    trainable: tuple[str, ...] = ()
    drop_rate: float = 0.0
    resolution: str = "grid16"  # one grid size; kept so configs keep the same shape
    mixture: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ContractError(f"unknown stage {self.stage}")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch size >= 1")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ContractError("drop rate must lie in [0, 1]")
        self.trainable = tuple(self.trainable or STAGE_TRAINABLE[self.stage])
        if "planner" in self.trainable and "generator" in self.trainable:
            raise ContractError("planner and generator may not be trained together")
        self.mixture = dict(self.mixture)

    def lr_at(self, step: int) -> float:
        return lr_at(step, self.lr, self.schedule, self.warmup, self.steps)


def default_stages(scale: float = 1.0) -> list[StageConfig]:
    """Stage schedule at desk scale; ``scale`` multiplies every supervised budget.

    Full-size budgets of the reference recipe (47k / 100k / 11k steps) are far
    out of reach on one core.
    """
    def n(x):
        return max(1, int(round(x * scale)))

    return [
        StageConfig(0, 3e-3, 32, "cosine", n(100), n(3000), mixture=dict(CORPUS_MIX)),
        StageConfig(1, 1e-3, 32, "cosine", n(50), n(600), drop_rate=0.1, mixture=dict(SUPERVISED_MIX)),
        StageConfig(2, 2e-3, 32, "cosine", n(100), n(3000), drop_rate=0.1, mixture=dict(SUPERVISED_MIX)),
        StageConfig(3, 3e-4, 32, "constant", 0, n(1000), drop_rate=0.0001, mixture=dict(FINETUNE_MIX)),
        StageConfig(4, 5e-5, 8, "constant", 0, 300),
        StageConfig(5, 2e-5, 1, "constant", 0, 300),
    ]


# -- stage 0: planner pretraining --------------------------------------------------

def transcript_batch(models: Models, transcripts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(ids, targets, mask)`` for next-token training; ``mask`` selects trained positions."""
    vocab = models.vocab
    seqs = [vocab.encode(t.tokens) for t in transcripts]
    width = max(len(s) for s in seqs) - 1
    ids = np.full((len(seqs), width), vocab.pad, dtype=np.int64)
    targets = np.zeros_like(ids)
    mask = np.zeros(ids.shape)
    for i, (s, tr) in enumerate(zip(seqs, transcripts)):
        ids[i, :len(s) - 1] = s[:-1]
        targets[i, :len(s) - 1] = s[1:]
        mask[i, tr.loss_from:len(s) - 1] = 1.0
    return ids, targets, mask


def lm_loss(planner: PlannerPolicy, ids: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    logp = T.log_softmax(planner.forward(ids)[0], axis=-1)
    picked = T.gather(logp, targets[:, :, None], axis=-1).reshape(*targets.shape)
    return (picked * mask).sum() * (-1.0 / mask.sum())


def pretrain_step(models: Models, cfg: StageConfig, opt: AdamW, step: int, seed: int) -> dict:
    rng = stream(seed, "stage0", step)
    batch = sample_transcripts(rng, cfg.batch_size, models.table, cfg.mixture or None)
    loss = lm_loss(models.planner, *transcript_batch(models, batch))
    opt.zero_grad()
    backward(loss)
    opt.step(cfg.lr_at(step))
    return {"step": step, "stage": 0, "loss": float(loss.data)}


# -- stages 1-3: flow matching on pseudo-CoT conditions ----------------------------

def supervised_tasks(cfg: StageConfig, step: int, seed: int, models: Models) -> list[Task]:
    """One scenario per step so that reference-image shapes agree across the batch."""
    mix = cfg.mixture or SUPERVISED_MIX
    names = list(mix)
    w = np.array([mix[k] for k in names], dtype=np.float64)
    rng = stream(seed, "supervised", cfg.stage, step)
    sc = names[int(rng.choice(len(names), p=w / w.sum()))]
    return [make_task(sc, "train", int(s), models.table) for s in rng.integers(0, 1 << 30, size=cfg.batch_size)]


def supervised_step(cfg: StageConfig, tasks: Sequence[Task], models: Models, opt: AdamW, step: int,
                    seed: int) -> dict:
    """Flow-matching update on pseudo-CoT conditions with condition dropout."""
    if cfg.stage not in (1, 2, 3):
        raise ContractError(f"stage {cfg.stage} is not a supervised stage")
    rng = stream(seed, "fm", cfg.stage, step)
    seqs = pseudo_cot_seqs(models, tasks)
    cond = conditions(models, seqs)
    cond = drop_conditions(models.generator, cond, rng.random(len(tasks)) < cfg.drop_rate)
    loss = fm_loss(models.generator, target_grids(tasks), cond, task_refs(tasks), rng)
    opt.zero_grad()
    backward(loss)
    opt.step(cfg.lr_at(step))
    return {"step": step, "stage": cfg.stage, "scenario": tasks[0].scenario, "loss": float(loss.data)}


# -- running stages ----------------------------------------------------------------

@dataclass
class StageReport:
    stage: int
    steps: int
    trainable: tuple[str, ...]
    changed: list[str]
    expected: list[str]
    seconds: float
    before: dict = field(repr=False, default_factory=dict)
    after: dict = field(repr=False, default_factory=dict)

    @property
    def changed_groups(self) -> list[str]:
        return sorted({group_of(n) for n in self.changed})

    @property
    def ledger_ok(self) -> bool:
        """Changed groups equal the trainable groups, and no frozen tensor moved.

        Single trainable tensors may legitimately stay put (a null embedding
        that no row used, say), so the tensor-level check is one-sided.
        """
        if not set(self.changed) <= set(self.expected):
            return False
        return self.steps == 0 or self.changed_groups == sorted(self.trainable)

    @property
    def untouched(self) -> list[str]:
        return sorted(set(self.expected) - set(self.changed))

    def summary(self) -> dict:
        return {"stage": self.stage, "steps": self.steps, "trainable": list(self.trainable),
                "n_changed": len(self.changed), "n_expected": len(self.expected),
                "n_untouched": len(self.untouched), "ledger_ok": self.ledger_ok,
                "seconds": round(self.seconds, 1)}


def _expected(models: Models, groups: Sequence[str]) -> list[str]:
    return sorted(models.params_for(groups))


def run_stage(models: Models, cfg: StageConfig, seed: int, grpo: GrpoConfig | None = None,
              scenario: str | None = None, on_step: Callable[[dict], None] | None = None) -> StageReport:
    """Run one stage in place with only ``cfg.trainable`` unfrozen."""
    t0 = time.perf_counter()
    before = models.hashes()
    if cfg.stage in (4, 5):
        g = replace(grpo or GrpoConfig(), **({"lr_planner": cfg.lr} if cfg.stage == 4 else {"lr_generator": cfg.lr}))
        if cfg.stage == 4:
            g = replace(g, tasks_per_step=cfg.batch_size)
        else:
            g = replace(g, dit_tasks_per_step=cfg.batch_size)
        run_grpo_stage(models, "mllm" if cfg.stage == 4 else "dit", cfg.steps, g, seed, scenario, cfg.trainable,
                       on_step=on_step, lr_at=cfg.lr_at)
    else:
        set_trainable(models, cfg.trainable)
        opt = AdamW(models.params_for(cfg.trainable), lr=cfg.lr)
        for step in range(cfg.steps):
            if cfg.stage == 0:
                m = pretrain_step(models, cfg, opt, step, seed)
            else:
                m = supervised_step(cfg, supervised_tasks(cfg, step, seed, models), models, opt, step, seed)
            if on_step:
                on_step(m)
        set_trainable(models, ())
        if cfg.stage == 0:
            models.planner.version = f"stage0-{seed}-{cfg.steps}"
            models.cache.store.clear()
    after = models.hashes()
    return StageReport(cfg.stage, cfg.steps, cfg.trainable, sorted(changed_params(before, after)),
                       _expected(models, cfg.trainable), time.perf_counter() - t0, before, after)


# -- checkpoints -------------------------------------------------------------------

def save_models(models: Models, directory, stage: int, seed: int) -> None:
    directory = Path(directory)
    meta = {"stage": stage, "seed": seed, "planner_version": models.planner.version,
            "planner_config": asdict(models.planner.cfg), "gen_config": asdict(models.generator.cfg),
            "k": models.bridge.k, "connector": models.bridge.connector.kind, "mode": models.bridge.mode}
    save_module(models.planner, directory / "planner", {"kind": "planner", **meta})
    save_module(models.bridge, directory / "bridge", {"kind": "bridge", **meta})
    save_module(models.generator, directory / "generator", {"kind": "generator", **meta})


def load_models(directory, expect_stage: int | None = None) -> Models:
    directory = Path(directory)
    meta = read_manifest(directory / "planner")
    if expect_stage is not None and meta.get("stage") != expect_stage:
        raise ContractError(f"checkpoint at {directory} is stage {meta.get('stage')}, expected {expect_stage}")
    gen_cfg = dict(meta["gen_config"])
    models = build_models(meta["seed"], {k: v for k, v in meta["planner_config"].items() if k != "vocab_size"},
                          gen_cfg, meta["k"], meta["connector"], meta["mode"])
    load_module(models.planner, directory / "planner")
    load_module(models.bridge, directory / "bridge")
    load_module(models.generator, directory / "generator")
    models.planner.version = meta["planner_version"]
    return models


# -- the full recipe ---------------------------------------------------------------

@dataclass
class RecipeConfig:
    seed: int = 0
    stages: list[StageConfig] = field(default_factory=default_stages)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    planner: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    k: int = 25
    connector: str = "linear"
    mode: str = CUT
    stage4_scenario: str | None = None
    eval_tasks: int = 24

    def to_json(self) -> dict:
        d = asdict(self)
        d["grpo"]["dit_scenarios"] = list(self.grpo.dit_scenarios)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RecipeConfig":
        d = dict(d)
        stages = [StageConfig(**{**s, "trainable": tuple(s.get("trainable", ()))}) for s in d.pop("stages")]
        g = dict(d.pop("grpo", {}))
        if "dit_scenarios" in g:
            g["dit_scenarios"] = tuple(g["dit_scenarios"])
        return cls(stages=stages, grpo=GrpoConfig(**g), **d)


def check_order(stages: Sequence[StageConfig]) -> None:
    ids = [s.stage for s in stages]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ContractError(f"stages must run in increasing order without repeats, got {ids}")


class MetricsWriter:
    """Append-only JSONL with sorted keys, so identical runs give identical bytes."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self._fh = self.path.open("a")

    def __call__(self, row: dict) -> None:
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_recipe(config: RecipeConfig, out_dir, models: Models | None = None, start_from=None,
               evaluate_after: Sequence[int] = (3, 5), log: Callable[[str], None] | None = None) -> dict:
    """Run ``config.stages`` in order and write checkpoints/, metrics/, report.json and plots/.

    ``start_from`` names an earlier checkpoint directory; it must hold the stage
    immediately before the first configured stage.
    """
    check_order(config.stages)
    out = Path(out_dir)
    for sub in ("checkpoints", "metrics", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True))
    first = config.stages[0].stage
    if models is None:
        if start_from is not None:
            models = load_models(start_from, expect_stage=first - 1)
        elif first > 0:
            raise ContractError(f"stage {first} needs the stage {first - 1} checkpoint")
        else:
            models = build_models(config.seed, config.planner, config.generator, config.k, config.connector,
                                  config.mode)
    report = {"seed": config.seed, "stages": [], "eval": {}}
    for cfg in config.stages:
        writer = MetricsWriter(out / "metrics" / f"stage{cfg.stage}.jsonl")
        rep = run_stage(models, cfg, config.seed, config.grpo,
                        config.stage4_scenario if cfg.stage == 4 else None, on_step=writer)
        writer.close()
        save_models(models, out / "checkpoints" / f"stage{cfg.stage}", cfg.stage, config.seed)
        report["stages"].append({**rep.summary(), "changed_groups": rep.changed_groups})
        if log:
            log(f"stage {cfg.stage}: {rep.summary()}")
        if cfg.stage in (4, 5):
            plot_metrics(out / "metrics" / f"stage{cfg.stage}.jsonl", out / "plots", prefix=f"stage{cfg.stage}")
        if cfg.stage in evaluate_after:
            report["eval"][f"stage{cfg.stage}"] = run_suites(models, config.eval_tasks, config.seed)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
