"""Flow-matching transformer over grid latents, with ODE and SDE samplers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import MLP, LayerNorm, Linear, Module, attention, key_padding_bias
from .autodiff.rng import stream
from .autodiff.tensor import Tensor
from .bridge import ConditionBatch
from .checkpoint import load_module, read_manifest, save_module
from .errors import ContractError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GenConfig:
    height: int = 16
    width: int = 16
    channels: int = 4
    patch: int = 4
    d: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_cond: int = 64
    n_freq: int = 16
    mlp_mult: int = 4
    max_cond_rows: int = 192
    head_std: float = 0.0
    # "velocity": the head outputs v directly. "x1": the head predicts the clean
    # grid and v = (x1_hat - x_t) / max(1 - t, min_gap).
    target: str = "velocity"
    min_gap: float = 0.05
    pos_std: float = 0.02
    # With snap > 0 and an x1 target, times t > 1 - snap use the rounded grid
    # x_t / t as the clean estimate (rendered grids are binary), so the network
    # never has to fit the tail where 1 / (1 - t) amplifies every residue.
    snap: float = 0.0

    def __post_init__(self):
        if self.target not in ("velocity", "x1"):
            raise ContractError(f"unknown generator target {self.target!r}")
        if not 0.0 <= self.snap < 1.0 or (self.snap and self.target == "velocity"):
            raise ContractError("snap must lie in [0, 1) and needs an x1 target")

    @property
    def geometry(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def time_features(t: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal embedding of ``t`` in [0, 1]: ``(B, 2 * n_freq)``, frequencies 1 .. 1000 (geometric)."""
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), n_freq))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class GenBlock(Module):
    def __init__(self, d: int, n_heads: int, mlp_mult: int, rng):
        super().__init__()
        self.n_heads = n_heads
        self.ln1, self.ln2, self.ln3 = LayerNorm(d), LayerNorm(d), LayerNorm(d)
        self.q, self.k, self.v, self.o = (Linear(d, d, rng) for _ in range(4))
        self.cq, self.ck, self.cv, self.co = (Linear(d, d, rng) for _ in range(4))
        self.mlp = MLP(d, mlp_mult * d, rng)
        # time-dependent scale and shift for each norm; zero-initialised
        self.mod = Linear(d, 6 * d, rng, std=0.0)
        self.d = d

    def _modulated(self, ln: LayerNorm, x: Tensor, mods: Tensor, i: int) -> Tensor:
        d = self.d
        scale = T.slice_(mods, (Ellipsis, slice(2 * i * d, (2 * i + 1) * d)))
        shift = T.slice_(mods, (Ellipsis, slice((2 * i + 1) * d, (2 * i + 2) * d)))
        return ln(x) * (scale + 1.0) + shift

    def __call__(self, x: Tensor, c: Tensor, cbias: np.ndarray, temb: Tensor) -> Tensor:
        mods = self.mod(T.gelu(temb))
        a = self._modulated(self.ln1, x, mods, 0)
        x = x + self.o(attention(self.q(a), self.k(a), self.v(a), self.n_heads))
        a = self._modulated(self.ln2, x, mods, 1)
        x = x + self.co(attention(self.cq(a), self.ck(c), self.cv(c), self.n_heads, cbias))
        return x + self.mlp(self._modulated(self.ln3, x, mods, 2))


class FlowGenerator(Module):
    """Patch transformer predicting the velocity field ``v(x_t, t | cond, refs)``.

    Latent patches and reference-grid patches share one joint self-attention
    (told apart by a role embedding), and each reference patch is also added
    to the latent token at the same position; condition rows enter through
    cross-attention with a key mask. The output head starts at zero unless
    ``cfg.head_std`` says otherwise.
    """

    def __init__(self, cfg: GenConfig = GenConfig(), seed: int = 0):
        super().__init__()
        rng = stream(seed, "generator-init")
        self.cfg = cfg
        d = cfg.d
        self.patch_in = Linear(cfg.patch_dim, d, rng)
        self.pos = T.parameter(rng.normal(0, cfg.pos_std, (cfg.n_tokens, d)))
        self.role = T.parameter(rng.normal(0, 0.02, (2, d)))
        self.ref_in = Linear(cfg.patch_dim, d, rng)
        self.time1 = Linear(2 * cfg.n_freq, d, rng)
        self.time2 = Linear(d, d, rng)
        self.cond_ln = LayerNorm(cfg.d_cond)
        self.cond_in = Linear(cfg.d_cond, d, rng)
        self.cond_pos = T.parameter(rng.normal(0, cfg.pos_std, (cfg.max_cond_rows, d)))
        self.null = T.parameter(rng.normal(0, 0.02, (1, cfg.d_cond)))
        self.blocks = [GenBlock(d, cfg.n_heads, cfg.mlp_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_out = LayerNorm(d)
        self.out = Linear(d, cfg.patch_dim, rng, std=cfg.head_std)
        object.__setattr__(self, "calls", 0)

    # -- patches ---------------------------------------------------------------
    def patchify(self, x: Tensor) -> Tensor:
        c = self.cfg
        b, p = x.shape[0], c.patch
        x = x.reshape(b, c.height // p, p, c.width // p, p, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, c.n_tokens, c.patch_dim)

    def unpatchify(self, x: Tensor) -> Tensor:
        c = self.cfg
        b, p = x.shape[0], c.patch
        x = x.reshape(b, c.height // p, c.width // p, p, p, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, c.height, c.width, c.channels)

    def _check_geometry(self, x_shape, refs) -> None:
        geo = self.cfg.geometry
        if tuple(x_shape[1:]) != geo:
            raise ShapeError(f"latent shape {tuple(x_shape[1:])} != generator geometry {geo}")
        if refs is not None:
            rs = np.shape(refs)
            if len(rs) != 5 or tuple(rs[2:]) != geo or rs[0] != x_shape[0]:
                raise ShapeError(f"refs must be (B, n_ref, *{geo}) with B={x_shape[0]}, got {rs}")

    # -- forward ---------------------------------------------------------------
    def uncond(self, n: int) -> ConditionBatch:
        """The learned null condition (one row) for ``n`` samples."""
        return ConditionBatch(T.embedding(self.null, np.zeros((n, 1), dtype=np.int64)), np.ones((n, 1), dtype=bool))

    def __call__(self, x, t, cond: ConditionBatch, refs=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        self._check_geometry(x.shape, refs)
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if len(cond) != b:
            raise ShapeError(f"condition batch {len(cond)} != latent batch {b}")
        r = cond.states.shape[1]
        if r > self.cfg.max_cond_rows:
            raise ShapeError(f"{r} condition rows exceed the limit of {self.cfg.max_cond_rows}")
        object.__setattr__(self, "calls", self.calls + b)
        temb = self.time2(T.gelu(self.time1(Tensor(time_features(t, self.cfg.n_freq))))).reshape(b, 1, self.cfg.d)
        h = self.patch_in(self.patchify(x)) + self.pos + T.slice_(self.role, slice(0, 1)) + temb
        n_ref = 0
        if refs is not None:
            refs = np.asarray(refs, dtype=np.float64)
            n_ref = refs.shape[1]
            rp = self.patch_in(self.patchify(Tensor(refs.reshape(b * n_ref, *self.cfg.geometry))))
            rp = rp.reshape(b, n_ref * self.cfg.n_tokens, self.cfg.d)
            pos = T.concat([self.pos] * n_ref, axis=0) if n_ref > 1 else self.pos
            # position-aligned injection makes copying unchanged regions easy
            aligned = self.ref_in(self.patchify(Tensor(refs.reshape(b * n_ref, *self.cfg.geometry))))
            h = h + aligned.reshape(b, n_ref, self.cfg.n_tokens, self.cfg.d).sum(axis=1)
            h = T.concat([rp + pos + T.slice_(self.role, slice(1, 2)) + temb, h], axis=1)
        c = self.cond_in(self.cond_ln(cond.states)) + T.slice_(self.cond_pos, slice(0, r))
        cbias = key_padding_bias(cond.valid)
        for blk in self.blocks:
            h = blk(h, c, cbias, temb)
        if n_ref:
            h = T.slice_(h, (slice(None), slice(n_ref * self.cfg.n_tokens, None)))
        y = self.unpatchify(self.out(self.ln_out(h)))
        if self.cfg.target == "velocity":
            return y
        tail = t > 1.0 - self.cfg.snap if self.cfg.snap else np.zeros(b, dtype=bool)
        if tail.any():
            snapped = np.round(np.clip(x.data / np.maximum(t, 1e-12)[:, None, None, None], 0.0, 1.0))
            y = T.where(tail[:, None, None, None], Tensor(snapped), y)
        gap = np.maximum(1.0 - t, self.cfg.min_gap)[:, None, None, None]
        return (y - x) * (1.0 / gap)


def drop_conditions(gen: FlowGenerator, cond: ConditionBatch, drop: np.ndarray) -> ConditionBatch:
    """Replace rows flagged in ``drop`` by the null condition (classifier-free-guidance training)."""
    drop = np.asarray(drop, dtype=bool)
    if not drop.any():
        return cond
    b, r = cond.valid.shape
    null = T.embedding(gen.null, np.zeros((b, r), dtype=np.int64))
    states = T.where(drop[:, None, None], null, cond.states)
    first = np.zeros((b, r), dtype=bool)
    first[:, 0] = True
    return ConditionBatch(states, np.where(drop[:, None], first, cond.valid))


def _pad_rows(cb: ConditionBatch, r: int) -> ConditionBatch:
    b, cur = cb.valid.shape
    if cur == r:
        return cb
    width = cb.states.shape[-1]
    states = T.concat([cb.states, Tensor(np.zeros((b, r - cur, width)))], axis=1)
    valid = np.concatenate([cb.valid, np.zeros((b, r - cur), dtype=bool)], axis=1)
    return ConditionBatch(states, valid)


def guided_velocity(gen: FlowGenerator, x, t, cond: ConditionBatch, refs, scale: float) -> Tensor:
    """``v_u + scale * (v_c - v_u)``; ``scale == 1`` evaluates only the conditional branch."""
    if scale == 1.0:
        return gen(x, t, cond, refs)
    b = len(cond)
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    both = ConditionBatch(T.concat([cond.states, _pad_rows(gen.uncond(b), cond.states.shape[1]).states], axis=0),
                          np.concatenate([cond.valid, _pad_rows(gen.uncond(b), cond.states.shape[1]).valid]))
    rr = None if refs is None else np.concatenate([refs, refs])
    v = gen(T.concat([x, x], axis=0), np.concatenate([np.broadcast_to(t, (b,))] * 2), both, rr)
    vc, vu = T.slice_(v, slice(0, b)), T.slice_(v, slice(b, 2 * b))
    return vu + (vc - vu) * scale


# -- training objective -----------------------------------------------------------

def fm_loss(gen: FlowGenerator, x1, cond: ConditionBatch, refs=None, rng: np.random.Generator | None = None,
            t=None, x0=None) -> Tensor:
    """Mean squared error between ``x1 - x0`` and ``v(x_t, t)`` with ``x_t = (1 - t) x0 + t x1``.

    ``t`` and ``x0`` are drawn from ``rng`` unless given explicitly.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if not np.isfinite(x1).all():
        raise ContractError("fm_loss needs a finite target latent")
    gen._check_geometry(x1.shape, refs)
    b = x1.shape[0]
    if t is None:
        t = rng.random(b)
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    tt = t[:, None, None, None]
    xt = (1.0 - tt) * x0 + tt * x1
    return T.mse(gen(xt, t, cond, refs), x1 - x0)


# -- sampling ---------------------------------------------------------------------

@dataclass
class FlowTrajectory:
    """Batched denoising path: ``latents`` is ``(T + 1, B, H, W, C)``; ``logps`` is ``(T, B)`` in SDE mode."""

    steps: int
    times: np.ndarray
    latents: np.ndarray
    logps: np.ndarray | None
    noise_id: tuple
    cfg: float
    cutoff: float
    sigmas: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return "ode" if self.logps is None else "sde"

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]


def initial_noise(geometry, batch: int, seed: int, *path, shared: bool = False) -> np.ndarray:
    """Gaussian start latents; ``shared`` draws one latent and repeats it over the batch."""
    rng = stream(seed, "noise", *path)
    if shared:
        return np.broadcast_to(rng.standard_normal(tuple(geometry)), (batch, *geometry)).copy()
    return rng.standard_normal((batch, *geometry))


def _cfg_on(k: int, steps: int, cutoff: float) -> bool:
    return k / steps < cutoff


def ode_sample(gen: FlowGenerator, cond: ConditionBatch, refs=None, steps: int = 20, cfg: float = 4.0,
               cutoff: float = 0.6, noise: np.ndarray | None = None, noise_id: tuple = ()) -> tuple[np.ndarray, FlowTrajectory]:
    """Euler integration from noise at t=0 to t=1, guided for the first ``cutoff`` of steps."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if cfg < 1.0 or not 0.0 <= cutoff <= 1.0:
        raise ContractError("need cfg >= 1 and cutoff in [0, 1]")
    x = np.asarray(noise, dtype=np.float64)
    times = np.linspace(0.0, 1.0, steps + 1)
    path = [x]
    with T.no_grad():
        for k in range(steps):
            scale = cfg if _cfg_on(k, steps, cutoff) else 1.0
            v = guided_velocity(gen, x, times[k], cond, refs, scale).data
            x = x + (times[k + 1] - times[k]) * v
            path.append(x)
    return x, FlowTrajectory(steps, times, np.stack(path), None, tuple(noise_id), cfg, cutoff)


def default_sigmas(steps: int, scale: float = 0.1) -> np.ndarray:
    return np.full(steps, scale * math.sqrt(1.0 / steps))


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian log-density summed over all but the leading axis."""
    n = x[0].size
    z = ((x - mean) ** 2).reshape(x.shape[0], -1).sum(axis=1)
    return -0.5 * z / sigma**2 - n * (math.log(sigma) + 0.5 * LOG_2PI)


def sde_sample(gen: FlowGenerator, cond: ConditionBatch, refs=None, steps: int = 10, sigmas=None,
               noise: np.ndarray | None = None, eps_rng: np.random.Generator | None = None, cfg: float = 4.0,
               cutoff: float = 0.6, noise_id: tuple = ()) -> FlowTrajectory:
    """Euler-Maruyama: ``x_{k+1} ~ N(x_k + v dt, sigma_k^2 I)`` with exact per-step log-densities."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    sig = default_sigmas(steps) if sigmas is None else np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (steps,))
    if (sig <= 0).any():
        raise ContractError("SDE sampling needs positive sigmas (the log-density is undefined at 0)")
    x = np.asarray(noise, dtype=np.float64)
    times = np.linspace(0.0, 1.0, steps + 1)
    path, logps = [x], []
    with T.no_grad():
        for k in range(steps):
            scale = cfg if _cfg_on(k, steps, cutoff) else 1.0
            v = guided_velocity(gen, x, times[k], cond, refs, scale).data
            mean = x + (times[k + 1] - times[k]) * v
            x = mean + sig[k] * eps_rng.standard_normal(x.shape)
            logps.append(gaussian_logpdf(x, mean, sig[k]))
            path.append(x)
    return FlowTrajectory(steps, times, np.stack(path), np.stack(logps), tuple(noise_id), cfg, cutoff, sig.copy())


def active_steps(steps: int, frac: float = 0.6) -> int:
    """Number of leading gradient-active denoising steps, ``ceil(frac * steps)``."""
    return math.ceil(round(frac * steps, 9))


@dataclass
class TrajScore:
    """``logps`` ``(B, n)`` differentiable for the first ``n`` steps; ``means`` the matching step means."""

    logps: Tensor
    means: Tensor
    active: np.ndarray


def score_trajectory(gen: FlowGenerator, traj: FlowTrajectory, cond: ConditionBatch, refs=None,
                     frac: float = 0.6, n_steps: int | None = None) -> TrajScore:
    """Re-score the first ``ceil(frac * T)`` transitions of an SDE trajectory (all steps in one batch)."""
    if traj.mode != "sde":
        raise ContractError("only SDE trajectories carry transition densities")
    n = active_steps(traj.steps, frac) if n_steps is None else n_steps
    mask = np.arange(traj.steps) < n
    b = traj.latents.shape[1]
    geo = traj.latents.shape[2:]
    xs = traj.latents[:n].reshape(n * b, *geo)
    ts = np.repeat(traj.times[:n], b)
    scales = [traj.cfg if _cfg_on(k, traj.steps, traj.cutoff) else 1.0 for k in range(n)]
    rep = ConditionBatch(T.concat([cond.states] * n, axis=0) if n > 1 else cond.states,
                         np.concatenate([cond.valid] * n))
    rr = None if refs is None else np.concatenate([refs] * n)
    if len(set(scales)) == 1:
        v = guided_velocity(gen, xs, ts, rep, rr, scales[0])
    else:
        # mixed guidance: evaluate both branches once and pick per step
        vc = gen(xs, ts, rep, rr)
        vu = gen(xs, ts, _pad_rows(gen.uncond(n * b), rep.states.shape[1]), rr)
        w = np.repeat(np.asarray(scales), b)[:, None, None, None]
        v = vu + (vc - vu) * w
    dt = np.repeat(np.diff(traj.times)[:n], b)[:, None, None, None]
    means = Tensor(xs) + v * dt
    nxt = traj.latents[1:n + 1].reshape(n * b, *geo)
    sig = np.repeat(traj.sigmas[:n], b)
    sq = ((Tensor(nxt) - means) ** 2).reshape(n * b, -1).sum(axis=1)
    d = int(np.prod(geo))
    lp = sq * (-0.5 / sig**2) - d * (np.log(sig) + 0.5 * LOG_2PI)
    return TrajScore(lp.reshape(n, b).transpose(1, 0), means.reshape(n, b, *geo), mask)


# -- export -----------------------------------------------------------------------

def grid_image(grid: np.ndarray, scale: int = 16) -> np.ndarray:
    """RGB image of a grid: colour channels as-is, glyph cells drawn white."""
    g = np.asarray(grid, dtype=np.float64)
    rgb = np.clip(g[..., :3], 0.0, 1.0)
    glyph = np.clip(g[..., 3:4], 0.0, 1.0)
    img = rgb * (1.0 - glyph) + glyph
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def save_png(grid: np.ndarray, path, scale: int = 16) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(str(path), grid_image(grid, scale))


def save_generator(gen: FlowGenerator, directory, version: str = "") -> None:
    save_module(gen, directory, {"kind": "generator", "config": asdict(gen.cfg), "version": version})


def load_generator(directory) -> FlowGenerator:
    m = read_manifest(directory)
    gen = FlowGenerator(GenConfig(**m["config"]))
    load_module(gen, directory)
    return gen


def stack_refs(refs: Sequence[Sequence[np.ndarray]]) -> np.ndarray | None:
    """``(B, n_ref, H, W, C)`` from per-sample reference lists (all samples must share n_ref)."""
    if not refs or not refs[0]:
        return None
    return np.stack([np.stack(r) for r in refs])
