"""Small layer library, AdamW and learning-rate schedules on top of ``Tensor``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .io import array_hash
from .tensor import Tensor


class Module:
    """Parameter container with deterministic, insertion-ordered naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._modules[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, m in self._modules.items():
            out.update(m.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.array(state[k], dtype=p.data.dtype, copy=True)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            arr.setflags(write=False)
            p.data = arr

    def param_hashes(self) -> dict[str, str]:
        return {k: array_hash(p.data) for k, p in self.named_parameters().items()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = T.parameter(init_normal(rng, (d_in, d_out), std))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, out_std: float | None = None):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, bias: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is ``(B, Tq, d)``, ``k``/``v`` are ``(B, Tk, d)``. ``bias`` is an
    additive constant broadcastable to ``(B, heads, Tq, Tk)``; masked entries
    use a large negative finite value so checked mode stays happy.
    """
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    scores = T.matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(qh.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return merge_heads(T.matmul(T.softmax(scores, axis=-1), vh))


MASKED = -1e9


def causal_bias(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASKED), k=1)


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """``valid`` is ``(B, Tk)`` bool -> bias of shape ``(B, 1, 1, Tk)``."""
    return np.where(valid, 0.0, MASKED)[:, None, None, :]


class AdamW:
    """AdamW with global-norm gradient clipping.

    Updates replace ``param.data`` with a fresh array, so earlier snapshots of
    a parameter stay valid.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.95), eps: float = 1e-9,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = p.data * (1 - lr * self.wd) - lr * upd
            new.setflags(write=False)
            p.data = new
        return norm

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())


def lr_at(step: int, base: float, schedule: str = "constant", warmup: int = 0, total: int = 1) -> float:
    """Learning rate for 0-based ``step`` under a linear-warmup + cosine/constant schedule."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    if schedule == "cosine":
        span = max(1, total - warmup)
        frac = min(1.0, (step - warmup) / span)
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {schedule!r}")
