"""VGI-refine conditioning: prompt templates, post-``</think>`` extraction, prepadding and the connector."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.io import dumps_array
from .autodiff.nn import Linear, Module
from .autodiff.rng import stream
from .autodiff.tensor import Tensor
from .errors import ContractError, MalformedRollout, ShapeError
from .planner import END_THINK, SYS, THINK, TokenSeq, Vocab

PRETRAIN, RL = "pretrain-pseudo-cot", "rl-cold-start"
CUT, ALL = "cut", "all"


@dataclass(frozen=True)
class PromptTemplate:
    mode: str = RL
    sys_tokens: tuple[str, ...] = (SYS,)

    def __post_init__(self):
        if self.mode not in (PRETRAIN, RL):
            raise ContractError(f"unknown template mode {self.mode!r}")

    def expand(self, content: Sequence[str], context: Sequence[str] = ()) -> list[str]:
        """Token layout; ``context`` (e.g. a reference-image description) sits between the system tokens and [C]."""
        head = [*self.sys_tokens, *context, *content, THINK]
        return head + [END_THINK, *content] if self.mode == PRETRAIN else head


def build_prompt(template: PromptTemplate, content: Sequence[str], vocab: Vocab, context: Sequence[str] = ()) -> TokenSeq:
    if not content:
        raise ContractError("prompt content must be non-empty")
    ids = vocab.encode(template.expand(content, context))
    return TokenSeq.marked(vocab, ids, prompt_len=len(ids))


class PrepaddingStates(Module):
    """K learnable rows of width 2d, initialised N(0, 0.02^2)."""

    def __init__(self, k: int, width: int, seed: int = 0):
        super().__init__()
        self.k, self.width = k, width
        self.pads = T.parameter(stream(seed, "prepadding").normal(0.0, 0.02, (k, width)))


class Connector(Module):
    """Row-wise map 2d -> d_gen. ``kind="mlp"`` is only an ablation path."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0, kind: str = "linear", identity: bool = False):
        super().__init__()
        rng = stream(seed, "connector")
        self.kind, self.d_in, self.d_out = kind, d_in, d_out
        if kind == "linear":
            self.proj = Linear(d_in, d_out, rng)
            if identity:
                if d_in != d_out:
                    raise ShapeError(f"identity connector needs a square map, got {d_in}->{d_out}")
                self.proj.weight.data = _frozen(np.eye(d_in))
        elif kind == "mlp":
            self.fc1 = Linear(d_in, d_out, rng)
            self.fc2 = Linear(d_out, d_out, rng)
        else:
            raise ContractError(f"unknown connector kind {kind!r}")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"connector expects width {self.d_in}, got {x.shape[-1]}")
        if self.kind == "linear":
            return self.proj(x)
        return self.fc2(T.gelu(self.fc1(x)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class Bridge(Module):
    """Prepadding plus connector: the trainable half of the conditioning path."""

    def __init__(self, d_planner: int, d_gen: int, k: int = 25, seed: int = 0, connector: str = "linear",
                 mode: str = CUT):
        super().__init__()
        if mode not in (CUT, ALL):
            raise ContractError(f"unknown extraction mode {mode!r}")
        self.mode = mode
        self.prepad = PrepaddingStates(k, 2 * d_planner, seed)
        self.connector = Connector(2 * d_planner, d_gen, seed, kind=connector)

    @property
    def k(self) -> int:
        return self.prepad.k


def source_span(seq: TokenSeq, vocab: Vocab, mode: str = CUT) -> tuple[int, int]:
    """``[start, stop)`` positions whose hidden states feed the condition.

    CUT keeps positions strictly after ``</think>``; ALL keeps the whole
    sequence. Both drop trailing ``<eos>``/``<pad>``.
    """
    if seq.think_close is None:
        raise MalformedRollout("no </think> in sequence; route to the minimum reward")
    m = len(seq.instruction(vocab))
    stop = seq.think_close + 1 + m
    return (seq.think_close + 1, stop) if mode == CUT else (0, stop)


def extract_refined_states(hiddens: Sequence[Tensor], seq: TokenSeq, pads: PrepaddingStates, vocab: Vocab,
                           mode: str = CUT) -> Tensor:
    """Single-sequence VGI-refine: ``(K + m, 2d)`` rows.

    ``hiddens`` holds per-layer states ``(len, d)`` (or ``(1, len, d)``); the
    final two layers are concatenated feature-wise.
    """
    if len(hiddens) < 2:
        raise ContractError("need at least two hidden layers")
    a, b = hiddens[-2], hiddens[-1]
    if a.ndim == 3:
        a, b = a[0], b[0]
    start, stop = source_span(seq, vocab, mode)
    if a.shape[0] < stop:
        raise ContractError("hidden states do not cover the sequence")
    both = T.concat([T.slice_(a, slice(start, stop)), T.slice_(b, slice(start, stop))], axis=-1)
    return T.concat([pads.pads, both], axis=0)


@dataclass
class ConditionPack:
    """Refined condition rows ``(K + m, d_gen)`` for one sample."""

    states: Tensor
    k: int
    m: int
    provenance: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.k + self.m

    def dumps(self) -> tuple[bytes, str]:
        return dumps_array(self.states.data), json.dumps({"k": self.k, "m": self.m, **self.provenance}, sort_keys=True)


def prompt_hash(seq: TokenSeq) -> str:
    return hashlib.sha256(np.asarray(seq.ids, dtype=np.int64).tobytes()).hexdigest()[:16]


def connect(pre: Tensor, connector: Connector, k: int, provenance: dict | None = None) -> ConditionPack:
    out = connector(pre)
    return ConditionPack(out, k, pre.shape[0] - k, dict(provenance or {}))


@dataclass
class ConditionBatch:
    """Padded batch of conditions: ``states`` is ``(B, R, d_gen)``, ``valid`` marks real rows."""

    states: Tensor
    valid: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def rows(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def collate(packs: Sequence[ConditionPack]) -> ConditionBatch:
    r = max(p.rows for p in packs)
    width = packs[0].states.shape[-1]
    rows, valid = [], np.zeros((len(packs), r), dtype=bool)
    for i, p in enumerate(packs):
        valid[i, :p.rows] = True
        st = p.states
        if p.rows < r:
            st = T.concat([st, Tensor(np.zeros((r - p.rows, width)))], axis=0)
        rows.append(st)
    return ConditionBatch(T.stack(rows), valid)


def refine_batch(states: Sequence[Tensor] | Sequence[np.ndarray], seqs: Sequence[TokenSeq], vocab: Vocab,
                 bridge: Bridge) -> ConditionBatch:
    """Batched VGI-refine + connector over padded planner states ``(B, T, d)``.

    Rows past a sample's ``K + m`` are filled from an arbitrary position and
    masked out through ``valid``.
    """
    a, b = states[-2], states[-1]
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    n, t, _ = a.shape
    spans = [source_span(s, vocab, bridge.mode) for s in seqs]
    m = np.array([stop - start for start, stop in spans])
    mmax = int(m.max()) if len(m) else 0
    k = bridge.k
    valid = np.zeros((n, k + mmax), dtype=bool)
    valid[:, :k] = True
    parts = [T.embedding(bridge.prepad.pads, np.broadcast_to(np.arange(k), (n, k)))]
    if mmax:
        idx = np.zeros((n, mmax), dtype=np.int64)
        for i, (start, stop) in enumerate(spans):
            idx[i, :stop - start] = i * t + np.arange(start, stop)
            idx[i, stop - start:] = i * t
            valid[i, k:k + stop - start] = True
        both = T.concat([a, b], axis=-1).reshape(n * t, -1)
        parts.append(T.embedding(both, idx))
    pre = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    return ConditionBatch(bridge.connector(pre), valid)
