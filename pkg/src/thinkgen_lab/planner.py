"""Toy autoregressive planner: vocabulary, token sequences, a causal transformer and its sampler."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import MLP, LayerNorm, Linear, Module, attention, causal_bias
from .autodiff.rng import stream
from .autodiff.tensor import _GELU_C, Tensor
from .checkpoint import load_module, read_manifest, save_module
from .errors import ContractError, VocabError
from .world import lexicon

PAD, SYS, THINK, END_THINK, EOS = "<pad>", "[SYS]", "<think>", "</think>", "<eos>"
RESERVED = (PAD, SYS, THINK, END_THINK, EOS)
MAX_VOCAB = 512


class Vocab:
    """Token strings <-> ids. Reserved tokens always take ids 0-4."""

    def __init__(self, words: Sequence[str] | None = None):
        words = lexicon() if words is None else list(words)
        self.tokens: tuple[str, ...] = tuple(dict.fromkeys([*RESERVED, *words]))
        if len(self.tokens) > MAX_VOCAB:
            raise VocabError(f"vocabulary of {len(self.tokens)} exceeds {MAX_VOCAB}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad, self.sys, self.think, self.end_think, self.eos = (self.index[t] for t in RESERVED)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise VocabError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        try:
            return [self.tokens[i] for i in ids]
        except IndexError:
            raise VocabError(f"id out of range for vocabulary of {len(self)}") from None

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TokenSeq:
    """Token ids with the prompt/generation boundary and think markers.

    ``logps`` holds one log-probability per generated token (``ids[prompt_len:]``).
    """

    ids: tuple[int, ...]
    prompt_len: int | None = None
    think_open: int | None = None
    think_close: int | None = None
    logps: tuple[float, ...] | None = None
    malformed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.think_open is not None and self.think_close is not None and not self.think_open < self.think_close:
            raise ContractError(f"think markers out of order: {self.think_open} >= {self.think_close}")
        if self.logps is not None:
            if self.prompt_len is None or len(self.logps) != len(self.ids) - self.prompt_len:
                raise ContractError("one log-prob per generated token is required")

    @classmethod
    def marked(cls, vocab: Vocab, ids: Sequence[int], prompt_len: int | None = None, **kw) -> "TokenSeq":
        """Build a sequence and locate the first ``<think>`` and the first ``</think>`` after it."""
        ids = list(ids)
        opn = ids.index(vocab.think) if vocab.think in ids else None
        close = None
        if opn is not None and vocab.end_think in ids[opn + 1:]:
            close = ids.index(vocab.end_think, opn + 1)
        return cls(tuple(ids), prompt_len, opn, close, **kw)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def generated(self) -> tuple[int, ...]:
        if self.prompt_len is None:
            raise ContractError("sequence has no generated-region boundary")
        return self.ids[self.prompt_len:]

    @property
    def length(self) -> int:
        """|o|: number of generated tokens."""
        return len(self.generated)

    @property
    def think_len(self) -> int:
        if self.think_open is None:
            return 0
        end = self.think_close if self.think_close is not None else len(self.ids)
        return end - self.think_open - 1

    def instruction(self, vocab: Vocab) -> tuple[int, ...]:
        """Ids strictly after ``</think>``, with trailing ``<eos>``/``<pad>`` removed."""
        if self.think_close is None:
            raise ContractError("sequence has no </think>")
        out = list(self.ids[self.think_close + 1:])
        while out and out[-1] in (vocab.eos, vocab.pad):
            out.pop()
        return tuple(out)


# -- model ----------------------------------------------------------------------

@dataclass(frozen=True)
class PlannerConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context: int = 128
    mlp_mult: int = 4
    zero_head: bool = False


class PlannerBlock(Module):
    def __init__(self, d: int, n_heads: int, mlp_mult: int, rng, out_std: float):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng, std=out_std)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_mult * d, rng, out_std=out_std)

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        a = self.ln1(x)
        x = x + self.o(attention(self.q(a), self.k(a), self.v(a), self.n_heads, bias))
        return x + self.mlp(self.ln2(x))


class PlannerPolicy(Module):
    """Decoder-only transformer. ``forward`` exposes every block's residual output."""

    def __init__(self, cfg: PlannerConfig, seed: int = 0):
        super().__init__()
        if cfg.n_layers < 2:
            raise ContractError("the planner needs at least two layers")
        rng = stream(seed, "planner-init")
        self.cfg = cfg
        self.tok = T.parameter(rng.normal(0, 0.1, (cfg.vocab_size, cfg.d)))
        self.pos = T.parameter(rng.normal(0, 0.1, (cfg.context, cfg.d)))
        out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        self.blocks = [PlannerBlock(cfg.d, cfg.n_heads, cfg.mlp_mult, rng, out_std) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d)
        self.head = Linear(cfg.d, cfg.vocab_size, rng, bias=False, std=0.0 if cfg.zero_head else 0.02)
        self.version = "init"

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabError(f"token id outside [0, {self.cfg.vocab_size})")
        if ids.shape[-1] > self.cfg.context:
            raise ContractError(f"sequence length {ids.shape[-1]} exceeds context {self.cfg.context}")

    def hidden(self, ids: np.ndarray) -> list[Tensor]:
        """Per-layer residual states, each ``(B, T, d)``."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        t = ids.shape[1]
        x = T.embedding(self.tok, ids) + T.slice_(self.pos, slice(0, t))
        bias = causal_bias(t)
        states = []
        for blk in self.blocks:
            x = blk(x, bias)
            states.append(x)
        return states

    def logits_from(self, h: Tensor) -> Tensor:
        return self.head(self.ln_f(h))

    def forward(self, ids: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        states = self.hidden(ids)
        return self.logits_from(states[-1]), states


def plan_forward(policy: PlannerPolicy, seq: TokenSeq | Sequence[int]) -> tuple[Tensor, Tensor]:
    """Logits ``(len, V)`` and stacked hidden states ``(L, len, d)`` for one sequence."""
    ids = np.asarray(seq.ids if isinstance(seq, TokenSeq) else seq, dtype=np.int64)
    if ids.size == 0:
        raise ContractError("plan_forward needs a non-empty sequence")
    logits, states = policy.forward(ids[None, :])
    return logits[0], T.stack([h[0] for h in states])


# -- sampling -------------------------------------------------------------------

def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _CachedDecoder:
    """Inference-only numpy replica of ``PlannerPolicy`` with a key/value cache.

    Mirrors the Tensor forward op for op (same layer-norm epsilon, GELU
    approximation and max-subtracted softmax), so log-probs it records agree
    with differentiable re-scoring to rounding error.
    """

    def __init__(self, policy: PlannerPolicy, n: int, width: int):
        self.p = policy
        cfg = policy.cfg
        self.h, self.dh = cfg.n_heads, cfg.d // cfg.n_heads
        self.k = [np.zeros((n, self.h, width, self.dh)) for _ in policy.blocks]
        self.v = [np.zeros((n, self.h, width, self.dh)) for _ in policy.blocks]

    @staticmethod
    def _ln(x, m):
        xc = x - x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + 1e-5)
        return xc * inv * m.gamma.data + m.beta.data

    @staticmethod
    def _lin(x, m):
        y = x @ m.weight.data
        return y + m.bias.data if m.bias is not None else y

    def _heads(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.h, self.dh).transpose(0, 2, 1, 3)

    def step(self, ids: np.ndarray, start: np.ndarray) -> np.ndarray:
        """Feed ``ids`` (B, t) at per-row offsets ``start``; return last-position logits (B, V).

        With t > 1 all rows must share ``start`` (prefill); with t == 1 offsets may differ.
        """
        b, t = ids.shape
        rows = np.arange(b)
        pos = start[:, None] + np.arange(t)[None, :]
        x = self.p.tok.data[ids] + self.p.pos.data[pos]
        width = self.k[0].shape[2]
        visible = np.arange(width)[None, None, :] <= pos[:, :, None]
        bias = np.where(visible, 0.0, -1e9)[:, None, :, :]
        for li, blk in enumerate(self.p.blocks):
            a = self._ln(x, blk.ln1)
            q, k, v = self._heads(self._lin(a, blk.q)), self._heads(self._lin(a, blk.k)), self._heads(self._lin(a, blk.v))
            for j in range(t):
                self.k[li][rows, :, pos[:, j]] = k[:, :, j]
                self.v[li][rows, :, pos[:, j]] = v[:, :, j]
            sc = q @ self.k[li].swapaxes(-1, -2) * (1.0 / math.sqrt(self.dh)) + bias
            sc = np.exp(sc - sc.max(axis=-1, keepdims=True))
            att = (sc / sc.sum(axis=-1, keepdims=True)) @ self.v[li]
            x = x + self._lin(att.transpose(0, 2, 1, 3).reshape(b, t, -1), blk.o)
            hdn = self._lin(self._ln(x, blk.ln2), blk.mlp.fc1)
            h2 = hdn * hdn
            hdn = 0.5 * hdn * (1.0 + np.tanh(_GELU_C * (hdn + 0.044715 * h2 * hdn)))
            x = x + self._lin(hdn, blk.mlp.fc2)
        return self._lin(self._ln(x[:, -1], self.p.ln_f), self.p.head)


def sample_batch(policy: PlannerPolicy, vocab: Vocab, prompts: Sequence[TokenSeq], rngs: Sequence,
                 temperature: float = 1.0, max_new: int = 64, greedy: bool = False) -> list[TokenSeq]:
    """Sample one continuation per prompt; rows never influence each other.

    Each row draws one uniform per step from its own generator, so a row's
    rollout depends only on its prompt and stream.
    """
    if max_new < 1:
        raise ContractError("max_new must be at least 1")
    if temperature <= 0 and not greedy:
        raise ContractError("temperature must be positive (use greedy decoding for the zero limit)")
    n = len(prompts)
    lens = np.array([len(p) for p in prompts])
    for p in prompts:
        policy._check_ids(np.asarray(p.ids))
    width = min(int(lens.max()) + max_new, policy.cfg.context)
    buf = np.full((n, width), vocab.pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, :lens[i]] = p.ids
    dec = _CachedDecoder(policy, n, width)
    # prefill the shared-length prefix together, then per-row remainders one token at a time
    common = int(lens.min())
    z = dec.step(buf[:, :common], np.zeros(n, dtype=np.int64))
    logits = np.zeros((n, len(vocab)))
    logits[lens == common] = z[lens == common]
    for j in range(common, int(lens.max())):
        zj = dec.step(buf[:, j:j + 1], np.full(n, j))
        logits[lens == j + 1] = zj[lens == j + 1]
    cur = lens.copy()
    done = np.zeros(n, dtype=bool)
    logps: list[list[float]] = [[] for _ in range(n)]
    for _ in range(max_new):
        active = ~done & (cur < width)
        if not active.any():
            break
        lp = _log_softmax_np(logits / (1.0 if greedy else temperature))
        nxt = np.full(n, vocab.pad, dtype=np.int64)
        for b in np.flatnonzero(active):
            if greedy:
                tok = int(np.argmax(logits[b]))
            else:
                cdf = np.cumsum(np.exp(lp[b]))
                tok = int(min(np.searchsorted(cdf, rngs[b].random() * cdf[-1], side="right"), len(cdf) - 1))
            nxt[b] = tok
            buf[b, cur[b]] = tok
            logps[b].append(float(lp[b, tok]))
            if tok == vocab.eos:
                done[b] = True
        cur = cur + active
        if (done | (cur >= width)).all():
            break
        # finished rows keep feeding padding at their last slot; their outputs are ignored
        logits = dec.step(nxt[:, None], cur - 1)
    out = []
    for i, p in enumerate(prompts):
        seq = TokenSeq.marked(vocab, buf[i, :cur[i]], prompt_len=len(p), logps=tuple(logps[i]))
        out.append(replace(seq, malformed=seq.think_close is None))
    return out


def sample_rollout(policy: PlannerPolicy, vocab: Vocab, prompt: TokenSeq, temperature: float = 1.0,
                   max_new: int = 64, seed_stream=None, greedy: bool = False) -> TokenSeq:
    """Single rollout; ``seed_stream`` is a numpy Generator or a ``(seed, *path)`` tuple."""
    rng = seed_stream if isinstance(seed_stream, np.random.Generator) else stream(*(seed_stream or (0,)))
    return sample_batch(policy, vocab, [prompt], [rng], temperature, max_new, greedy)[0]


# -- scoring --------------------------------------------------------------------

@dataclass
class BatchScore:
    """Differentiable per-token scores for a padded batch of sequences.

    ``logps`` and ``log_probs`` are indexed ``[row, generated position]``;
    ``mask`` marks real (non-padding) generated tokens.
    """

    logps: Tensor
    log_probs: Tensor
    mask: np.ndarray
    lengths: np.ndarray
    states: list[Tensor] = field(default_factory=list)


def pad_ids(seqs: Sequence[TokenSeq], pad: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s.ids
    return out


def score_batch(policy: PlannerPolicy, vocab: Vocab, seqs: Sequence[TokenSeq], temperature: float = 1.0) -> BatchScore:
    for s in seqs:
        if s.prompt_len is None:
            raise ContractError("score_sequence needs the generated-region boundary")
        if s.prompt_len < 1:
            raise ContractError("the prompt must hold at least one token")
    ids = pad_ids(seqs, vocab.pad)
    b, t = ids.shape
    lengths = np.array([s.length for s in seqs])
    g = max(1, int(lengths.max()))
    mask = (np.arange(g)[None, :] < lengths[:, None]).astype(np.float64)
    prompt = np.array([s.prompt_len for s in seqs])
    pos = np.minimum(prompt[:, None] - 1 + np.arange(g)[None, :], t - 1)
    target = np.take_along_axis(ids, np.minimum(pos + 1, t - 1), axis=1)
    target = np.where(mask > 0, target, 0)
    states = policy.hidden(ids)
    flat = states[-1].reshape(b * t, -1)
    picked = T.embedding(flat, np.arange(b)[:, None] * t + pos)
    z = policy.logits_from(picked)
    if temperature != 1.0:
        z = z * (1.0 / temperature)
    log_probs = T.log_softmax(z, axis=-1)
    logps = T.gather(log_probs, target[:, :, None], axis=-1).reshape(b, g)
    return BatchScore(logps, log_probs, mask, lengths, states)


def score_sequence(policy: PlannerPolicy, vocab: Vocab, seq: TokenSeq, temperature: float = 1.0) -> Tensor:
    """Per-generated-token log-probs, differentiable w.r.t. the policy."""
    sc = score_batch(policy, vocab, [seq], temperature)
    return T.slice_(sc.logps, (0, slice(0, seq.length)))


# -- checkpoints ----------------------------------------------------------------

def save_planner(policy: PlannerPolicy, vocab: Vocab, directory) -> None:
    save_module(policy, directory, {"kind": "planner", "config": asdict(policy.cfg), "vocab_hash": vocab.hash(),
                                    "vocab": list(vocab.tokens), "version": policy.version})


def load_planner(directory) -> tuple[PlannerPolicy, Vocab]:
    m = read_manifest(directory)
    vocab = Vocab([t for t in m["vocab"] if t not in RESERVED])
    if vocab.hash() != m["vocab_hash"]:
        raise ContractError("vocabulary hash mismatch in planner checkpoint")
    policy = PlannerPolicy(PlannerConfig(**m["config"]))
    load_module(policy, directory)
    policy.version = m["version"]
    return policy, vocab
