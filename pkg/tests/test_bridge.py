import json

import numpy as np
import pytest

from thinkgen_lab.autodiff import stream
from thinkgen_lab.autodiff.tensor import Tensor, backward
from thinkgen_lab.bridge import (
    ALL, CUT, PRETRAIN, RL, Bridge, Connector, PrepaddingStates, PromptTemplate, build_prompt, collate, connect,
    extract_refined_states, prompt_hash, refine_batch, source_span,
)
from thinkgen_lab.errors import ContractError, MalformedRollout, ShapeError
from thinkgen_lab.planner import TokenSeq, Vocab


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


def words(vocab, seq):
    return vocab.decode(seq.ids)


def test_pretrain_template_layout(vocab):
    seq = build_prompt(PromptTemplate(PRETRAIN), ["red", "cube"], vocab)
    assert words(vocab, seq) == ["[SYS]", "red", "cube", "<think>", "</think>", "red", "cube"]
    assert seq.think_len == 0
    assert seq.think_close == seq.think_open + 1


def test_rl_template_layout(vocab):
    seq = build_prompt(PromptTemplate(RL), ["red", "cube"], vocab)
    assert words(vocab, seq) == ["[SYS]", "red", "cube", "<think>"]
    assert seq.think_close is None and seq.prompt_len == 4


def test_context_sits_before_content(vocab):
    seq = build_prompt(PromptTemplate(RL), ["remove", "p11"], vocab, context=["image", "red", "cube", "p11"])
    assert words(vocab, seq)[:2] == ["[SYS]", "image"]
    assert words(vocab, seq)[-3:] == ["remove", "p11", "<think>"]


def test_template_errors(vocab):
    with pytest.raises(ContractError):
        build_prompt(PromptTemplate(RL), [], vocab)
    with pytest.raises(ContractError):
        PromptTemplate("freestyle")


def seq_with(vocab, think_body, instruction, eos=True):
    toks = ["[SYS]", "red", "cube", "<think>", *think_body, "</think>", *instruction] + (["<eos>"] if eos else [])
    return TokenSeq.marked(vocab, vocab.encode(toks), prompt_len=4)


def fake_hiddens(n_layers, length, d, seed=0):
    rng = stream(seed, "hid")
    return [Tensor(rng.standard_normal((length, d))) for _ in range(n_layers)]


@pytest.mark.parametrize("m", [0, 1, 7])
def test_row_count_law(vocab, m):
    pads = PrepaddingStates(25, 8)
    instr = ["red"] * m
    for body in ([], ["one"], ["one", "two", "three", "blue"]):
        seq = seq_with(vocab, body, instr)
        out = extract_refined_states(fake_hiddens(3, len(seq), 4), seq, pads, vocab)
        assert out.shape == (25 + m, 8)


def test_extracted_rows_are_last_two_layers_after_close(vocab):
    seq = seq_with(vocab, ["one"], ["two", "red", "cubes"])
    h = fake_hiddens(4, len(seq), 3)
    pads = PrepaddingStates(2, 6, seed=1)
    out = extract_refined_states(h, seq, pads, vocab).data
    c = seq.think_close
    want = np.concatenate([h[2].data[c + 1:c + 4], h[3].data[c + 1:c + 4]], axis=1)
    assert np.array_equal(out[:2], pads.pads.data)
    assert np.array_equal(out[2:], want)


def test_all_mode_keeps_whole_sequence(vocab):
    seq = seq_with(vocab, ["one"], ["red"])
    assert source_span(seq, vocab, CUT) == (seq.think_close + 1, seq.think_close + 2)
    assert source_span(seq, vocab, ALL) == (0, seq.think_close + 2)


def test_missing_close_is_malformed(vocab):
    seq = build_prompt(PromptTemplate(RL), ["red"], vocab)
    with pytest.raises(MalformedRollout):
        extract_refined_states(fake_hiddens(2, len(seq), 4), seq, PrepaddingStates(3, 8), vocab)


def test_connector_identity_and_zero():
    x = Tensor(stream(0, "x").standard_normal((5, 6)))
    ident = Connector(6, 6, identity=True)
    ident.proj.bias.data = np.zeros(6)
    assert np.array_equal(ident(x).data, x.data)
    zero = Connector(6, 4)
    zero.proj.weight.data = np.zeros((6, 4))
    zero.proj.bias.data = np.zeros(4)
    assert np.array_equal(connect(x, zero, 2).states.data, np.zeros((5, 4)))
    with pytest.raises(ShapeError):
        Connector(6, 4, identity=True)
    with pytest.raises(ShapeError):
        zero(Tensor(np.zeros((2, 5))))


def test_connector_matches_rowwise_affine_oracle():
    rng = stream(2, "aff")
    c = Connector(6, 4, seed=4)
    c.proj.bias.data = rng.standard_normal(4)
    x = rng.standard_normal((7, 6))
    out = c(Tensor(x)).data
    w, b = c.proj.weight.data, c.proj.bias.data
    for i in range(7):
        row = [sum(x[i, k] * w[k, j] for k in range(6)) + b[j] for j in range(4)]
        assert np.allclose(out[i], row, rtol=0, atol=1e-12)


def test_condition_pack_rows_and_serialisation(vocab):
    seq = seq_with(vocab, [], ["red", "cube"])
    pre = extract_refined_states(fake_hiddens(2, len(seq), 4), seq, PrepaddingStates(3, 8), vocab)
    pack = connect(pre, Connector(8, 5), 3, {"policy": "v0", "prompt": prompt_hash(seq)})
    assert (pack.k, pack.m, pack.rows) == (3, 2, 5)
    blob, meta = pack.dumps()
    assert isinstance(blob, bytes) and json.loads(meta)["m"] == 2


def test_prepadding_receives_gradient(vocab):
    seq = seq_with(vocab, ["one"], ["red", "cube"])
    bridge = Bridge(4, 5, k=3, seed=0)
    pre = extract_refined_states(fake_hiddens(2, len(seq), 4), seq, bridge.prepad, vocab)
    loss = (connect(pre, bridge.connector, 3).states ** 2).sum()
    backward(loss)
    assert np.abs(bridge.prepad.pads.grad).sum() > 0


def test_refine_batch_matches_single_extraction(vocab):
    seqs = [seq_with(vocab, ["one"], ["red", "cube"]), seq_with(vocab, [], []), seq_with(vocab, ["a"], ["blue"])]
    width = max(len(s) for s in seqs)
    rng = stream(3, "st")
    a, b = rng.standard_normal((3, width, 4)), rng.standard_normal((3, width, 4))
    for mode in (CUT, ALL):
        bridge = Bridge(4, 5, k=2, seed=1, mode=mode)
        batch = refine_batch([a, b], seqs, vocab, bridge)
        singles = collate([connect(extract_refined_states([Tensor(a[i]), Tensor(b[i])], s, bridge.prepad, vocab, mode),
                                   bridge.connector, 2) for i, s in enumerate(seqs)])
        assert np.array_equal(batch.valid, singles.valid)
        assert np.allclose(batch.states.data[batch.valid], singles.states.data[singles.valid], atol=1e-12)
