import numpy as np

from thinkgen_lab.autodiff import stream
from thinkgen_lab.corpus import (
    CANONICAL_REWRITE_P, SKIP_PLAN_P, noisy_rewrite, sample_transcripts, task_transcript,
)
from thinkgen_lab.world import KnowledgeTable, caption_tokens, layout, make_task


def test_transcripts_are_well_formed():
    table = KnowledgeTable(seed=0)
    for t in sample_transcripts(stream(0, "corpus"), 300, table):
        assert t.tokens[0] == "[SYS]" and t.tokens[-1] == "<eos>"
        if "<think>" in t.tokens:
            opn = t.tokens.index("<think>")
            assert t.tokens.count("<think>") == 1 and t.tokens.count("</think>") == 1
            assert t.tokens.index("</think>") > opn and t.loss_from == opn


def test_reasoning_transcripts_never_use_held_out_keys():
    table = KnowledgeTable(seed=0)
    held_out = set(table.held_out_keys)
    for t in sample_transcripts(stream(1, "corpus"), 400, table, {"reasoning": 1.0}):
        assert not held_out & set(t.tokens)
    facts = sample_transcripts(stream(2, "corpus"), 2000, table, {"fact": 1.0})
    assert held_out & {t.tokens[t.loss_from] for t in facts}


def test_composition_habits_match_their_rates():
    rng = stream(3, "habits")
    n, skipped, canonical = 3000, 0, 0
    for i in range(n):
        task = make_task("composition", "train", i)
        tokens = task_transcript(task, rng).tokens
        opn, close = tokens.index("<think>"), tokens.index("</think>")
        think = tokens[opn + 1:close]
        assert think in ([], layout(task.payload).description())
        skipped += not think
        canonical += tokens[close + 1:-1] == caption_tokens(task.payload)
    assert abs(skipped / n - SKIP_PLAN_P) < 0.03
    assert abs(canonical / n - CANONICAL_REWRITE_P) < 0.03


def test_noisy_rewrite_keeps_the_vocabulary():
    rng = stream(4, "rewrite")
    cap = caption_tokens(make_task("composition", "train", 9).payload)
    outs = [tuple(noisy_rewrite(rng, cap)) for _ in range(200)]
    assert tuple(cap) in outs and len(set(outs)) > 3
    assert all(len(o) > 0 for o in outs)
    assert np.mean([o == tuple(cap) for o in outs]) < 0.5
