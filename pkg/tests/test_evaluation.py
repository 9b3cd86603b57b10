import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selgen.corpus import Vocabulary
from selgen.evaluation import (
    cbleu,
    embedding_neighbors,
    evaluation_report,
    export_alignment,
    read_alignment,
    sbleu,
    selection_f1,
    token_match,
)
from selgen.model import AlignmentTrace


def toks(s):
    return s.split()


# ---------------------------------------------------------------- BLEU


def test_identity_is_100():
    corpus = [toks("a high near 61 ."), toks("winds between 5 and 10 mph .")]
    assert sbleu(corpus, corpus).score == pytest.approx(100.0, abs=1e-12)
    assert cbleu(corpus, corpus).score == pytest.approx(100.0, abs=1e-12)


def test_no_shared_unigram_is_zero():
    assert sbleu([toks("x y z w")], [toks("a b c d")]).score == 0.0


def test_hand_case_6687():
    rep = sbleu([toks("a b c d e")], [toks("a b c d f")])
    assert rep.precisions == [4 / 5, 3 / 4, 2 / 3, 1 / 2] and rep.brevity_penalty == 1.0
    expect = 100 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert rep.score == pytest.approx(expect, abs=1e-12)
    assert round(rep.score, 2) == 66.87


def test_brevity_penalty_and_closest_reference():
    rep = sbleu([toks("a b c d")], [[toks("a b c d e f"), toks("a b c d x y z w")]])
    assert rep.reference_length == 6
    assert rep.brevity_penalty == pytest.approx(math.exp(1 - 6 / 4))
    # equidistant references: the shorter length wins
    assert sbleu([toks("a b c d e")], [[toks("a b c d"), toks("a b c d e f")]]).reference_length == 4


def test_clipping():
    rep = sbleu([toks("the the the the")], [toks("the cat sat on")])
    assert rep.matches[0] == 1


def test_errors():
    with pytest.raises(ValueError):
        sbleu([], [])
    with pytest.raises(ValueError):
        sbleu([toks("a")], [toks("a"), toks("b")])


def test_numeric_slack_predicate():
    assert token_match("58", "60", 5) and token_match("60", "55", 5)
    assert not token_match("58", "64", 5)
    assert not token_match("5.5", "5", 5) and token_match("low", "low", 5)
    assert not token_match("58", "60", 0)


def test_low_around_58_counts_as_full_match():
    cand, exact = [toks("low around 58")], [toks("low around 60")]
    ref = [toks("low around 60")]
    a, b = cbleu(cand, ref), cbleu(exact, ref)
    assert a.matches == b.matches and a.totals == b.totals and a.score == b.score
    # a 3-token sentence has no 4-grams, so also check inside a longer description
    long_cand = [toks("mostly cloudy , with a low around 58 .")]
    long_ref = [toks("mostly cloudy , with a low around 60 .")]
    assert cbleu(long_cand, long_ref).score == pytest.approx(100.0)
    assert sbleu(long_cand, long_ref).score < 100.0


def test_deviation_six_is_a_mismatch():
    rep = cbleu([toks("low around 58")], [toks("low around 64")])
    assert rep.matches[0] == 2


def test_greedy_positional_consumption():
    # "60 60" vs a single "58": the reference unigram is consumed once
    rep = cbleu([toks("60 60")], [toks("58 x")])
    assert rep.matches[0] == 1


numeric_tokens = st.lists(st.sampled_from(["a", "b", "low", "50", "52", "55", "58", "60", "64", "70"]), min_size=1, max_size=9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(numeric_tokens, numeric_tokens), min_size=1, max_size=4))
def test_slack_zero_equals_sbleu(pairs):
    cands, refs = [c for c, _ in pairs], [r for _, r in pairs]
    a, b = cbleu(cands, refs, slack=0), sbleu(cands, refs)
    assert a.matches == b.matches and a.score == b.score


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(numeric_tokens, numeric_tokens), min_size=1, max_size=4))
def test_cbleu_at_least_sbleu(pairs):
    cands, refs = [c for c, _ in pairs], [r for _, r in pairs]
    assert cbleu(cands, refs).score >= sbleu(cands, refs).score - 1e-12


# ------------------------------------------------------------------ F-1


def test_f1_hand_cases():
    r = selection_f1([{0, 1}], [{1, 2}])
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)
    assert selection_f1([{1, 2}, {0}], [{1, 2}, {0}]).f1 == 1.0
    assert selection_f1([{0}], [{1}]).f1 == 0.0


def test_f1_is_micro_averaged():
    r = selection_f1([{0}, {0, 1, 2, 3}], [{0}, {0}])
    assert r.precision == pytest.approx(2 / 5) and r.recall == 1.0


def test_missing_gold_excluded(caplog):
    r = selection_f1([{0}, {1}], [None, {1}])
    assert r.skipped == 1 and r.f1 == 1.0 and "excluded" in caplog.text


@settings(max_examples=100)
@given(
    st.lists(st.tuples(st.sets(st.integers(0, 6)), st.sets(st.integers(0, 6), min_size=1)), min_size=1, max_size=4),
    st.integers(0, 3),
    st.integers(0, 6),
)
def test_f1_monotone(rows, which, extra):
    preds, gold = [set(p) for p, _ in rows], [g for _, g in rows]
    which %= len(rows)
    base = selection_f1(preds, gold).f1
    grown = [set(p) for p in preds]
    grown[which].add(extra)
    if extra in preds[which]:
        return
    new = selection_f1(grown, gold).f1
    if extra in gold[which]:
        assert new >= base - 1e-12
    else:
        assert new <= base + 1e-12


# ------------------------------------------------------------ embeddings


def _vocab(*words):
    return Vocabulary(["<pad>", "<s>", "</s>", "<unk>", *words])


def test_neighbors_scale_invariance_and_ties():
    vocab = _vocab("gust", "gusts", "rain", "snow")
    # reserved rows point the same way as "gust" and must still be skipped
    E = np.array([[1, 0], [1, 0], [1, 0], [1, 0], [1, 0.0], [3, 0.0], [1, 1.0], [1, 1.0]])
    out = embedding_neighbors(E, vocab, "gust", 3)
    assert out[0] == ("gusts", pytest.approx(1.0))
    # equal similarity: alphabetical order
    assert [w for w, _ in out[1:]] == ["rain", "snow"] and out[1][1] == pytest.approx(2**-0.5)
    names = [w for w, _ in embedding_neighbors(E, vocab, "gusts", 3)]
    assert names[0] == "gust" and "<pad>" not in names and "gusts" not in names


def test_neighbors_positive_rescaling_of_rows():
    rng = np.random.default_rng(0)
    vocab = _vocab(*"abcdefg")
    E = rng.normal(size=(len(vocab), 4))
    scaled = E * rng.uniform(0.1, 10, size=(len(vocab), 1))
    a = embedding_neighbors(E, vocab, "c", 4)
    b = embedding_neighbors(scaled, vocab, "c", 4)
    assert [w for w, _ in a] == [w for w, _ in b]
    assert np.allclose([s for _, s in a], [s for _, s in b], atol=1e-12)


def test_neighbors_errors():
    vocab = _vocab("a", "b")
    E = np.eye(len(vocab))
    with pytest.raises(ValueError):
        embedding_neighbors(E[:-1], vocab, "a", 1)
    assert embedding_neighbors(E, vocab, "a", 0) == []
    with pytest.raises(ValueError, match="reserved token"):
        embedding_neighbors(E, vocab, "</s>", 1)
    with pytest.raises(KeyError):
        embedding_neighbors(E, vocab, "zebra", 1)


# ------------------------------------------------------------- alignment


def test_export_alignment_roundtrip(tmp_path):
    tr = AlignmentTrace(np.array([0.9, 0.3]))
    tr.alpha.extend([np.array([0.25, 0.75]), np.array([1 / 3, 2 / 3])])
    path = tmp_path / "a.tsv"
    export_alignment(tr, ["high", "61"], ["id-0:temperature", "id-1:windDir"], path, svg=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 4 and lines[0].split("\t") == ["token", "id-0:temperature", "id-1:windDir"]
    labels, p, tokens, alpha = read_alignment(path)
    assert tokens == ["high", "61"] and np.allclose(p, [0.9, 0.3])
    assert np.max(np.abs(alpha - np.stack(tr.alpha))) <= 1e-6
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=2e-6)
    assert (tmp_path / "a.svg").read_text().startswith("<svg")


def test_export_alignment_dimension_check(tmp_path):
    tr = AlignmentTrace(None)
    tr.alpha.append(np.array([1.0]))
    with pytest.raises(ValueError):
        export_alignment(tr, ["a", "b"], ["r"], tmp_path / "x.tsv")


# ---------------------------------------------------------------- report


def test_report_fields_and_errors():
    hyps = [toks("a b c d e")]
    rep = evaluation_report(hyps, [toks("a b c d f")], [{0}], [{0, 1}])
    assert set(rep) >= {"sbleu", "cbleu", "f1", "precision", "recall", "n_scenarios", "warnings"}
    assert rep["f1"] == pytest.approx(2 / 3)
    with pytest.raises(ValueError, match="gold selection unavailable"):
        evaluation_report(hyps, hyps, None, None, metrics=["f1"])
    with pytest.raises(ValueError):
        evaluation_report(hyps, hyps + hyps)
