import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_decode_fixture as random_fixture
from oracles import exhaustive_answer_scores
from raven.decode import (
    EOS,
    AnswerTrie,
    TableScorer,
    Vocabulary,
    allowed_next,
    build_trie,
    constrained_beam_search,
    decode_fixtures,
    exhaustive_ranking,
    read_fixtures,
    scorer_from_fixture,
)
from raven.errors import RavenError


def oracle_ranking(answers, table):
    def lp(prefix, tok):
        p = table[prefix][tok]
        return math.log(p) if p > 0 else -math.inf

    return exhaustive_answer_scores(answers, lp, EOS)


# -- trie -----------------------------------------------------------------------


def test_yes_no_trie():
    vocab = Vocabulary.from_answers(["yes", "no"])
    trie = build_trie(["yes", "no"], vocab.encode)
    assert trie.answer_count == 2
    assert allowed_next(trie, ()) == {vocab.id("yes"), vocab.id("no")}


def test_char_prefix_sharing():
    vocab = Vocabulary.from_answers(["two", "twelve"], unit="char")
    trie = build_trie(["two", "twelve"], vocab.encode)
    assert trie.answer_count == 2
    tw = vocab.encode("tw")
    assert len(trie.root.children) == 1
    assert allowed_next(trie, tw) == {vocab.id("o"), vocab.id("e")}


def test_answer_count_is_distinct_entries():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(60)]
    answers = [" ".join(rng.choice(words, size=int(rng.integers(1, 4)))) for _ in range(3129)]
    vocab = Vocabulary.from_answers(answers)
    assert build_trie(answers, vocab.encode).answer_count == len(set(answers))


def test_allowed_next_matches_rebuild():
    answers, _, trie, _ = random_fixture(3, max_answers=200)
    prefixes = {a[:i] for a in answers for i in range(len(a) + 1)}
    for p in prefixes:
        want = {a[len(p)] for a in answers if a[: len(p)] == p and len(a) > len(p)}
        if p in answers:
            want.add(EOS)
        assert allowed_next(trie, p) == want


def test_trie_errors():
    with pytest.raises(RavenError, match="empty sequence"):
        build_trie(["  "], Vocabulary().encode)
    with pytest.raises(RavenError, match="empty"):
        build_trie([], Vocabulary().encode)
    with pytest.raises(RavenError, match="end marker"):
        AnswerTrie().insert([3, EOS])
    with pytest.raises(RavenError, match="not a path"):
        allowed_next(build_trie(["a"], Vocabulary.from_answers(["a"]).encode), (9,))


# -- search ---------------------------------------------------------------------


def test_deterministic_scorer_yes():
    vocab = Vocabulary.from_answers(["yes", "no"])
    trie = build_trie(["yes", "no"], vocab.encode)
    y = vocab.id("yes")
    scorer = TableScorer({(): {y: 1.0}, (y,): {EOS: 1.0}}, len(vocab))
    best = constrained_beam_search(scorer, None, trie, beam=2)[0]
    assert vocab.decode(best.tokens) == "yes"
    assert best.logprob == 0.0


def test_prefix_answers_a_and_ab():
    vocab = Vocabulary.from_answers(["a", "ab"], unit="char")
    trie = build_trie(["a", "ab"], vocab.encode)
    a, b = vocab.id("a"), vocab.id("b")
    table = {(): {a: 0.9, b: 0.1, EOS: 0.0}, (a,): {b: 0.7, EOS: 0.3, a: 0.0}, (a, b): {EOS: 0.8, a: 0.1, b: 0.1}}
    hyps = constrained_beam_search(TableScorer(table, 3), None, trie, beam=2)
    assert [vocab.decode(h.tokens) for h in hyps] == ["ab", "a"]
    want = oracle_ranking([(a,), (a, b)], table)
    assert [(h.tokens, pytest.approx(h.logprob)) for h in hyps] == [(t, pytest.approx(s)) for t, s in want]


def test_bad_beam():
    _, _, trie, scorer = random_fixture(1, 5)
    with pytest.raises(RavenError):
        constrained_beam_search(scorer, None, trie, beam=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 6))
def test_closed_set(seed, beam):
    answers, _, trie, scorer = random_fixture(seed, max_answers=40)
    for h in constrained_beam_search(scorer, None, trie, beam):
        assert h.tokens in set(answers)
        assert h.complete


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_full_beam_equals_exhaustive(seed):
    answers, table, trie, scorer = random_fixture(seed, max_answers=30)
    hyps = constrained_beam_search(scorer, None, trie, beam=len(answers))
    want = oracle_ranking(answers, table)
    assert [h.tokens for h in hyps] == [t for t, _ in want]
    np.testing.assert_allclose([h.logprob for h in hyps], [s for _, s in want], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 8))
def test_beam_top1_bounded_by_optimum(seed, beam):
    # Pruned beam search is not monotone in the beam width in general, but it
    # can never beat the exhaustive optimum, and reaches it once beam covers
    # every answer.
    answers, table, trie, scorer = random_fixture(seed, max_answers=20)
    best = oracle_ranking(answers, table)[0][1]
    top = constrained_beam_search(scorer, None, trie, beam)[0].logprob
    assert top <= best + 1e-12
    for b in range(len(answers), len(answers) + 3):
        assert constrained_beam_search(scorer, None, trie, b)[0].logprob == pytest.approx(best)


def test_beam_width_not_monotone_in_general():
    # A documented counterexample: widening the beam lets an early-stopping
    # hypothesis crowd out the eventual best continuation.
    found = False
    for seed in range(400):
        _, _, trie, scorer = random_fixture(seed, max_answers=30, vocab=6)
        tops = [constrained_beam_search(scorer, None, trie, b)[0].logprob for b in range(1, 6)]
        if any(b < a - 1e-12 for a, b in zip(tops, tops[1:])):
            found = True
            break
    assert found


def test_exhaustive_ranking_agrees_with_oracle():
    answers, table, trie, scorer = random_fixture(11, 50)
    got = exhaustive_ranking(scorer, None, trie)
    want = oracle_ranking(answers, table)
    assert [h.tokens for h in got] == [t for t, _ in want]


def test_length_normalization_changes_preference():
    vocab = Vocabulary.from_answers(["x", "y z"])
    trie = build_trie(["x", "y z"], vocab.encode)
    x, y, z = (vocab.id(t) for t in "xyz")
    # x: 0.5 * 0.6 = 0.30; "y z": 0.5 * 0.7 * 0.7 = 0.245, but per token it wins.
    table = {(): {x: 0.5, y: 0.5, EOS: 0.0, z: 0.0}, (x,): {EOS: 0.6}, (y,): {z: 0.7}, (y, z): {EOS: 0.7}}
    scorer = TableScorer(table, len(vocab))
    plain = constrained_beam_search(scorer, None, trie, beam=4)
    normed = constrained_beam_search(scorer, None, trie, beam=4, length_normalize=True)
    assert vocab.decode(plain[0].tokens) == "x"
    assert vocab.decode(normed[0].tokens) == "y z"


# -- table scorers and fixtures -------------------------------------------------


def test_table_scorer_spreads_remaining_mass():
    s = TableScorer({(): {1: 0.5}}, 3)
    np.testing.assert_allclose(np.exp(s(None, ())), [0.25, 0.5, 0.25])
    np.testing.assert_allclose(np.exp(s(None, (1,))), [1 / 3] * 3)
    with pytest.raises(RavenError, match="exceed"):
        TableScorer({(): {0: 0.7, 1: 0.7}}, 3)


def test_decode_fixtures_end_to_end(tmp_path):
    answers = ["yes", "no", "two dogs"]
    fx = {"id": "q1", "table": {"": {"two": 0.8, "yes": 0.1}, "two": {"dogs": 0.9}, "two dogs": {"</s>": 0.95}}}
    p = tmp_path / "s.jsonl"
    p.write_text(json.dumps(fx) + "\n")
    out = decode_fixtures(answers, read_fixtures(p), beam=3)
    assert out[0]["id"] == "q1"
    ranked = out[0]["ranked"]
    assert ranked[0]["answer"] == "two dogs"
    assert ranked[0]["logprob"] == pytest.approx(math.log(0.8 * 0.9 * 0.95))
    assert {r["answer"] for r in ranked} <= set(answers)


def test_zero_probability_path_reports_null():
    answers = ["yes", "no"]
    fx = {"table": {"": {"yes": 1.0}, "yes": {"</s>": 1.0}}}
    out = decode_fixtures(answers, [fx], beam=2)
    assert out[0]["ranked"][0] == {"answer": "yes", "logprob": 0.0}
    assert out[0]["ranked"][1]["logprob"] is None


def test_scorer_fixture_unknown_token():
    vocab = Vocabulary.from_answers(["yes"])
    with pytest.raises(RavenError, match="not in vocabulary"):
        scorer_from_fixture({"table": {"": {"maybe": 0.5}}}, vocab)
