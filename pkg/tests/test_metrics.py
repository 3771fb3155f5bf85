"""Metric tests: hand-computed fixtures, independent oracle comparison, and
corpus-level invariants."""

import json
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import metric_oracle
from ivqa import metrics as mx

DATA = Path(__file__).parent / "data"


def P(hyp, *refs):
    return (hyp.split(), [r.split() for r in refs])


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_perfect_corpus():
    pairs = [P("what color is it ?", "what color is it ?"), P("a b c d", "a b c d")]
    assert mx.bleu_corpus(pairs) == [1.0, 1.0, 1.0, 1.0]


def test_bleu_clipping_hand_case():
    # hyp "the the the" vs ref "the cat": clipped p1 = 1/3, BP = 1
    pairs = [P("the the the", "the cat")]
    bleu = mx.bleu_corpus(pairs)
    assert bleu[0] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_bleu_brevity_penalty_hand_case():
    # hyp "a b" vs ref "a b c d": BP = exp(1 - 4/2) = e^-1, p1 = 1
    pairs = [P("a b", "a b c d")]
    bleu = mx.bleu_corpus(pairs)
    assert bleu[0] == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert bleu[0] == pytest.approx(0.36788, abs=1e-5)


def test_bleu_zero_ngram_zeroes_higher_orders():
    pairs = [P("a b a b", "b a x y")]  # bigrams "a b"/"b a" overlap, no trigram overlap
    bleu = mx.bleu_corpus(pairs)
    assert bleu[0] > 0 and bleu[1] > 0
    assert bleu[2] == 0.0 and bleu[3] == 0.0


def test_bleu_monotone_in_order():
    pairs = [
        P("what color is the sign ?", "what color is the sign ?"),
        P("is this a cake ?", "is this a dessert ?"),
        P("how many dogs ?", "what animal is that ?"),
    ]
    b = mx.bleu_corpus(pairs)
    assert b[0] >= b[1] >= b[2] >= b[3]


def test_bleu_empty_corpus_rejected():
    with pytest.raises(ValueError):
        mx.bleu_corpus([])


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def test_rouge_identical():
    assert mx.rouge_l([P("a b c", "a b c")]) == pytest.approx(1.0)


def test_rouge_hand_case():
    # ref "a b c d", hyp "a c d": L=3, R=0.75, P=1.0, beta=1.2
    score = mx.rouge_l([P("a c d", "a b c d")])
    expected = (1 + 1.44) * 0.75 * 1.0 / (0.75 + 1.44 * 1.0)
    assert score == pytest.approx(expected, abs=1e-12)
    assert score == pytest.approx(0.83562, abs=1e-5)


def test_rouge_disjoint_is_zero():
    assert mx.rouge_l([P("a b c", "x y z")]) == 0.0


def test_rouge_multiref_takes_best():
    pair = P("a b c", "x y z", "a b c")
    assert mx.rouge_l([pair]) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def _distinct_corpus():
    return [
        P("what color is the sign ?", "what color is the sign ?"),
        P("is the horse brown ?", "is the horse brown ?"),
        P("how many dogs are there ?", "how many dogs are there ?"),
    ]


def test_cider_identical_distinct_corpus_is_ten():
    assert mx.cider(_distinct_corpus()) == pytest.approx(10.0, abs=1e-9)


def test_cider_disjoint_pair_scores_zero():
    pairs = _distinct_corpus() + [P("zebra stripes", "pelican beak wing")]
    # the disjoint pair contributes 0; removing it raises the mean
    with_junk = mx.cider(pairs)
    without = mx.cider(_distinct_corpus())
    assert with_junk < without


def test_cider_matches_independent_oracle():
    pairs = [
        P("what color is the sign ?", "what color is the sign ?"),
        P("is this a cake ?", "is this a dessert ?", "is this a cake ?"),
        P("how many dogs are there ?", "what animal is eating ?"),
    ]
    ours = mx.cider(pairs)
    ref = metric_oracle.cider_oracle(pairs)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_cider_requires_two_distinct_references():
    with pytest.raises(ValueError):
        mx.cider([P("a b", "a b")])
    with pytest.raises(ValueError):
        mx.cider([P("a b", "c d"), P("x y", "c d")])


def test_bleu_rouge_match_independent_oracle():
    pairs = [
        P("what color is the sign ?", "what color is the sign ?"),
        P("what is the man wearing ?", "what is the man holding ?", "what is the man wearing today ?"),
        P("is this a cake ?", "is this a dessert ?"),
    ]
    assert mx.bleu_corpus(pairs) == pytest.approx(metric_oracle.bleu_oracle(pairs), abs=1e-12)
    assert mx.rouge_l(pairs) == pytest.approx(metric_oracle.rouge_oracle(pairs), abs=1e-12)


# ---------------------------------------------------------------------------
# corpus invariants
# ---------------------------------------------------------------------------


_sentence = st.lists(
    st.sampled_from("what is the a dog cat red blue sign ? how many".split()),
    min_size=1,
    max_size=8,
)


@settings(max_examples=40, deadline=None)
@given(data=st.lists(st.tuples(_sentence, _sentence), min_size=2, max_size=6), seed=st.integers(0, 100))
def test_metrics_invariant_under_reordering(data, seed):
    pairs = [(hyp, [ref]) for hyp, ref in data]
    import random

    shuffled = pairs[:]
    random.Random(seed).shuffle(shuffled)
    assert mx.bleu_corpus(pairs) == mx.bleu_corpus(shuffled)
    assert mx.rouge_l(pairs) == pytest.approx(mx.rouge_l(shuffled), abs=1e-12)
    distinct = {tuple(map(tuple, refs)) for _, refs in pairs}
    if len(distinct) >= 2:
        assert mx.cider(pairs) == pytest.approx(mx.cider(shuffled), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(data=st.lists(st.tuples(_sentence, _sentence), min_size=1, max_size=6))
def test_bleu_order_monotonicity_property(data):
    pairs = [(hyp, [ref]) for hyp, ref in data]
    b = mx.bleu_corpus(pairs)
    assert b[0] >= b[1] >= b[2] >= b[3] >= 0.0
    assert all(0.0 <= x <= 1.0 for x in b)


# ---------------------------------------------------------------------------
# evaluate_corpus
# ---------------------------------------------------------------------------


def test_evaluate_identical_files(tmp_path):
    gold = tmp_path / "gold.jsonl"
    recs = [
        {"image_id": "a", "answer": "yes", "question": "is this a cake ?"},
        {"image_id": "b", "answer": "green", "question": "what color is it ?"},
        {"image_id": "c", "answer": "two", "question": "how many dogs ?"},
    ]
    gold.write_text("\n".join(json.dumps(r) for r in recs) + "\n", encoding="utf-8")
    report = mx.evaluate_corpus(gold, gold)
    assert report.bleu1 == report.bleu4 == 1.0
    assert report.rouge_l == 1.0
    assert report.cider == pytest.approx(10.0, abs=1e-9)
    assert report.n_pairs == 3


def test_evaluate_report_keys():
    report = mx.score_pairs(_distinct_corpus())
    assert set(report.to_dict().keys()) == {
        "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "n_pairs",
    }


def test_evaluate_key_mismatch_lists_missing(tmp_path):
    gold = tmp_path / "gold.jsonl"
    gen = tmp_path / "gen.jsonl"
    gold.write_text(
        json.dumps({"image_id": "a", "answer": "x", "question": "q ?"}) + "\n",
        encoding="utf-8",
    )
    gen.write_text(
        json.dumps({"image_id": "b", "answer": "y", "question": "q ?"}) + "\n",
        encoding="utf-8",
    )
    with pytest.raises(ValueError) as err:
        mx.evaluate_corpus(gen, gold)
    assert "('a', 'x')" in str(err.value) and "('b', 'y')" in str(err.value)


def test_evaluate_matches_golden_file():
    report = mx.evaluate_corpus(DATA / "metrics_gen.jsonl", DATA / "metrics_gold.jsonl")
    golden = json.loads((DATA / "golden_metrics.json").read_text(encoding="utf-8"))
    for key, expected in golden.items():
        got = report.to_dict()[key]
        assert got == pytest.approx(expected, abs=1e-6), key
