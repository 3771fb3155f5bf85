"""Greedy/beam decoding tests: rigged models, real tiny models, and the
exhaustive-search optimality oracle."""

import numpy as np
import pytest

from ivqa import autodiff as ad
from ivqa.autodiff import Tensor
from ivqa.gradcheck import random_instance, random_parameters, tiny_config
from ivqa.inference import beam_decode, greedy_decode, score_sequence
from ivqa.model import Model
from ivqa.textdata import START_ID, Vocabulary


class ScriptedModel:
    """Decode-protocol stub whose step-t distribution is scripted.

    Satisfies the same begin/initial_state/step surface as Model, which is
    all the decoders use.
    """

    def __init__(self, config, dists):
        self.config = config
        self.dists = dists  # list indexed by step-1; last entry repeats

    def begin(self, feats, answer_ids):
        return {"step": 0}

    def initial_state(self):
        return Tensor(np.zeros(1)), Tensor(np.zeros(1))

    def step(self, ctx, prev_token_id, h1, h2):
        # state encodes the step index so beam hypotheses stay aligned
        t = int(h1.values[0])
        dist = self.dists[min(t, len(self.dists) - 1)]
        nxt = Tensor(np.array([t + 1.0]))
        beta = Tensor(np.array([1.0]))
        return Tensor(np.array(dist)), nxt, nxt, beta


def _vocab(tokens):
    return Vocabulary.from_tokens(list(tokens))


def _one_hot(n, i, value=1.0):
    v = np.zeros(n)
    v[i] = value
    rest = (1.0 - value) / (n - 1) if n > 1 else 0.0
    v[v == 0] = rest
    return v


def test_greedy_rigged_one_hot_emits_expected():
    vocab = _vocab(["what", "color", "?"])
    cfg = tiny_config(vocab_size=len(vocab))
    model = ScriptedModel(
        cfg,
        [_one_hot(6, vocab.id_for("what")), _one_hot(6, vocab.id_for("?"))],
    )
    result = greedy_decode(model, vocab, feats=None, answer_ids=(0,))
    assert result.tokens == ["what", "?"]
    assert result.logprob == 0.0  # log(1) per step
    assert len(result.trace) == 2


def test_greedy_uniform_ties_take_lowest_id():
    # "?" at the lowest non-reserved id: uniform model stops immediately
    vocab = _vocab(["?", "what"])
    cfg = tiny_config(vocab_size=len(vocab))
    uniform = np.full(len(vocab), 1.0 / len(vocab))
    model = ScriptedModel(cfg, [uniform])
    result = greedy_decode(model, vocab, None, (0,))
    assert result.tokens == ["?"]

    # "?" absent: uniform model runs to max_len on the lowest allowed token
    vocab2 = _vocab(["aaa", "bbb"])
    model2 = ScriptedModel(tiny_config(vocab_size=len(vocab2)), [np.full(5, 0.2)])
    result2 = greedy_decode(model2, vocab2, None, (0,), max_len=4)
    assert result2.tokens == ["aaa"] * 4


def test_greedy_masks_reserved_tokens():
    vocab = _vocab(["word", "?"])
    # pad gets nearly all the mass; decoding must never pick it
    dist = np.array([0.9, 0.02, 0.02, 0.03, 0.03])
    model = ScriptedModel(tiny_config(vocab_size=5), [dist])
    result = greedy_decode(model, vocab, None, (0,), max_len=2)
    assert result.tokens == ["word", "word"]  # 0.03 tie breaks to the lower id
    # the recorded score still refers to the full distribution
    assert result.logprob == pytest.approx(2 * np.log(0.03))


def _real_model(seed=0, **overrides):
    cfg = tiny_config(**overrides)
    rng = np.random.default_rng(seed)
    params = random_parameters(cfg, rng)
    model = Model(cfg, params)
    _, feats = random_instance(cfg, rng)
    vocab = _vocab([f"w{i}" for i in range(cfg.vocab_size - 4)] + ["?"])
    answer = tuple(int(x) for x in rng.integers(3, cfg.vocab_size, size=3))
    return model, vocab, feats, answer


def test_greedy_logprob_matches_score_sequence():
    model, vocab, feats, answer = _real_model(seed=1)
    result = greedy_decode(model, vocab, feats, answer, max_len=5)
    rescored = score_sequence(model, vocab, feats, answer, result.tokens)
    assert abs(result.logprob - rescored) < 1e-9


def test_beam1_equals_greedy_over_random_models():
    for seed in range(100):
        model, vocab, feats, answer = _real_model(seed=seed, vocab_size=8)
        greedy = greedy_decode(model, vocab, feats, answer, max_len=4)
        beamed = beam_decode(model, vocab, feats, answer, beam=1, top_n=1, max_len=4)[0]
        assert beamed.tokens == greedy.tokens, f"seed {seed}"
        assert beamed.logprob == pytest.approx(greedy.logprob, abs=1e-12)
        assert len(beamed.trace) == len(greedy.trace)
        for a, b in zip(beamed.trace, greedy.trace):
            assert a.token_id == b.token_id
            np.testing.assert_array_equal(a.beta, b.beta)


def test_beam_top3_sorted():
    model, vocab, feats, answer = _real_model(seed=5)
    results = beam_decode(model, vocab, feats, answer, beam=4, top_n=3, max_len=4)
    assert len(results) == 3
    scores = [r.logprob for r in results]
    assert scores == sorted(scores, reverse=True)


def _enumerate_decodes(alphabet, stop, max_len):
    """All sequences a decoder can emit: stop token ends a sequence early,
    otherwise generation runs to max_len."""
    out = []

    def rec(prefix):
        if len(prefix) == max_len:
            out.append(prefix)
            return
        for tok in alphabet:
            if tok == stop:
                out.append(prefix + [tok])
            else:
                rec(prefix + [tok])

    rec([])
    return out


def test_beam_exhaustive_enumeration_optimality():
    # vocab of 5 (pad/start/unk + "a" + "?"), max_len 3: the candidate space
    # is tiny enough to score every decodeable sequence directly
    for seed in range(10):
        model, _, feats, answer = _real_model(seed=seed, vocab_size=5)
        vocab = _vocab(["a", "?"])
        candidates = _enumerate_decodes(["a", "?"], "?", 3)
        best_score = max(
            score_sequence(model, vocab, feats, answer, c) for c in candidates
        )
        full_beam = beam_decode(model, vocab, feats, answer, beam=125, top_n=1, max_len=3)[0]
        assert full_beam.logprob == pytest.approx(best_score, abs=1e-12)
        beam4 = beam_decode(model, vocab, feats, answer, beam=4, top_n=1, max_len=3)[0]
        assert beam4.logprob <= best_score + 1e-12


def test_wider_beam_never_worse():
    for seed in range(15):
        model, vocab, feats, answer = _real_model(seed=seed + 50, vocab_size=8)
        best = None
        for b in (1, 2, 4, 8):
            top = beam_decode(model, vocab, feats, answer, beam=b, top_n=1, max_len=4)[0]
            if best is not None:
                assert top.logprob >= best - 1e-12
            best = top.logprob


def test_hypothesis_scores_monotone_nonincreasing():
    model, vocab, feats, answer = _real_model(seed=77)
    result = greedy_decode(model, vocab, feats, answer, max_len=6)
    running = 0.0
    prefix_scores = []
    for tok in result.tokens:
        prefix_scores.append(score_sequence(model, vocab, feats, answer,
                                            result.tokens[: len(prefix_scores) + 1]))
    assert all(b <= a + 1e-12 for a, b in zip(prefix_scores, prefix_scores[1:]))


def test_decode_terminates_within_max_len():
    for seed in range(10):
        model, vocab, feats, answer = _real_model(seed=seed + 200)
        result = greedy_decode(model, vocab, feats, answer, max_len=7)
        assert 1 <= len(result.tokens) <= 7
        assert len(result.trace) == len(result.tokens)
        for step in result.trace:
            assert abs(step.beta.sum() - 1.0) < 1e-5


def test_score_sequence_empty_is_zero():
    model, vocab, feats, answer = _real_model(seed=3)
    assert score_sequence(model, vocab, feats, answer, []) == 0.0


def test_score_sequence_rigged_one_hot_is_zero():
    vocab = _vocab(["what", "?"])
    model = ScriptedModel(
        tiny_config(vocab_size=5),
        [_one_hot(5, vocab.id_for("what")), _one_hot(5, vocab.id_for("?"))],
    )
    assert score_sequence(model, vocab, None, (0,), ["what", "?"]) == 0.0


def test_score_sequence_rejects_unknown_token():
    model, vocab, feats, answer = _real_model(seed=4)
    with pytest.raises(ValueError):
        score_sequence(model, vocab, feats, answer, ["not-a-token"])


def test_score_sequence_rejects_overlong():
    model, vocab, feats, answer = _real_model(seed=4)
    with pytest.raises(ValueError):
        score_sequence(model, vocab, feats, answer, ["w0"] * 25)


def test_beam_rejects_bad_size():
    model, vocab, feats, answer = _real_model(seed=4)
    with pytest.raises(ValueError):
        beam_decode(model, vocab, feats, answer, beam=0)
