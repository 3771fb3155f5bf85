"""Greedy and beam-search question generation.

Decoding selects over the model's full output distribution but masks the
pad/start (and, by default, unk) ids from *selection*, so recorded log
probabilities always refer to the unmodified distribution and
``score_sequence`` reproduces a decode's score exactly.  Generation stops at
the question-mark token or at the length cap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .model import DecodeContext, FeatureTensors, Model, TraceStep
from .textdata import PAD_ID, QUESTION_MARK, START_ID, UNK_ID, Vocabulary

PROB_FLOOR = 1e-12


@dataclass
class GenerationResult:
    tokens: list[str]
    logprob: float
    trace: list[TraceStep]


@dataclass
class BeamHypothesis:
    token_ids: list[int]
    logprob: float
    h1: object
    h2: object
    trace: list[TraceStep]
    finished: bool = False


def _masked_ids(vocab: Vocabulary, mask_unk: bool) -> list[int]:
    ids = [PAD_ID, START_ID]
    if mask_unk:
        ids.append(UNK_ID)
    return [i for i in ids if i < len(vocab)]


def _step_logprob(p: np.ndarray, token_id: int) -> float:
    return math.log(max(float(p[token_id]), PROB_FLOOR))


def greedy_decode(
    model: Model,
    vocab: Vocabulary,
    feats: FeatureTensors,
    answer_ids,
    max_len: int | None = None,
    mask_unk: bool = True,
) -> GenerationResult:
    """Argmax decoding (ties break to the lowest id) with question-mark stop."""
    max_len = model.config.max_question_len if max_len is None else max_len
    stop_id = vocab.token_to_id.get(QUESTION_MARK)
    masked = _masked_ids(vocab, mask_unk)
    ctx = model.begin(feats, answer_ids)
    h1, h2 = model.initial_state()
    prev = START_ID
    tokens: list[int] = []
    trace: list[TraceStep] = []
    logprob = 0.0
    for t in range(1, max_len + 1):
        dist, h1, h2, beta = model.step(ctx, prev, h1, h2)
        p = dist.values
        selectable = p.copy()
        selectable[masked] = -1.0
        choice = int(np.argmax(selectable))  # first max = lowest id on ties
        logprob += _step_logprob(p, choice)
        tokens.append(choice)
        trace.append(TraceStep.from_beta(t, choice, beta.values))
        if stop_id is not None and choice == stop_id:
            break
        prev = choice
    return GenerationResult(
        tokens=[vocab.token_for(i) for i in tokens], logprob=logprob, trace=trace
    )


def beam_decode(
    model: Model,
    vocab: Vocabulary,
    feats: FeatureTensors,
    answer_ids,
    beam: int,
    top_n: int = 1,
    max_len: int | None = None,
    mask_unk: bool = True,
) -> list[GenerationResult]:
    """Length-unnormalized beam search; beam=1 reproduces greedy_decode exactly.

    Finished hypotheses are frozen and keep competing on total log
    probability.  Returns the ``top_n`` best, score-descending.
    """
    if beam < 1:
        raise ValueError("beam size must be >= 1")
    max_len = model.config.max_question_len if max_len is None else max_len
    stop_id = vocab.token_to_id.get(QUESTION_MARK)
    masked = set(_masked_ids(vocab, mask_unk))
    allowed = [i for i in range(len(vocab)) if i not in masked]
    ctx = model.begin(feats, answer_ids)
    h1, h2 = model.initial_state()
    beams = [BeamHypothesis(token_ids=[], logprob=0.0, h1=h1, h2=h2, trace=[])]
    for t in range(1, max_len + 1):
        unfinished = [h for h in beams if not h.finished]
        if not unfinished:
            break
        candidates = [h for h in beams if h.finished]
        for hyp in unfinished:
            prev = hyp.token_ids[-1] if hyp.token_ids else START_ID
            dist, h1n, h2n, beta = model.step(ctx, prev, hyp.h1, hyp.h2)
            p = dist.values
            ranked = sorted(allowed, key=lambda j: (-p[j], j))[: min(beam, len(allowed))]
            for j in ranked:
                done = (stop_id is not None and j == stop_id) or t == max_len
                candidates.append(
                    BeamHypothesis(
                        token_ids=hyp.token_ids + [j],
                        logprob=hyp.logprob + _step_logprob(p, j),
                        h1=h1n,
                        h2=h2n,
                        trace=hyp.trace + [TraceStep.from_beta(t, j, beta.values)],
                        finished=done,
                    )
                )
        candidates.sort(key=lambda h: (-h.logprob, tuple(h.token_ids)))
        beams = candidates[:beam]
    beams.sort(key=lambda h: (-h.logprob, tuple(h.token_ids)))
    return [
        GenerationResult(
            tokens=[vocab.token_for(i) for i in h.token_ids],
            logprob=h.logprob,
            trace=h.trace,
        )
        for h in beams[:top_n]
    ]


def score_sequence(
    model: Model,
    vocab: Vocabulary,
    feats: FeatureTensors,
    answer_ids,
    tokens: list[str],
) -> float:
    """Total log probability of ``tokens`` under teacher forcing (no length
    normalization); the empty sequence scores 0."""
    if len(tokens) > model.config.max_question_len:
        raise ValueError(f"sequence longer than max_question_len ({len(tokens)})")
    ids = []
    for tok in tokens:
        tid = vocab.token_to_id.get(tok)
        if tid is None:
            raise ValueError(f"token {tok!r} is not in the vocabulary")
        ids.append(tid)
    if not ids:
        return 0.0
    ctx = model.begin(feats, answer_ids)
    h1, h2 = model.initial_state()
    prev = START_ID
    total = 0.0
    for tid in ids:
        dist, h1, h2, _ = model.step(ctx, prev, h1, h2)
        total += _step_logprob(dist.values, tid)
        prev = tid
    return total


def write_generation(fh, image_id: str, answer: str, result: GenerationResult) -> None:
    fh.write(
        json.dumps(
            {
                "image_id": image_id,
                "answer": answer,
                "question": " ".join(result.tokens),
                "logprob": result.logprob,
            },
            sort_keys=True,
        )
        + "\n"
    )


def write_trace(fh, vocab: Vocabulary, result: GenerationResult) -> None:
    """One JSON line per generated step: t, token, beta, top1, top2."""
    for step in result.trace:
        fh.write(
            json.dumps(
                {
                    "t": step.t,
                    "token": vocab.token_for(step.token_id),
                    "beta": [float(b) for b in step.beta],
                    "top1": step.top1,
                    "top2": step.top2,
                }
            )
            + "\n"
        )
