"""Corpus-level BLEU-1..4, ROUGE-L, and CIDEr over generated-vs-gold questions.

Conventions are pinned here so scores are internally comparable:

* BLEU: corpus-level clipped n-gram precision, brevity penalty
  ``min(1, exp(1 - r/c))`` with r the per-pair closest reference length, and
  no smoothing (a zero precision zeroes every higher-order score).
* ROUGE-L: LCS-based F with beta = 1.2, best reference per pair, mean over pairs.
* CIDEr: TF-IDF n-gram cosine for n = 1..4 with IDF = log(N / (1 + df)) over
  the N reference sets, averaged over n and pairs, scaled by 10.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

from .textdata import tokenize

ROUGE_BETA = 1.2
CIDER_SCALE = 10.0

# (hypothesis tokens, [reference token lists, >= 1])
EvalPair = tuple[list[str], list[list[str]]]


@dataclass(frozen=True)
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    n_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(pairs: list[EvalPair]) -> None:
    if not pairs:
        raise ValueError("empty evaluation corpus")
    for hyp, refs in pairs:
        if not refs:
            raise ValueError("every pair needs at least one reference")


def _closest_ref_len(hyp_len: int, refs: list[list[str]]) -> int:
    # closest reference length; ties prefer the shorter reference
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu_corpus(pairs: list[EvalPair], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts and the brevity penalty."""
    _check_pairs(pairs)
    clipped = [0] * max_n
    guess = [0] * max_n
    hyp_total = 0
    ref_total = 0
    for hyp, refs in pairs:
        hyp_total += len(hyp)
        ref_total += _closest_ref_len(len(hyp), refs)
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for ref in refs:
                for gram, cnt in _ngrams(ref, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            clipped[n - 1] += sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
            guess[n - 1] += sum(counts.values())
    precisions = [
        (clipped[i] / guess[i]) if guess[i] > 0 else 0.0 for i in range(max_n)
    ]
    bp = min(1.0, math.exp(1.0 - ref_total / hyp_total)) if hyp_total > 0 else 0.0
    scores = []
    for k in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:k]) / k))
    return scores


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pairs: list[EvalPair]) -> float:
    """Mean over pairs of the best-reference LCS F-score (beta = 1.2)."""
    _check_pairs(pairs)
    total = 0.0
    for hyp, refs in pairs:
        best = 0.0
        for ref in refs:
            lcs = _lcs_len(hyp, ref)
            if lcs == 0 or not hyp or not ref:
                continue
            rec = lcs / len(ref)
            prec = lcs / len(hyp)
            f = (1 + ROUGE_BETA**2) * rec * prec / (rec + ROUGE_BETA**2 * prec)
            best = max(best, f)
        total += best
    return total / len(pairs)


def cider(pairs: list[EvalPair], max_n: int = 4) -> float:
    """Consensus score: mean TF-IDF n-gram cosine over n and pairs, times 10."""
    _check_pairs(pairs)
    distinct_refs = {tuple(tuple(r) for r in refs) for _, refs in pairs}
    if len(pairs) < 2 or len(distinct_refs) < 2:
        raise ValueError("cider needs a corpus with at least 2 distinct references")
    n_docs = len(pairs)
    doc_freq: list[Counter] = [Counter() for _ in range(max_n)]
    for _, refs in pairs:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in refs:
                seen.update(_ngrams(ref, n).keys())
            for gram in seen:
                doc_freq[n - 1][gram] += 1

    def idf(n: int, gram) -> float:
        return math.log(n_docs / (1.0 + doc_freq[n - 1][gram]))

    def tfidf_vec(tokens: list[str], n: int) -> dict:
        return {g: c * idf(n, g) for g, c in _ngrams(tokens, n).items()}

    def cosine(u: dict, v: dict) -> float:
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    total = 0.0
    for hyp, refs in pairs:
        per_n = 0.0
        for n in range(1, max_n + 1):
            hyp_vec = tfidf_vec(hyp, n)
            sim = sum(cosine(hyp_vec, tfidf_vec(ref, n)) for ref in refs) / len(refs)
            per_n += sim
        total += per_n / max_n
    return CIDER_SCALE * total / len(pairs)


def score_pairs(pairs: list[EvalPair]) -> EvalReport:
    bleu = bleu_corpus(pairs)
    return EvalReport(
        bleu1=bleu[0],
        bleu2=bleu[1],
        bleu3=bleu[2],
        bleu4=bleu[3],
        rouge_l=rouge_l(pairs),
        cider=cider(pairs),
        n_pairs=len(pairs),
    )


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
    return out


def evaluate_corpus(generated_path, gold_path) -> EvalReport:
    """Align generated and gold files on (image_id, answer) keys and score.

    Gold files may repeat a key; the extra questions become additional
    references.  Generated files keep the first (highest-ranked) question per
    key.  A key present on one side only is an error.
    """
    gold: dict[tuple[str, str], list[list[str]]] = {}
    order: list[tuple[str, str]] = []
    for rec in _read_jsonl(gold_path):
        key = (str(rec["image_id"]), str(rec["answer"]))
        if key not in gold:
            gold[key] = []
            order.append(key)
        gold[key].append(tokenize(rec["question"]))
    hyp: dict[tuple[str, str], list[str]] = {}
    for rec in _read_jsonl(generated_path):
        key = (str(rec["image_id"]), str(rec["answer"]))
        if key not in hyp:
            hyp[key] = tokenize(rec["question"])
    missing_gen = [k for k in order if k not in hyp]
    missing_gold = sorted(set(hyp) - set(gold))
    if missing_gen or missing_gold:
        raise ValueError(
            "generated/gold key mismatch: "
            f"missing from generated: {missing_gen}; missing from gold: {missing_gold}"
        )
    pairs: list[EvalPair] = [(hyp[k], gold[k]) for k in order]
    return score_pairs(pairs)
