"""Tokenization, vocabulary construction, sequence encoding, embedding tables,
and deterministic synthetic dataset generation.

Dataset files are UTF-8 JSON Lines, one object per instance:
``{"image_id": str, "answer": str, "question": str}``.  Vocabulary files hold
one token per line (line number = id) and must start with the three reserved
tokens.  Embedding files hold one ``token f1 ... fd`` entry per line.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, START, UNK = "<pad>", "<start>", "<unk>"
RESERVED = (PAD, START, UNK)
PAD_ID, START_ID, UNK_ID = 0, 1, 2

QUESTION_MARK = "?"

# characters split off as standalone tokens
_SPLIT_CHARS = "?,.!'"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split ``? , . ! '`` into their own tokens."""
    text = text.lower()
    for ch in _SPLIT_CHARS:
        text = text.replace(ch, f" {ch} ")
    return text.split()


class Vocabulary:
    """Bidirectional token/id map with reserved ids 0=pad, 1=start, 2=unk."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:3]) != list(RESERVED):
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_tokens(cls, ordered: list[str]) -> "Vocabulary":
        """Build from non-reserved tokens, already in their final order."""
        return cls(list(RESERVED) + [t for t in ordered if t not in RESERVED])

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_for(self, idx: int) -> str:
        return self.id_to_token[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if len(tokens) < 3 or tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"{path}: first three vocabulary lines must be {RESERVED}")
        return cls(tokens)


def build_vocabulary(
    instances: list[dict], answer_top: int
) -> tuple[Vocabulary, list[dict]]:
    """Keep instances whose answer is among the ``answer_top`` most frequent
    answers, then build the vocabulary from the kept questions and answers.

    Answer frequency is counted on the full (lowercased, stripped) answer
    string; ties break lexicographically.  Tokens are ordered by descending
    frequency, then lexicographically, after the reserved ids.
    """
    if not instances:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    if answer_top < 1:
        raise ValueError("answer_top must be >= 1")

    def norm(ans: str) -> str:
        return ans.strip().lower()

    answer_counts = Counter(norm(inst["answer"]) for inst in instances)
    ranked = sorted(answer_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = {ans for ans, _ in ranked[:answer_top]}
    kept = [inst for inst in instances if norm(inst["answer"]) in keep]

    token_counts: Counter[str] = Counter()
    for inst in kept:
        token_counts.update(tokenize(inst["question"]))
        token_counts.update(tokenize(inst["answer"]))
    ordered = [tok for tok, _ in sorted(token_counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    return Vocabulary.from_tokens(ordered), kept


def encode_sequence(
    tokens: list[str], target_len: int, vocab: Vocabulary
) -> tuple[list[int], int]:
    """Map tokens to ids (unknown -> unk), pad with 0 or trim to ``target_len``.

    Returns the id sequence and the count of real (non-pad) positions.
    """
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    ids = [vocab.id_for(tok) for tok in tokens[:target_len]]
    real = len(ids)
    ids.extend([PAD_ID] * (target_len - real))
    return ids, real


@dataclass(frozen=True)
class DatasetInstance:
    """One training/eval triplet with fixed-length id sequences."""

    image_id: str
    answer_ids: tuple[int, ...]
    question_ids: tuple[int, ...]
    question_len: int

    def __post_init__(self):
        if not 1 <= self.question_len <= len(self.question_ids):
            raise ValueError(
                f"question_len {self.question_len} out of range for "
                f"{len(self.question_ids)} slots"
            )
        for seq, real in ((self.question_ids, self.question_len), (self.answer_ids, None)):
            started_padding = False
            for idx, tok in enumerate(seq):
                if tok == PAD_ID:
                    started_padding = True
                elif started_padding:
                    raise ValueError("padding ids must form a suffix")
        if any(t == PAD_ID for t in self.question_ids[: self.question_len]):
            raise ValueError("pad id inside the real question prefix")


def make_instance(
    raw: dict, vocab: Vocabulary, question_len: int = 19, answer_len: int = 3
) -> DatasetInstance:
    """Encode one raw record; raises on questions that tokenize to nothing."""
    q_tokens = tokenize(raw["question"])
    if not q_tokens:
        raise ValueError(f"instance {raw.get('image_id')!r} has an empty question")
    q_ids, q_real = encode_sequence(q_tokens, question_len, vocab)
    a_ids, _ = encode_sequence(tokenize(raw["answer"]), answer_len, vocab)
    return DatasetInstance(
        image_id=str(raw["image_id"]),
        answer_ids=tuple(a_ids),
        question_ids=tuple(q_ids),
        question_len=q_real,
    )


def load_dataset(path) -> list[dict]:
    """Read a JSON Lines dataset file, validating record fields."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            for key in ("image_id", "answer", "question"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            out.append(rec)
    return out


def save_dataset(path, instances: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in instances:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Fixed per-token real vectors used for labels, answers, and init."""

    dim: int
    vectors: dict[str, np.ndarray]

    def get(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token)
        if vec is None:
            vec = self.vectors[UNK]
        return vec

    def matrix(self, vocab: Vocabulary) -> np.ndarray:
        """(vocab_size, dim) array ordered by token id."""
        return np.stack([self.get(tok) for tok in vocab.id_to_token])


def load_embeddings(path, vocab: Vocabulary, dim: int, seed: int = 0) -> EmbeddingTable:
    """Build the embedding table for a vocabulary.

    Tokens found in the file keep their file vectors; everything else -
    including the reserved start/unk tokens - draws uniform(-0.1, 0.1) from
    the seeded generator, and pad is the zero vector.  Pass ``path=None`` for
    a fully random table.
    """
    from_file: dict[str, np.ndarray] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(
                        f"{path}:{lineno}: expected token + {dim} floats, got "
                        f"{len(parts)} fields"
                    )
                try:
                    vec = np.array([float(x) for x in parts[1:]])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
                from_file[parts[0]] = vec

    rng = np.random.default_rng(seed)
    vectors: dict[str, np.ndarray] = {}
    for idx, tok in enumerate(vocab.id_to_token):
        if idx == PAD_ID:
            vectors[tok] = np.zeros(dim)
        elif idx >= 3 and tok in from_file:
            vectors[tok] = from_file[tok]
        else:
            vectors[tok] = rng.uniform(-0.1, 0.1, size=dim)
    return EmbeddingTable(dim=dim, vectors=vectors)


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelPools:
    """Small label sets that keep the synthetic vocabulary tiny."""

    attributes: tuple[str, ...] = ("red", "green", "blue", "brown", "small", "shiny")
    objects: tuple[str, ...] = ("horse", "sign", "hydrant", "cat", "bus", "tree", "plate", "kite")
    templates: tuple[str, ...] = (
        "what {attr} thing is this ?",
        "what is the {attr} object here ?",
    )


def synth_dataset(
    out_dir,
    seed: int,
    n_images: int,
    k: int,
    d_v: int,
    qa_per_image: int = 1,
    pools: LabelPools | None = None,
) -> tuple[Path, Path]:
    """Write a deterministic feature file + dataset file pair under ``out_dir``.

    Every region's feature vector points in a direction characteristic of its
    labels (plus noise) so attention has a learnable signal, and every answer
    is one of its image's object labels.  Identical seeds produce
    byte-identical files.
    """
    from . import features as fio

    if min(n_images, k, d_v, qa_per_image) < 1:
        raise ValueError("synth_dataset parameters must be positive")
    if qa_per_image > k:
        raise ValueError("qa_per_image cannot exceed the region count")
    pools = pools or LabelPools()
    rng = np.random.default_rng(seed)

    base = {
        label: rng.normal(size=d_v)
        for label in list(pools.attributes) + list(pools.objects)
    }
    pairs = [(a, o) for a in pools.attributes for o in pools.objects]
    order = rng.permutation(len(pairs))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_sets = []
    records = []
    next_pair = 0
    for i in range(n_images):
        image_id = f"img{i:04d}"
        labels = []
        for r in range(k):
            if r < qa_per_image:
                attr, obj = pairs[order[next_pair % len(pairs)]]
                next_pair += 1
            else:
                attr = pools.attributes[rng.integers(len(pools.attributes))]
                obj = pools.objects[rng.integers(len(pools.objects))]
            labels.append((attr, obj))
        feats = np.stack(
            [
                base[obj] + 0.5 * base[attr] + 0.05 * rng.normal(size=d_v)
                for attr, obj in labels
            ]
        )
        feature_sets.append(
            fio.RegionalFeatureSet(
                image_id=image_id,
                features=feats,
                attributes=tuple(a for a, _ in labels),
                objects=tuple(o for _, o in labels),
            )
        )
        for q in range(qa_per_image):
            attr, obj = labels[q]
            template = pools.templates[(i * qa_per_image + q) % len(pools.templates)]
            records.append(
                {
                    "image_id": image_id,
                    "answer": obj,
                    "question": template.format(attr=attr),
                }
            )

    features_path = out_dir / "features.jsonl"
    dataset_path = out_dir / "dataset.jsonl"
    fio.write_features(features_path, feature_sets)
    save_dataset(dataset_path, records)
    return features_path, dataset_path
