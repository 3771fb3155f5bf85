"""Regional feature ingestion and assembly of semantic / enhanced features.

The feature file is UTF-8 JSON Lines, one object per image::

    {"image_id": str, "k": int, "d_v": int,
     "features": [[float x d_v] x k],
     "attributes": [str x k], "objects": [str x k]}

Regions are ordered by descending detector confidence.  Per-record ``k`` and
``d_v`` may vary in a file, but a trainer run requires uniform values, which
``load_features`` can enforce.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .textdata import EmbeddingTable, UNK


@dataclass(frozen=True)
class RegionalFeatureSet:
    """Per-image detector outputs: k visual vectors plus label strings."""

    image_id: str
    features: np.ndarray  # (k, d_v)
    attributes: tuple[str, ...]
    objects: tuple[str, ...]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 2:
            raise ValueError(f"{self.image_id}: features must be 2-D, got {feats.shape}")
        k = feats.shape[0]
        if len(self.attributes) != k or len(self.objects) != k:
            raise ValueError(
                f"{self.image_id}: expected {k} attribute and object labels, got "
                f"{len(self.attributes)} / {len(self.objects)}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"{self.image_id}: non-finite feature values")

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SemanticFeatureSet:
    """Per-region attribute embeddings B, object embeddings O, and S = [b; o]."""

    B: np.ndarray  # (k, d_e)
    O: np.ndarray  # (k, d_e)
    S: np.ndarray  # (k, 2*d_e)


@dataclass(frozen=True)
class EnhancedFeatureSet:
    """Per-region concatenation of the visual vector and its semantic vector."""

    E: np.ndarray  # (k, d_v + 2*d_e), or (k, d_v) when semantics are ablated


def load_features(
    path, expected_k: int | None = None, expected_d_v: int | None = None
) -> dict[str, RegionalFeatureSet]:
    """Parse a feature file into a map image_id -> RegionalFeatureSet."""
    out: dict[str, RegionalFeatureSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            for key in ("image_id", "k", "d_v", "features", "attributes", "objects"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            image_id = str(rec["image_id"])
            if image_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            k, d_v = int(rec["k"]), int(rec["d_v"])
            feats = rec["features"]
            if len(feats) != k or any(len(row) != d_v for row in feats):
                raise ValueError(
                    f"{path}:{lineno}: declared k={k}, d_v={d_v} but feature array is "
                    f"{len(feats)} x {[len(r) for r in feats[:3]]}..."
                )
            if len(rec["attributes"]) != k or len(rec["objects"]) != k:
                raise ValueError(f"{path}:{lineno}: label count does not match k={k}")
            if expected_k is not None and k != expected_k:
                raise ValueError(f"{path}:{lineno}: k={k}, run requires k={expected_k}")
            if expected_d_v is not None and d_v != expected_d_v:
                raise ValueError(f"{path}:{lineno}: d_v={d_v}, run requires d_v={expected_d_v}")
            out[image_id] = RegionalFeatureSet(
                image_id=image_id,
                features=np.array(feats, dtype=np.float64),
                attributes=tuple(str(a) for a in rec["attributes"]),
                objects=tuple(str(o) for o in rec["objects"]),
            )
    return out


def write_features(path, sets) -> None:
    """Serialize feature sets in the file format above (floats round-trip exactly)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rfs in sets:
            rec = {
                "image_id": rfs.image_id,
                "k": rfs.k,
                "d_v": rfs.d_v,
                "features": [[float(x) for x in row] for row in rfs.features],
                "attributes": list(rfs.attributes),
                "objects": list(rfs.objects),
            }
            fh.write(json.dumps(rec) + "\n")


def label_embedding(emb: EmbeddingTable, label: str) -> np.ndarray:
    """Embed a label; multi-word labels average their word vectors, empty or
    unknown words fall back to the unk vector."""
    words = label.lower().split()
    if not words:
        return np.array(emb.get(UNK), dtype=np.float64)
    return np.mean([emb.get(w) for w in words], axis=0)


def assemble_semantic(rfs: RegionalFeatureSet, emb: EmbeddingTable) -> SemanticFeatureSet:
    """Build the per-region semantic features s_i = [b_i; o_i]."""
    B = np.stack([label_embedding(emb, a) for a in rfs.attributes])
    O = np.stack([label_embedding(emb, o) for o in rfs.objects])
    return SemanticFeatureSet(B=B, O=O, S=np.concatenate([B, O], axis=1))


def assemble_enhanced(
    rfs: RegionalFeatureSet, sfs: SemanticFeatureSet | None
) -> EnhancedFeatureSet:
    """Concatenate visual and semantic vectors per region; with ``sfs=None``
    (the semantic-ablation variant) the enhanced features are the visual ones."""
    if sfs is None:
        return EnhancedFeatureSet(E=rfs.features.copy())
    if sfs.S.shape[0] != rfs.k:
        raise ValueError(
            f"{rfs.image_id}: semantic set has {sfs.S.shape[0]} regions, visual has {rfs.k}"
        )
    return EnhancedFeatureSet(E=np.concatenate([rfs.features, sfs.S], axis=1))
