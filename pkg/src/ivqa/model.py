"""The question-generation network: GRU answer encoder, dual guiding attention,
factorized bilinear fusion, and a two-layer recurrent generator with per-step
dynamic attention over regions.

All math runs on the autodiff primitives so a teacher-forced forward pass is
differentiable end to end.  Decoding state is exposed step by step
(``begin`` / ``step``) so greedy and beam search can drive the same code path
used for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .textdata import PAD_ID, START_ID, DatasetInstance

INIT_SCALE = 0.08

_GRU_FIELDS = (
    ("update_x", "in"),
    ("update_h", "hid"),
    ("update_b", "bias"),
    ("reset_x", "in"),
    ("reset_h", "hid"),
    ("reset_b", "bias"),
    ("cand_x", "in"),
    ("cand_h", "hid"),
    ("cand_b", "bias"),
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes.  Defaults are the full-scale configuration; desk
    runs override them through the run config."""

    vocab_size: int
    hidden_size: int = 1280      # GRU hidden width, shared by encoder/decoder/answer
    attention_size: int = 512    # hidden width of every attention module
    visual_dim: int = 2048       # per-region visual vector length
    embed_dim: int = 300         # word/label embedding length
    regions: int = 36            # regions per image (uniform per run)
    mfb_expand: int = 1600       # fusion expansion size
    mfb_pool: int = 5            # fusion sum-pool window
    max_question_len: int = 19
    answer_len: int = 3
    ablate_semantic: bool = False

    def __post_init__(self):
        sizes = (
            self.vocab_size,
            self.hidden_size,
            self.attention_size,
            self.visual_dim,
            self.embed_dim,
            self.regions,
            self.mfb_expand,
            self.mfb_pool,
            self.max_question_len,
            self.answer_len,
        )
        if any(s < 1 for s in sizes):
            raise ValueError("all model sizes must be positive")
        if self.mfb_expand % self.mfb_pool != 0:
            raise ValueError(
                f"mfb_pool {self.mfb_pool} must divide mfb_expand {self.mfb_expand}"
            )

    @property
    def mfb_out(self) -> int:
        return self.mfb_expand // self.mfb_pool

    @property
    def semantic_dim(self) -> int:
        return 2 * self.embed_dim

    @property
    def enhanced_dim(self) -> int:
        return self.visual_dim if self.ablate_semantic else self.visual_dim + self.semantic_dim

    @property
    def guide_dim(self) -> int:
        # length of the initial attended context fed to the encoder
        return self.visual_dim + self.semantic_dim

    @property
    def encoder_input_dim(self) -> int:
        base = self.embed_dim + self.hidden_size
        return base if self.ablate_semantic else base + self.guide_dim

    @property
    def decoder_input_dim(self) -> int:
        return self.visual_dim + self.hidden_size


def _gru_shapes(prefix: str, input_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, kind in _GRU_FIELDS:
        if kind == "in":
            shapes[f"{prefix}.{name}"] = (hidden, input_dim)
        elif kind == "hid":
            shapes[f"{prefix}.{name}"] = (hidden, hidden)
        else:
            shapes[f"{prefix}.{name}"] = (hidden,)
    return shapes


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[1]
    return leaf.endswith("_b") or leaf == "bias"


class ModelParameters:
    """The complete named set of trainable tensors, in a fixed order.

    The name set is a pure function of the config; checkpoints carry exactly
    these names and shapes.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = self.expected_shapes(config)
        if list(tensors.keys()) != list(expected.keys()):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ValueError(
                f"parameter name set mismatch (missing={sorted(missing)}, "
                f"extra={sorted(extra)})"
            )
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(
                    f"parameter {name}: shape {tensors[name].shape}, expected {shape}"
                )
        self.config = config
        self._tensors = dict(tensors)

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        N, H = cfg.attention_size, cfg.hidden_size
        shapes: dict[str, tuple[int, ...]] = {}
        shapes.update(_gru_shapes("answer_gru", cfg.embed_dim, H))
        if not cfg.ablate_semantic:
            shapes.update(
                {
                    "visual_att.score": (N,),
                    "visual_att.feat_w": (N, cfg.visual_dim),
                    "visual_att.feat_b": (N,),
                    "visual_att.ans_w": (N, H),
                    "visual_att.ans_b": (N,),
                    "semantic_att.score": (N,),
                    "semantic_att.feat_w": (N, cfg.semantic_dim),
                    "semantic_att.feat_b": (N,),
                    "semantic_att.ans_w": (N, H),
                    "semantic_att.ans_b": (N,),
                }
            )
        shapes.update(
            {
                "mfb.img_w": (cfg.mfb_expand, cfg.enhanced_dim),
                "mfb.img_b": (cfg.mfb_expand,),
                "mfb.ans_w": (cfg.mfb_expand, H),
                "mfb.ans_b": (cfg.mfb_expand,),
                "embed.table": (cfg.vocab_size, cfg.embed_dim),
                "embed.bias": (cfg.embed_dim,),
            }
        )
        shapes.update(_gru_shapes("encoder_gru", cfg.encoder_input_dim, H))
        shapes.update(_gru_shapes("decoder_gru", cfg.decoder_input_dim, H))
        shapes.update(
            {
                "dynamic_att.score": (N,),
                "dynamic_att.fused_w": (N, cfg.mfb_out),
                "dynamic_att.fused_b": (N,),
                "dynamic_att.state_w": (N, H),
                "output.proj": (cfg.vocab_size, H),
                "output.bias": (cfg.vocab_size,),
            }
        )
        return shapes

    @classmethod
    def initialize(
        cls,
        config: ModelConfig,
        rng: np.random.Generator,
        embed_matrix: np.ndarray | None = None,
    ) -> "ModelParameters":
        """Uniform(-0.08, 0.08) weights, zero biases; the embedding table is
        copied from ``embed_matrix`` when provided."""
        tensors: dict[str, Tensor] = {}
        for name, shape in cls.expected_shapes(config).items():
            if name == "embed.table" and embed_matrix is not None:
                if tuple(embed_matrix.shape) != shape:
                    raise ValueError(
                        f"embedding matrix shape {embed_matrix.shape}, expected {shape}"
                    )
                values = np.array(embed_matrix)
            elif _is_bias(name):
                values = np.zeros(shape)
            else:
                values = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
            tensors[name] = Tensor(values, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def groups(self) -> dict[str, list[str]]:
        """Parameter names keyed by group prefix (the part before the dot)."""
        out: dict[str, list[str]] = {}
        for name in self._tensors:
            out.setdefault(name.split(".")[0], []).append(name)
        return out

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None


@dataclass
class FeatureTensors:
    """Per-image constants in tensor form, built once per instance."""

    V: Tensor                     # (k, visual_dim)
    V_rows: list[Tensor]
    S: Tensor | None              # (k, 2*embed_dim), None when ablated
    S_rows: list[Tensor] | None
    E_rows: list[Tensor]          # k rows of length enhanced_dim

    @classmethod
    def from_arrays(
        cls, cfg: ModelConfig, visual: np.ndarray, semantic: np.ndarray | None
    ) -> "FeatureTensors":
        visual = np.asarray(visual)
        if visual.shape != (cfg.regions, cfg.visual_dim):
            raise ValueError(
                f"visual features {visual.shape}, config needs "
                f"({cfg.regions}, {cfg.visual_dim})"
            )
        V = Tensor(visual)
        V_rows = [Tensor(visual[i]) for i in range(cfg.regions)]
        if cfg.ablate_semantic:
            return cls(V=V, V_rows=V_rows, S=None, S_rows=None, E_rows=V_rows)
        semantic = np.asarray(semantic)
        if semantic.shape != (cfg.regions, cfg.semantic_dim):
            raise ValueError(
                f"semantic features {semantic.shape}, config needs "
                f"({cfg.regions}, {cfg.semantic_dim})"
            )
        S = Tensor(semantic)
        S_rows = [Tensor(semantic[i]) for i in range(cfg.regions)]
        enhanced = np.concatenate([visual, semantic], axis=1)
        E_rows = [Tensor(enhanced[i]) for i in range(cfg.regions)]
        return cls(V=V, V_rows=V_rows, S=S, S_rows=S_rows, E_rows=E_rows)

    @property
    def k(self) -> int:
        return len(self.V_rows)


@dataclass
class GuidedContext:
    """Answer-guided visual and semantic summaries and their region weights."""

    beta_v: Tensor
    ctx_v: Tensor
    beta_s: Tensor
    ctx_s: Tensor
    att0: Tensor


@dataclass
class TraceStep:
    """Dynamic-attention record for one generation step."""

    t: int
    token_id: int
    beta: np.ndarray
    top1: int
    top2: int

    @classmethod
    def from_beta(cls, t: int, token_id: int, beta: np.ndarray) -> "TraceStep":
        order = np.argsort(-beta, kind="stable")
        top1 = int(order[0])
        top2 = int(order[1]) if beta.size > 1 else top1
        return cls(t=t, token_id=token_id, beta=beta.copy(), top1=top1, top2=top2)


@dataclass
class DecodeContext:
    """Everything fixed for one instance: features, answer encoding, fused
    regions, and the initial guided context."""

    feats: FeatureTensors
    answer: Tensor
    guide: GuidedContext | None
    fused: list[Tensor]


def _sum(*tensors: Tensor) -> Tensor:
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.ewise(acc, t, "add")
    return acc


class Model:
    """Wires the parameter set into the generation equations."""

    def __init__(self, config: ModelConfig, params: ModelParameters):
        if params.config is not config and params.config != config:
            raise ValueError("parameter set was built for a different config")
        self.config = config
        self.params = params

    # -- building blocks ---------------------------------------------------

    def gru_cell(self, prefix: str, x: Tensor, h_prev: Tensor) -> Tensor:
        """Standard reset/update cell: h' = (1-z) * h + z * cand."""
        p = self.params
        z = ad.activation(
            _sum(
                ad.matmul(p[f"{prefix}.update_x"], x),
                ad.matmul(p[f"{prefix}.update_h"], h_prev),
                p[f"{prefix}.update_b"],
            ),
            "sigmoid",
        )
        r = ad.activation(
            _sum(
                ad.matmul(p[f"{prefix}.reset_x"], x),
                ad.matmul(p[f"{prefix}.reset_h"], h_prev),
                p[f"{prefix}.reset_b"],
            ),
            "sigmoid",
        )
        cand = ad.activation(
            _sum(
                ad.matmul(p[f"{prefix}.cand_x"], x),
                ad.matmul(p[f"{prefix}.cand_h"], ad.ewise(r, h_prev, "hadamard")),
                p[f"{prefix}.cand_b"],
            ),
            "tanh",
        )
        keep = ad.ewise(ad.affine(z, -1.0, 1.0), h_prev, "hadamard")
        return ad.ewise(keep, ad.ewise(z, cand, "hadamard"), "add")

    def embed_word(self, token_id: int) -> Tensor:
        return ad.ewise(
            ad.embed_lookup(self.params["embed.table"], token_id),
            self.params["embed.bias"],
            "add",
        )

    def encode_answer(self, answer_ids) -> Tensor:
        """Run the answer GRU over non-pad tokens; all-pad answers encode to zero."""
        h = Tensor(np.zeros(self.config.hidden_size))
        for tid in answer_ids:
            if tid == PAD_ID:
                break
            h = self.gru_cell("answer_gru", self.embed_word(int(tid)), h)
        return h

    def _attend(
        self,
        rows: list[Tensor],
        weighted_over: Tensor,
        score: Tensor,
        feat_w: Tensor,
        feat_b: Tensor,
        gate: Tensor,
    ) -> tuple[Tensor, Tensor]:
        parts = [
            ad.ewise(
                ad.activation(_sum(ad.matmul(feat_w, row), feat_b), "tanh"),
                gate,
                "hadamard",
            )
            for row in rows
        ]
        alpha = ad.matmul(ad.stack(parts), score)
        beta = ad.softmax(alpha)
        return beta, ad.matmul(beta, weighted_over)

    def visual_attention(self, feats: FeatureTensors, answer: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        gate = ad.activation(
            _sum(ad.matmul(p["visual_att.ans_w"], answer), p["visual_att.ans_b"]), "tanh"
        )
        return self._attend(
            feats.V_rows, feats.V, p["visual_att.score"],
            p["visual_att.feat_w"], p["visual_att.feat_b"], gate,
        )

    def semantic_attention(self, feats: FeatureTensors, answer: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        gate = ad.activation(
            _sum(ad.matmul(p["semantic_att.ans_w"], answer), p["semantic_att.ans_b"]), "tanh"
        )
        return self._attend(
            feats.S_rows, feats.S, p["semantic_att.score"],
            p["semantic_att.feat_w"], p["semantic_att.feat_b"], gate,
        )

    def guiding_context(self, feats: FeatureTensors, answer: Tensor) -> GuidedContext | None:
        """Parallel answer-guided attention over visual and semantic features.
        Returns None in the semantic-ablation variant: no initial context is
        fed downstream at all."""
        if self.config.ablate_semantic:
            return None
        beta_v, ctx_v = self.visual_attention(feats, answer)
        beta_s, ctx_s = self.semantic_attention(feats, answer)
        return GuidedContext(
            beta_v=beta_v, ctx_v=ctx_v, beta_s=beta_s, ctx_s=ctx_s,
            att0=ad.concat([ctx_v, ctx_s]),
        )

    def mfb_fuse(self, feats: FeatureTensors, answer: Tensor) -> list[Tensor]:
        """Expand, Hadamard, sum-pool, then signed-sqrt + L2 normalize per region."""
        p = self.params
        ans_part = _sum(ad.matmul(p["mfb.ans_w"], answer), p["mfb.ans_b"])
        fused = []
        for row in feats.E_rows:
            img_part = _sum(ad.matmul(p["mfb.img_w"], row), p["mfb.img_b"])
            pooled = ad.sum_pool(
                ad.ewise(img_part, ans_part, "hadamard"), self.config.mfb_pool
            )
            fused.append(ad.l2_normalize(ad.signed_sqrt(pooled)))
        return fused

    def encoder_step(
        self,
        word: Tensor,
        h2_prev: Tensor,
        guide: GuidedContext | None,
        h1_prev: Tensor,
        answer: Tensor,
    ) -> Tensor:
        """One partial-question encoder update; the answer vector is added to
        the previous hidden state before the cell runs."""
        parts = [word, h2_prev] if guide is None else [word, h2_prev, guide.att0]
        return self.gru_cell(
            "encoder_gru", ad.concat(parts), ad.ewise(h1_prev, answer, "add")
        )

    def dynamic_attention(
        self, fused: list[Tensor], feats: FeatureTensors, h1: Tensor
    ) -> tuple[Tensor, Tensor]:
        """Region weights from fused features + encoder state; the attended
        sum runs over the raw visual vectors."""
        p = self.params
        state_part = ad.matmul(p["dynamic_att.state_w"], h1)
        parts = [
            ad.activation(
                _sum(ad.matmul(p["dynamic_att.fused_w"], z), p["dynamic_att.fused_b"], state_part),
                "tanh",
            )
            for z in fused
        ]
        alpha = ad.matmul(ad.stack(parts), p["dynamic_att.score"])
        beta = ad.softmax(alpha)
        return beta, ad.matmul(beta, feats.V)

    def decoder_step(self, ctx: Tensor, h1: Tensor, h2_prev: Tensor) -> Tensor:
        return self.gru_cell("decoder_gru", ad.concat([ctx, h1]), h2_prev)

    def output_distribution(self, h2: Tensor) -> Tensor:
        return ad.softmax(
            _sum(ad.matmul(self.params["output.proj"], h2), self.params["output.bias"])
        )

    # -- instance-level passes ----------------------------------------------

    def begin(self, feats: FeatureTensors, answer_ids) -> DecodeContext:
        """Per-instance precomputation: answer encoding, guided context, and
        fused region features (all fixed across generation steps)."""
        if feats.k != self.config.regions:
            raise ValueError(f"features have k={feats.k}, config needs {self.config.regions}")
        answer = self.encode_answer(answer_ids)
        return DecodeContext(
            feats=feats,
            answer=answer,
            guide=self.guiding_context(feats, answer),
            fused=self.mfb_fuse(feats, answer),
        )

    def initial_state(self) -> tuple[Tensor, Tensor]:
        zeros = np.zeros(self.config.hidden_size)
        return Tensor(zeros), Tensor(zeros)

    def step(
        self, ctx: DecodeContext, prev_token_id: int, h1: Tensor, h2: Tensor
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Advance one generation step; returns (distribution, h1', h2', beta)."""
        word = self.embed_word(prev_token_id)
        h1_new = self.encoder_step(word, h2, ctx.guide, h1, ctx.answer)
        beta, attended = self.dynamic_attention(ctx.fused, ctx.feats, h1_new)
        h2_new = self.decoder_step(attended, h1_new, h2)
        return self.output_distribution(h2_new), h1_new, h2_new, beta

    def forward_teacher_forced(
        self, instance: DatasetInstance, feats: FeatureTensors
    ) -> tuple[list[Tensor], list[TraceStep]]:
        """Unroll over the gold question, feeding gold previous tokens.

        Returns the per-step output distributions (length = real question
        length) and the dynamic-attention trace.
        """
        gold = instance.question_ids[: instance.question_len]
        ctx = self.begin(feats, instance.answer_ids)
        h1, h2 = self.initial_state()
        dists: list[Tensor] = []
        trace: list[TraceStep] = []
        prev = START_ID
        for t, target in enumerate(gold, start=1):
            dist, h1, h2, beta = self.step(ctx, prev, h1, h2)
            dists.append(dist)
            trace.append(TraceStep.from_beta(t, int(target), beta.values))
            prev = int(target)
        return dists, trace
