"""Cross-entropy sequence training: loss, Adam, the epoch loop, and binary
checkpoints.

The batch loss is the mean of per-instance losses, each already normalized by
its own question length, so the learning rate is decoupled from batch size.
Training is deterministic given the seed: one RNG drives parameter init and
the per-epoch shuffle, gradients accumulate in instance order, and the
optimizer walks parameters in their fixed declaration order.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .features import RegionalFeatureSet, assemble_enhanced, assemble_semantic
from .model import FeatureTensors, Model, ModelConfig, ModelParameters
from .textdata import DatasetInstance, EmbeddingTable, Vocabulary, make_instance

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"IVQACKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries epoch/instance context."""


@dataclass
class TrainConfig:
    """Optimization settings.  Defaults document the full-scale recipe; desk
    runs typically set batch_size=8 and their own epoch count."""

    batch_size: int = 1000
    epochs: int = 14
    lr_initial: float = 9.9e-4
    lr_after: float = 9.9e-5
    lr_drop_epoch: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None   # off by default; optional global-norm clip
    workers: int = 0                 # >0 evaluates batch instances on threads

    def __post_init__(self):
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr_drop_epoch >= self.epochs and self.epochs > 1:
            # schedule still well-defined; only flag nonsensical drop points
            if self.lr_drop_epoch < 1:
                raise ValueError("lr_drop_epoch must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Initial rate through lr_drop_epoch inclusive, the reduced rate after."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return cfg.lr_initial if epoch <= cfg.lr_drop_epoch else cfg.lr_after


def sequence_loss(distributions: list[Tensor], gold_ids) -> Tensor:
    """-(1/T) * sum_t log p_t[gold_t], with probabilities floored at 1e-12."""
    gold_ids = list(gold_ids)
    if len(distributions) != len(gold_ids):
        raise ValueError(
            f"{len(distributions)} distributions vs {len(gold_ids)} gold tokens"
        )
    if not distributions:
        raise ValueError("sequence_loss needs at least one step")
    total = None
    for dist, gid in zip(distributions, gold_ids):
        term = ad.log(ad.clamp_min(ad.pick(dist, int(gid)), PROB_FLOOR))
        total = term if total is None else ad.ewise(total, term, "add")
    return ad.affine(total, -1.0 / len(gold_ids))


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init_like(cls, params: ModelParameters) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.values) for n, t in params.items()},
            v={n: np.zeros_like(t.values) for n, t in params.items()},
            step=0,
        )


def adam_step(
    params: ModelParameters,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected update: theta -= lr * m_hat / (sqrt(v_hat) + eps)."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} for parameter {name} {p.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# the epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float


@dataclass
class PreparedInstance:
    instance: DatasetInstance
    feats: FeatureTensors


def prepare_instances(
    instances: list[DatasetInstance],
    feature_sets: dict[str, RegionalFeatureSet],
    cfg: ModelConfig,
    emb: EmbeddingTable,
) -> list[PreparedInstance]:
    """Assemble per-instance feature tensors; validates uniform k/d_v."""
    cache: dict[str, FeatureTensors] = {}
    out = []
    for inst in instances:
        if inst.image_id not in cache:
            rfs = feature_sets.get(inst.image_id)
            if rfs is None:
                raise KeyError(f"no features for image_id {inst.image_id!r}")
            if rfs.k != cfg.regions or rfs.d_v != cfg.visual_dim:
                raise ValueError(
                    f"{inst.image_id}: features are k={rfs.k}, d_v={rfs.d_v}; "
                    f"run requires k={cfg.regions}, d_v={cfg.visual_dim}"
                )
            semantic = None
            if not cfg.ablate_semantic:
                semantic = assemble_semantic(rfs, emb).S
            cache[inst.image_id] = FeatureTensors.from_arrays(cfg, rfs.features, semantic)
        out.append(PreparedInstance(instance=inst, feats=cache[inst.image_id]))
    return out


def _instance_pass(model: Model, prep: PreparedInstance) -> tuple[float, Tensor]:
    with Tape():
        dists, _ = model.forward_teacher_forced(prep.instance, prep.feats)
        loss = sequence_loss(
            dists, prep.instance.question_ids[: prep.instance.question_len]
        )
    return loss


def _batch_grads_serial(
    model: Model, batch: list[PreparedInstance]
) -> tuple[list[float], dict[str, np.ndarray]]:
    model.params.zero_grads()
    losses = []
    for prep in batch:
        loss = _instance_pass(model, prep)
        ad.backward(loss)
        losses.append(loss.item())
    scale = 1.0 / len(batch)
    grads = {
        n: (t.grad * scale if t.grad is not None else np.zeros_like(t.values))
        for n, t in model.params.items()
    }
    return losses, grads


def _batch_grads_threaded(
    model: Model, batch: list[PreparedInstance], workers: int
) -> tuple[list[float], dict[str, np.ndarray]]:
    # Forward passes run concurrently (tapes are thread-confined); backward is
    # serialized by a lock so each instance's contribution can be snapshotted,
    # then summed in instance order for a deterministic reduction.
    lock = threading.Lock()

    def run(prep: PreparedInstance):
        loss = _instance_pass(model, prep)
        with lock:
            model.params.zero_grads()
            ad.backward(loss)
            snap = {
                n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
                for n, t in model.params.items()
            }
        return loss.item(), snap

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, batch))
    losses = [r[0] for r in results]
    scale = 1.0 / len(batch)
    grads = {n: np.zeros_like(t.values) for n, t in model.params.items()}
    for _, snap in results:  # ordered summation
        for n, g in snap.items():
            grads[n] += g
    for g in grads.values():
        g *= scale
    return losses, grads


def train(
    instances: list[DatasetInstance],
    feature_sets: dict[str, RegionalFeatureSet],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    emb: EmbeddingTable,
    vocab: Vocabulary,
    progress=None,
) -> tuple["Checkpoint", list[EpochStats]]:
    """Seeded end-to-end training; returns the final checkpoint and loss log."""
    if not instances:
        raise ValueError("training needs a non-empty dataset")
    if len(vocab) != model_cfg.vocab_size:
        raise ValueError(
            f"vocabulary has {len(vocab)} tokens, config says {model_cfg.vocab_size}"
        )
    rng = np.random.default_rng(train_cfg.seed)
    params = ModelParameters.initialize(model_cfg, rng, embed_matrix=emb.matrix(vocab))
    return train_with_params(
        params, instances, feature_sets, model_cfg, train_cfg, emb, rng, progress
    )


def train_with_params(
    params: ModelParameters,
    instances: list[DatasetInstance],
    feature_sets: dict[str, RegionalFeatureSet],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    emb: EmbeddingTable,
    rng: np.random.Generator,
    progress=None,
) -> tuple["Checkpoint", list[EpochStats]]:
    model = Model(model_cfg, params)
    prepared = prepare_instances(instances, feature_sets, model_cfg, emb)
    state = AdamState.init_like(params)
    stats: list[EpochStats] = []
    n = len(prepared)
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_schedule(epoch, train_cfg)
        order = rng.permutation(n)
        epoch_losses: list[float] = []
        for start in range(0, n, train_cfg.batch_size):
            batch = [prepared[i] for i in order[start : start + train_cfg.batch_size]]
            try:
                if train_cfg.workers > 0:
                    losses, grads = _batch_grads_threaded(model, batch, train_cfg.workers)
                else:
                    losses, grads = _batch_grads_serial(model, batch)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch} "
                    f"(batch starting at {start}): {exc}"
                ) from exc
            if not all(math.isfinite(l) for l in losses):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            if train_cfg.clip_norm is not None:
                clip_gradients(grads, train_cfg.clip_norm)
            adam_step(
                params, grads, state, lr,
                train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps,
            )
            epoch_losses.extend(losses)
        mean_loss = math.fsum(epoch_losses) / len(epoch_losses)
        stats.append(EpochStats(epoch=epoch, lr=lr, mean_loss=mean_loss))
        if progress is not None:
            progress(stats[-1])
    ckpt = Checkpoint(
        config=model_cfg,
        tensors={n_: t.values.copy() for n_, t in params.items()},
        adam=state,
        step=state.step,
        seed=train_cfg.seed,
    )
    return ckpt, stats


def write_loss_log(path, stats: list[EpochStats], clip_norm: float | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if clip_norm is not None:
            fh.write(f"# gradient clipping enabled: clip_norm={clip_norm}\n")
        fh.write("epoch,lr,mean_loss\n")
        for s in stats:
            fh.write(f"{s.epoch},{s.lr},{s.mean_loss}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume or serve: config, tensors, optimizer state."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    adam: AdamState | None
    step: int
    seed: int
    version: int = CHECKPOINT_VERSION

    def to_parameters(self) -> ModelParameters:
        return ModelParameters(
            self.config,
            {n: Tensor(v, requires_grad=True) for n, v in self.tensors.items()},
        )


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u32 version, length-prefixed JSON config block,
    u32 tensor count, then per tensor: u16 name length + name, u8 ndim,
    ndim x u32 dims, raw little-endian float32 values."""
    meta = {
        "model_config": asdict(ckpt.config),
        "seed": ckpt.seed,
        "step": ckpt.step,
        "has_adam": ckpt.adam is not None,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = list(ckpt.tensors.items())
    if ckpt.adam is not None:
        entries += [(f"adam.m.{n}", a) for n, a in ckpt.adam.m.items()]
        entries += [(f"adam.v.{n}", a) for n, a in ckpt.adam.v.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        meta = json.loads(_read_exact(fh, blob_len, "config block").decode("utf-8"))
        config = ModelConfig(**meta["model_config"])
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        raw: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            n_values = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, 4 * n_values, f"values of {name}")
            raw[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()

    tensors = {n: a for n, a in raw.items() if not n.startswith("adam.")}
    expected = ModelParameters.expected_shapes(config)
    if set(tensors) != set(expected):
        raise CheckpointError(
            f"tensor name set does not match config "
            f"(missing={sorted(set(expected) - set(tensors))}, "
            f"extra={sorted(set(tensors) - set(expected))})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"tensor {name}: shape {tensors[name].shape}, config implies {shape}"
            )
    ordered = {name: tensors[name] for name in expected}

    adam = None
    if meta.get("has_adam"):
        m = {n[len("adam.m."):]: a for n, a in raw.items() if n.startswith("adam.m.")}
        v = {n[len("adam.v."):]: a for n, a in raw.items() if n.startswith("adam.v.")}
        if set(m) != set(expected) or set(v) != set(expected):
            raise CheckpointError("optimizer state does not cover the parameter set")
        adam = AdamState(m=m, v=v, step=int(meta["step"]))
    return Checkpoint(
        config=config,
        tensors=ordered,
        adam=adam,
        step=int(meta["step"]),
        seed=int(meta["seed"]),
        version=version,
    )
