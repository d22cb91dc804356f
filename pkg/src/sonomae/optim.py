"""Optimization recipe and training loops.

AdamW with decoupled weight decay, cosine learning-rate schedule with linear
warm-up measured in optimizer steps, global-norm gradient clipping, inverse
class-frequency weighted cross-entropy, best-validation checkpoint selection,
hyperparameter grid search, and the binary checkpoint container.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import ndgrad, vitmae
from .ndgrad import ContractError, ShapeError, Tensor


class ConfigurationError(ValueError):
    """A training configuration cannot be satisfied by the data."""


class CheckpointError(IOError):
    """A checkpoint file is malformed or from an unknown format version."""


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 100
    warmup_fraction: float = 0.10
    batch_size: int = 64

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "beta1", "beta2", "eps", "clip_norm"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ContractError("learning_rate, epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ContractError(f"warmup_fraction {self.warmup_fraction} outside [0, 1)")


@dataclass
class TrainState:
    """Adam moments plus bookkeeping. Moment dicts mirror parameter shapes."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val_accuracy: float | None = None
    best_epoch: int | None = None


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, inverse to training-fold frequency, mean 1."""

    weights: np.ndarray
    classes: tuple[str, ...]
    source_fold: str = ""

    def __post_init__(self):
        if (self.weights <= 0).any():
            raise ContractError("class weights must be positive")


def compute_class_weights(counts: Mapping[str, int] | Sequence[int],
                          classes: Sequence[str] | None = None,
                          source_fold: str = "") -> ClassWeights:
    """w_k proportional to 1 / n_k, rescaled so mean(w) = 1."""
    if isinstance(counts, Mapping):
        classes = tuple(counts.keys()) if classes is None else tuple(classes)
        n = np.array([counts[c] for c in classes], dtype=np.float64)
    else:
        n = np.asarray(counts, dtype=np.float64)
        classes = tuple(classes) if classes is not None else tuple(str(i) for i in range(len(n)))
    for cls, cnt in zip(classes, n):
        if cnt <= 0:
            raise ConfigurationError(
                f"class {cls!r} has no samples in training fold {source_fold or '<unnamed>'}")
    w = 1.0 / n
    w = w / w.mean()
    return ClassWeights(weights=w, classes=classes, source_fold=source_fold)


def weighted_cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """-w_target * log p_target from a stable log-softmax; batches are averaged.

    ``logits`` is [K] for one sample or [B, K]; ``targets`` an int or [B] ints.
    """
    single = len(logits.shape) == 1
    lg = logits.reshape((1, logits.shape[0])) if single else logits
    idx = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    k = lg.shape[1]
    if idx.min() < 0 or idx.max() >= k:
        raise ContractError(f"target class outside [0, {k})")
    logp = ndgrad.log_softmax(lg, axis=-1)
    picked = ndgrad.gather_cols(logp, idx)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float32)
        if w.shape[0] != k:
            raise ShapeError(f"{w.shape[0]} weights for {k} classes")
        picked = ndgrad.mul(picked, Tensor(w[idx]))
    return ndgrad.neg(ndgrad.tmean(picked))


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear 0 -> base over the warm-up steps, then half-cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    base = cfg.learning_rate
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    if total_steps == warmup:
        return base
    t = (step - warmup) / (total_steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_global_norm(grads: Iterable[np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients by max_norm / ||g|| when the joint L2 norm exceeds
    max_norm. Mutates in place; returns the scale applied."""
    gs = list(grads)
    total = 0.0
    for g in gs:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in gs:
        g *= np.asarray(scale, dtype=g.dtype)
    return scale


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: TrainState, cfg: OptimConfig, lr_now: float,
               no_decay: set[str] | frozenset[str] = frozenset()) -> None:
    """One decoupled-weight-decay Adam update:
    p <- p - lr_now * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).

    Names in ``no_decay`` skip the decay term. Clipping is the caller's job.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay != 0.0 and name not in no_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= np.asarray(lr_now, dtype=p.data.dtype) * update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"USMK"
_VERSION = 1
_DTYPE_F32 = 0


def payload_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """Git-blob-style SHA-1 over the concatenated raw tensor payload."""
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in tensors.values())
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(payload))
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: dict) -> None:
    """Little-endian container: magic, u16 version, u32 tensor count, then per
    tensor (u16 name length, name, u8 dtype code, u8 rank, rank u64 dims, raw
    row-major floats), then a u64-length-prefixed UTF-8 metadata document."""
    meta = dict(metadata)
    meta["payload_sha1"] = payload_hash(tensors)
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_F32, raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}Q", *raw.shape))
            fh.write(raw.tobytes())
        fh.write(struct.pack("<Q", len(doc)))
        fh.write(doc)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unknown format version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", fh.read(2))
            if dtype_code != _DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
            tensors[name] = arr.astype(np.float32)
        (doclen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(doclen).decode("utf-8"))
    stored = meta.get("payload_sha1")
    if stored is not None and stored != payload_hash(tensors):
        raise CheckpointError(f"{path}: payload hash mismatch")
    return tensors, meta


def save_model(path, model: vitmae.VitMaeModel, optim_cfg: OptimConfig | None = None,
               seed: int | None = None, extra: dict | None = None) -> None:
    meta = {
        "model_config": asdict(model.config),
        "optim_config": asdict(optim_cfg) if optim_cfg is not None else None,
        "seed": seed,
        "mode": model.mode,
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_arrays(), meta)


def load_model(path) -> tuple[vitmae.VitMaeModel, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = vitmae.ModelConfig(**meta["model_config"])
    model = vitmae.VitMaeModel(cfg, mode=meta["mode"])
    model.load_state_arrays(tensors)
    return model, meta


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _mask_seed_stream(seed: int):
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.integers(0, 2 ** 31 - 1))


def train_pretrain(model: vitmae.VitMaeModel, images: np.ndarray, cfg: OptimConfig,
                   seed: int = 0, checkpoint_path=None,
                   log_fn: Callable[[dict], None] | None = None) -> dict:
    """Masked-reconstruction training. Returns a history dict with the
    per-epoch mean loss trace; optionally writes the final checkpoint."""
    if model.mode != vitmae.PRETRAIN:
        raise ContractError("train_pretrain needs a pretraining-mode model")
    if len(images) == 0:
        raise ConfigurationError("empty pretraining corpus")
    n = len(images)
    batch_rng = np.random.default_rng(seed ^ 0x5EED)
    mask_seeds = _mask_seed_stream(seed ^ 0x3A5C)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = TrainState()
    no_decay = model.no_decay_names()
    num_patches = model.config.num_patches
    epoch_losses: list[float] = []
    step = 0
    # per-op NaN screening off in the hot loop; the loss value and the leaf
    # gradients are still checked every step
    prev_checks = ndgrad.set_finite_checks(False)
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for idx in _epoch_batches(n, cfg.batch_size, batch_rng):
                batch = images[idx]
                plans = [vitmae.sample_mask(num_patches, model.config.mask_ratio,
                                            next(mask_seeds))
                         for _ in range(len(idx))]
                model.zero_grads()
                recon = vitmae.forward_mae(model, batch, plans)
                loss = vitmae.mae_loss(recon, batch, plans,
                                       masked_only=model.config.loss_on_masked_only)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise ndgrad.NonFiniteError(f"non-finite pretraining loss at step {step}")
                ndgrad.backward(loss)
                grads = model.grads()
                clip_global_norm(grads.values(), cfg.clip_norm)
                lr_now = lr_at(step, total_steps, cfg)
                adamw_step(model.params, grads, state, cfg, lr_now, no_decay)
                losses.append(loss_val)
                if log_fn:
                    log_fn({"epoch": epoch, "step": step, "lr": lr_now, "loss": loss_val})
                step += 1
            epoch_losses.append(float(np.mean(losses)))
    finally:
        ndgrad.set_finite_checks(prev_checks)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, cfg, seed, extra={"phase": "pretrain"})
    return {"epoch_loss": epoch_losses, "steps": step}


def evaluate_classifier(model: vitmae.VitMaeModel, images: np.ndarray,
                        labels: np.ndarray, batch_size: int = 64):
    """Deterministic forward evaluation. Returns (accuracy, probs [n, K])."""
    probs_all = []
    with ndgrad.no_grad():
        for start in range(0, len(images), batch_size):
            _, probs = vitmae.forward_classify(model, images[start:start + batch_size])
            probs_all.append(np.atleast_2d(probs))
    probs = np.concatenate(probs_all, axis=0)
    preds = vitmae.predict_class(probs)
    accuracy = float((preds == np.asarray(labels)).mean())
    return accuracy, probs


@dataclass
class FinetuneResult:
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    best_state: dict[str, np.ndarray]
    epochs_to_target: int | None = None


def train_finetune(model: vitmae.VitMaeModel, train_images, train_labels,
                   val_images, val_labels, class_weights: ClassWeights,
                   cfg: OptimConfig, seed: int = 0, checkpoint_path=None,
                   log_fn: Callable[[dict], None] | None = None,
                   val_metric_fn: Callable[[np.ndarray, np.ndarray], float] | None = None,
                   target_metric: float | None = None) -> FinetuneResult:
    """Supervised fine-tuning with weighted cross-entropy.

    Tracks validation accuracy each epoch and keeps the parameters of the best
    epoch (ties resolved toward the earlier epoch). ``val_metric_fn`` may
    compute an extra per-epoch metric from (labels, probs); when
    ``target_metric`` is given, the first epoch whose extra metric reaches it
    is recorded as ``epochs_to_target``.
    """
    if model.mode != vitmae.CLASSIFY:
        raise ContractError("train_finetune needs a fine-tuning-mode model")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    k = model.config.num_classes
    present = np.bincount(train_labels, minlength=k)
    if (present == 0).any():
        missing = [i for i, c in enumerate(present) if c == 0]
        raise ConfigurationError(f"training fold is missing classes {missing}")
    n = len(train_images)
    batch_rng = np.random.default_rng(seed ^ 0x5EED)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = TrainState()
    no_decay = model.no_decay_names()
    w = class_weights.weights
    history: list[dict] = []
    best_state = model.copy_state()
    best_acc = -1.0
    best_epoch = -1
    epochs_to_target = None
    step = 0
    prev_checks = ndgrad.set_finite_checks(False)
    try:
        for epoch in range(cfg.epochs):
            losses = []
            correct = 0
            for idx in _epoch_batches(n, cfg.batch_size, batch_rng):
                batch, targets = train_images[idx], train_labels[idx]
                model.zero_grads()
                logits, probs = vitmae.forward_classify(model, batch)
                loss = weighted_cross_entropy(logits, targets, w)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise ndgrad.NonFiniteError(f"non-finite fine-tuning loss at step {step}")
                ndgrad.backward(loss)
                grads = model.grads()
                clip_global_norm(grads.values(), cfg.clip_norm)
                lr_now = lr_at(step, total_steps, cfg)
                adamw_step(model.params, grads, state, cfg, lr_now, no_decay)
                losses.append(loss_val)
                correct += int((vitmae.predict_class(np.atleast_2d(probs)) == targets).sum())
                step += 1
            val_acc, val_probs = evaluate_classifier(model, val_images, val_labels,
                                                     cfg.batch_size)
            row = {
                "epoch": epoch,
                "step": step,
                "lr": lr_at(step - 1, total_steps, cfg),
                "loss": float(np.mean(losses)),
                "train_accuracy": correct / n,
                "val_accuracy": val_acc,
            }
            if val_metric_fn is not None:
                extra = float(val_metric_fn(val_labels, val_probs))
                row["val_metric"] = extra
                if (target_metric is not None and epochs_to_target is None
                        and extra >= target_metric):
                    epochs_to_target = epoch + 1
            history.append(row)
            if log_fn:
                log_fn(row)
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_state = model.copy_state()
    finally:
        ndgrad.set_finite_checks(prev_checks)
    state.best_val_accuracy = best_acc
    state.best_epoch = best_epoch
    model.load_state_arrays(best_state)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, cfg, seed,
                   extra={"phase": "finetune", "best_epoch": best_epoch,
                          "best_val_accuracy": best_acc})
    return FinetuneResult(history=history, best_epoch=best_epoch,
                          best_val_accuracy=best_acc, best_state=best_state,
                          epochs_to_target=epochs_to_target)


def grid_search(lr_grid: Sequence[float], wd_grid: Sequence[float], cv_plan,
                evaluate_cell: Callable[[float, float, object], float]):
    """Evaluate every (learning rate, weight decay) pair with the supplied
    cross-validation plan; return (best_lr, best_wd, results). Ties go to the
    lower learning rate, then the lower weight decay."""
    if not lr_grid or not wd_grid:
        raise ContractError("grids must be non-empty")
    results: dict[tuple[float, float], float] = {}
    for lr in lr_grid:
        for wd in wd_grid:
            results[(lr, wd)] = float(evaluate_cell(lr, wd, cv_plan))
    best = max(results.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
    return best[0][0], best[0][1], results
