"""Masked-autoencoder vision transformer for grayscale ultrasound images.

Patch embedding, a pre-norm transformer encoder with a class token, a light
reconstruction decoder fed by mask tokens, the random patch-masking sampler,
the mean-squared reconstruction loss, and the fine-tuning classification head.

Positional embeddings are fixed 2-D sinusoids for both encoder and decoder, so
the learned state is exactly the parameter dict and is a pure function of
(ModelConfig, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import ndgrad
from .ndgrad import ContractError, ShapeError, Tensor

PRETRAIN = "pretrain"
CLASSIFY = "classify"


class StateError(RuntimeError):
    """Model is in the wrong mode for the requested operation."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the CPU desk scale; use
    ``reference_config`` for the 224/16 shape mirrored from the training setup."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    encoder_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.25
    num_classes: int = 3
    seed: int = 0
    loss_on_masked_only: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.encoder_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by encoder_heads {self.encoder_heads}")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ContractError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ContractError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.num_classes not in (2, 3):
            raise ContractError(f"num_classes must be 2 or 3, got {self.num_classes}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2


def reference_config(**overrides) -> ModelConfig:
    """224-pixel / 16-pixel-patch configuration, kept small in width; used for
    shape tests only."""
    kw = dict(image_size=224, patch_size=16, embed_dim=64, encoder_depth=2,
              encoder_heads=4, decoder_dim=32, decoder_depth=1, decoder_heads=4)
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# deterministic initialisation helpers
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def sincos_pos_embed_2d(dim: int, grid: int, with_lead_token: bool = True) -> np.ndarray:
    """Fixed 2-D sine/cosine positional table, row-major over a grid x grid
    layout; an optional all-zero leading row for the class token."""
    if dim % 4 != 0:
        raise ContractError(f"sincos embedding needs dim divisible by 4, got {dim}")
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0)))
    coords = np.arange(grid, dtype=np.float64)

    def encode(pos):
        angles = np.outer(pos, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    rows = np.repeat(coords, grid)
    cols = np.tile(coords, grid)
    table = np.concatenate([encode(rows), encode(cols)], axis=1).astype(np.float32)
    if with_lead_token:
        table = np.concatenate([np.zeros((1, dim), np.float32), table], axis=0)
    return table


def _init_block(rng, prefix: str, dim: int, heads: int, mlp_ratio: float,
                params: dict[str, Tensor]) -> None:
    hidden = int(dim * mlp_ratio)

    def p(name, arr):
        params[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True)

    p("ln1.gain", np.ones(dim, np.float32))
    p("ln1.bias", np.zeros(dim, np.float32))
    for w in ("wq", "wk", "wv", "wo"):
        p(f"attn.{w}", trunc_normal(rng, (dim, dim)))
    for b in ("bq", "bk", "bv", "bo"):
        p(f"attn.{b}", np.zeros(dim, np.float32))
    p("ln2.gain", np.ones(dim, np.float32))
    p("ln2.bias", np.zeros(dim, np.float32))
    p("mlp.w1", trunc_normal(rng, (dim, hidden)))
    p("mlp.b1", np.zeros(hidden, np.float32))
    p("mlp.w2", trunc_normal(rng, (hidden, dim)))
    p("mlp.b2", np.zeros(dim, np.float32))


class VitMaeModel:
    """Parameter container plus mode flag.

    ``pretrain`` mode carries the reconstruction decoder and no classification
    head; ``classify`` mode is the opposite. The parameter dict is ordered and
    its contents are a pure function of (config, seed, mode).
    """

    def __init__(self, config: ModelConfig, mode: str = PRETRAIN):
        if mode not in (PRETRAIN, CLASSIFY):
            raise ContractError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d, dd = config.embed_dim, config.decoder_dim
        p = config.patch_size

        def add(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True)

        add("patch_embed.weight", trunc_normal(rng, (p * p, d)))
        add("patch_embed.bias", np.zeros(d, np.float32))
        add("cls_token", trunc_normal(rng, (d,)))
        for i in range(config.encoder_depth):
            _init_block(rng, f"enc.{i}", d, config.encoder_heads, config.mlp_ratio, self.params)
        add("enc.norm.gain", np.ones(d, np.float32))
        add("enc.norm.bias", np.zeros(d, np.float32))
        if mode == PRETRAIN:
            add("mask_token", trunc_normal(rng, (dd,)))
            add("dec_embed.weight", trunc_normal(rng, (d, dd)))
            add("dec_embed.bias", np.zeros(dd, np.float32))
            for i in range(config.decoder_depth):
                _init_block(rng, f"dec.{i}", dd, config.decoder_heads, config.mlp_ratio,
                            self.params)
            add("dec.norm.gain", np.ones(dd, np.float32))
            add("dec.norm.bias", np.zeros(dd, np.float32))
            add("recon.weight", trunc_normal(rng, (dd, p * p)))
            add("recon.bias", np.zeros(p * p, np.float32))
        else:
            add("head.weight", trunc_normal(rng, (d, config.num_classes)))
            add("head.bias", np.zeros(config.num_classes, np.float32))
        self.pos_embed_enc = sincos_pos_embed_2d(d, config.grid_size)
        self.pos_embed_dec = sincos_pos_embed_2d(dd, config.grid_size)
        # constant tensors reused across forward passes
        self._pos_enc_patches = Tensor(self.pos_embed_enc[1:][None])
        self._pos_enc_cls = Tensor(self.pos_embed_enc[0])
        self._pos_dec_full = Tensor(self.pos_embed_dec[None])

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def no_decay_names(self) -> set[str]:
        """Parameters excluded from weight decay: biases, layernorm gains and
        biases, and the class/mask tokens."""
        out = set()
        for name in self.params:
            if name.endswith(".bias") or name.endswith(".gain") or name.endswith("_token"):
                out.add(name)
            elif name.endswith(".b1") or name.endswith(".b2") or name.split(".")[-1] in (
                    "bq", "bk", "bv", "bo"):
                out.add(name)
        return out

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ContractError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].data.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != model {self.params[k].data.shape}")
            self.params[k] = Tensor(np.asarray(arr, np.float32), requires_grad=True)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def classifier_from_pretrained(pretrained: VitMaeModel, num_classes: int,
                               head_seed: int | None = None) -> VitMaeModel:
    """Drop the decoder, keep the encoder weights, attach a fresh head."""
    cfg = replace(pretrained.config, num_classes=num_classes,
                  seed=pretrained.config.seed if head_seed is None else head_seed)
    clf = VitMaeModel(cfg, mode=CLASSIFY)
    for name, tensor in pretrained.params.items():
        if name in clf.params:
            clf.params[name] = Tensor(tensor.data.copy(), requires_grad=True)
    return clf


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[1, H, W] (or [B, 1, H, W]) -> [num_patches, patch_size**2] rows holding
    raster-ordered patch pixels, patches in row-major grid order."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"patchify expects [1, H, W] or [B, 1, H, W], got {arr.shape}")
    b, _, h, w = arr.shape
    if h != w or h % patch_size != 0:
        raise ShapeError(f"image {h}x{w} not square-divisible by patch {patch_size}")
    g = h // patch_size
    out = (arr.reshape(b, g, patch_size, g, patch_size)
              .transpose(0, 1, 3, 2, 4)
              .reshape(b, g * g, patch_size * patch_size))
    return out[0] if squeeze else out


def unpatchify(patches: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of patchify; bit-exact round trip."""
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    b, n, pp = arr.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or pp != patch_size * patch_size:
        raise ShapeError(f"cannot unpatchify shape {arr.shape} with patch {patch_size}")
    out = (arr.reshape(b, g, g, patch_size, patch_size)
              .transpose(0, 1, 3, 2, 4)
              .reshape(b, 1, g * patch_size, g * patch_size))
    return out[0] if squeeze else out


def _unpatchify_t(patches: Tensor, patch_size: int, grid: int) -> Tensor:
    b = patches.shape[0]
    s = grid * patch_size
    x = patches.reshape((b, grid, grid, patch_size, patch_size))
    x = ndgrad.transpose(x, (0, 1, 3, 2, 4))
    return x.reshape((b, 1, s, s))


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    """Per-patch hide/keep decision. The first ``num_masked`` entries of the
    permutation are the hidden patches; the rest give the visible gather order."""

    mask: np.ndarray
    permutation: np.ndarray
    seed: int | None

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def masked_indices(self) -> np.ndarray:
        return self.permutation[: self.num_masked]

    @property
    def visible_indices(self) -> np.ndarray:
        return self.permutation[self.num_masked:]


def mask_count(num_patches: int, mask_ratio: float) -> int:
    # round() with half-away-from-zero ties, so 0.5 fractions are stable
    return int(math.floor(mask_ratio * num_patches + 0.5))


def sample_mask(num_patches: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniform random subset of exactly round(mask_ratio * num_patches)
    patches, via a seeded shuffle. Identical seed, identical plan."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ContractError(f"mask_ratio {mask_ratio} outside [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_patches)
    n_masked = mask_count(num_patches, mask_ratio)
    mask = np.zeros(num_patches, dtype=bool)
    mask[perm[:n_masked]] = True
    return MaskPlan(mask=mask, permutation=perm, seed=seed)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def proj(w, bias):
        return ndgrad.add(ndgrad.matmul(x, params[f"{prefix}.attn.{w}"]),
                          params[f"{prefix}.attn.{bias}"])

    def split(h):
        return ndgrad.transpose(h.reshape((b, t, heads, dh)), (0, 2, 1, 3))

    q = split(proj("wq", "bq"))
    k = split(proj("wk", "bk"))
    v = split(proj("wv", "bv"))
    scores = ndgrad.mul(ndgrad.matmul(q, ndgrad.transpose(k, (0, 1, 3, 2))), scale)
    attn = ndgrad.softmax(scores, axis=-1)
    ctx = ndgrad.matmul(attn, v)
    ctx = ndgrad.transpose(ctx, (0, 2, 1, 3)).reshape((b, t, d))
    return ndgrad.add(ndgrad.matmul(ctx, params[f"{prefix}.attn.wo"]),
                      params[f"{prefix}.attn.bo"])


def _mlp(x: Tensor, params, prefix: str) -> Tensor:
    h = ndgrad.add(ndgrad.matmul(x, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"])
    h = ndgrad.gelu(h)
    return ndgrad.add(ndgrad.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])


def _run_blocks(x: Tensor, params, stem: str, depth: int, heads: int,
                capture_prenorm_last: bool = False):
    captured = None
    for i in range(depth):
        prefix = f"{stem}.{i}"
        h = ndgrad.layernorm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        if capture_prenorm_last and i == depth - 1:
            captured = h
        x = ndgrad.add(x, _attention(h, params, prefix, heads))
        h2 = ndgrad.layernorm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        x = ndgrad.add(x, _mlp(h2, params, prefix))
    x = ndgrad.layernorm(x, params[f"{stem}.norm.gain"], params[f"{stem}.norm.bias"])
    return x, captured


def _embed_patches(model: VitMaeModel, images: np.ndarray) -> Tensor:
    cfg = model.config
    patches = patchify(images, cfg.patch_size)  # [B, N, p*p]
    tokens = ndgrad.add(
        ndgrad.matmul(Tensor._from_array(np.ascontiguousarray(patches, np.float32), False),
                      model.params["patch_embed.weight"]),
        model.params["patch_embed.bias"])
    return ndgrad.add(tokens, model._pos_enc_patches)


def _cls_rows(model: VitMaeModel, batch: int) -> Tensor:
    d = model.config.embed_dim
    cls = ndgrad.add(model.params["cls_token"], model._pos_enc_cls)
    return ndgrad.tile_batch(ndgrad.reshape(cls, (1, 1, d)), batch)


def _to_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, np.float32)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ShapeError(f"expected [1, H, W] or [B, 1, H, W], got {arr.shape}")


def forward_mae(model: VitMaeModel, images, mask_plans) -> Tensor:
    """Masked reconstruction pass: encode visible patches (plus class token),
    rebuild the full patch order with mask tokens, decode, reassemble an image.

    Accepts a single image with one MaskPlan, or a [B, 1, H, W] batch with a
    sequence of B plans. Returns the reconstruction with matching shape.
    """
    if model.mode != PRETRAIN:
        raise StateError("forward_mae requires a pretraining-mode model (decoder present)")
    cfg = model.config
    arr, single = _to_batch(images)
    plans = [mask_plans] if isinstance(mask_plans, MaskPlan) else list(mask_plans)
    if single and len(plans) != 1:
        raise ShapeError(f"one image but {len(plans)} mask plans")
    b = arr.shape[0]
    if len(plans) != b:
        raise ShapeError(f"batch of {b} images but {len(plans)} mask plans")
    n = cfg.num_patches
    for plan in plans:
        if plan.mask.shape[0] != n:
            raise ShapeError(f"mask plan covers {plan.mask.shape[0]} patches, model has {n}")
    if arr.shape[2] != cfg.image_size or arr.shape[3] != cfg.image_size:
        raise ShapeError(f"image {arr.shape[2:]} does not match config size {cfg.image_size}")

    n_vis = n - plans[0].num_masked
    vis_idx = np.stack([p.visible_indices for p in plans])        # [B, n_vis]
    mask_idx = np.stack([p.masked_indices for p in plans])        # [B, n_mask]

    tokens = _embed_patches(model, arr)                            # [B, N, D]
    visible = ndgrad.gather_rows(tokens, vis_idx, unique=True)     # [B, n_vis, D]
    seq = ndgrad.concat([_cls_rows(model, b), visible], axis=1)    # [B, 1+n_vis, D]
    enc_out, _ = _run_blocks(seq, model.params, "enc", cfg.encoder_depth, cfg.encoder_heads)

    dec_tokens = ndgrad.add(ndgrad.matmul(enc_out, model.params["dec_embed.weight"]),
                            model.params["dec_embed.bias"])        # [B, 1+n_vis, Dd]
    cls_dec = ndgrad.gather_rows(dec_tokens, np.zeros((b, 1), np.int64), unique=True)
    vis_dec = ndgrad.gather_rows(dec_tokens, np.tile(np.arange(1, n_vis + 1), (b, 1)),
                                 unique=True)
    mask_tok = ndgrad.reshape(model.params["mask_token"], (1, 1, cfg.decoder_dim))
    mask_rows = ndgrad.tile_batch(mask_tok, b)
    mask_rows = ndgrad.gather_rows(mask_rows, np.zeros((b, n - n_vis), np.int64))
    # order [visible..., masked...] then invert each per-image permutation
    stacked = ndgrad.concat([vis_dec, mask_rows], axis=1)          # [B, N, Dd]
    order = np.concatenate([vis_idx, mask_idx], axis=1)
    restore = np.argsort(order, axis=1)
    full = ndgrad.gather_rows(stacked, restore, unique=True)       # [B, N, Dd] patch order
    full = ndgrad.concat([cls_dec, full], axis=1)                  # [B, 1+N, Dd]
    full = ndgrad.add(full, model._pos_dec_full)

    dec_out, _ = _run_blocks(full, model.params, "dec", cfg.decoder_depth, cfg.decoder_heads)
    patch_rows = ndgrad.gather_rows(dec_out, np.tile(np.arange(1, n + 1), (b, 1)), unique=True)
    pred = ndgrad.add(ndgrad.matmul(patch_rows, model.params["recon.weight"]),
                      model.params["recon.bias"])                  # [B, N, p*p]
    recon = _unpatchify_t(pred, cfg.patch_size, cfg.grid_size)
    return recon.reshape(tuple(recon.shape[1:])) if single else recon


def mae_loss(recon: Tensor, target, mask_plans=None, masked_only: bool = False) -> Tensor:
    """Mean squared error between reconstruction and original over all pixels.

    With ``masked_only`` the mean runs over hidden-patch pixels instead (the
    common MAE variant); ``mask_plans`` must then be supplied.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, np.float32)
    if tuple(recon.shape) != tgt.shape:
        raise ShapeError(f"reconstruction {tuple(recon.shape)} vs target {tgt.shape}")
    diff = ndgrad.sub(recon, Tensor(tgt))
    if not masked_only:
        return ndgrad.tmean(ndgrad.mul(diff, diff))
    if mask_plans is None:
        raise ContractError("masked_only loss needs the mask plans")
    plans = [mask_plans] if isinstance(mask_plans, MaskPlan) else list(mask_plans)
    arr, single = _to_batch(tgt)
    patch = int(round(math.sqrt(arr.shape[2] * arr.shape[3] / plans[0].mask.shape[0])))
    pix = np.stack([
        unpatchify(np.repeat(p.mask.astype(np.float32)[:, None], patch * patch, axis=1), patch)
        for p in plans])                                           # [B, 1, H, W]
    if single:
        pix = pix[0]
    count = float(pix.sum())
    if count == 0:
        raise ContractError("masked_only loss with an empty mask")
    sq = ndgrad.mul(ndgrad.mul(diff, diff), Tensor(pix))
    return ndgrad.mul(ndgrad.tsum(sq), 1.0 / count)


def forward_classify(model: VitMaeModel, images, capture_prenorm: bool = False):
    """Full (unmasked) pass through the encoder; logits come from the class
    token after the final norm. Returns (logits, probs); probs rows sum to 1.

    With ``capture_prenorm`` also returns the final block's pre-attention
    layernorm output (the saliency extraction site)."""
    if model.mode != CLASSIFY:
        raise StateError("forward_classify requires a fine-tuning-mode model")
    cfg = model.config
    arr, single = _to_batch(images)
    if arr.shape[2] != cfg.image_size or arr.shape[3] != cfg.image_size:
        raise ShapeError(f"image {arr.shape[2:]} does not match config size {cfg.image_size}")
    b = arr.shape[0]
    tokens = _embed_patches(model, arr)
    seq = ndgrad.concat([_cls_rows(model, b), tokens], axis=1)
    enc_out, prenorm = _run_blocks(seq, model.params, "enc", cfg.encoder_depth,
                                   cfg.encoder_heads, capture_prenorm_last=capture_prenorm)
    cls = ndgrad.gather_rows(enc_out, np.zeros((b, 1), np.int64), unique=True)
    cls = cls.reshape((b, cfg.embed_dim))
    logits = ndgrad.add(ndgrad.matmul(cls, model.params["head.weight"]),
                        model.params["head.bias"])
    probs = _stable_softmax(logits.data)
    if single:
        logits = logits.reshape((cfg.num_classes,))
        probs = probs[0]
    if capture_prenorm:
        return logits, probs, prenorm
    return logits, probs


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_class(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    return np.argmax(probs, axis=-1)
