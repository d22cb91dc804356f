"""Transformer-adapted Score-CAM saliency maps.

The activation source is the final encoder block's pre-attention layernorm
output; the class token is dropped and the remaining patch tokens reshaped to
a channels x grid x grid feature stack. Each selected channel is min-max
normalized, upsampled, multiplied into the standardized input, and scored by
the classifier; the score differences against the all-zero baseline weight the
channel maps, whose rectified sum becomes the saliency map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import ndgrad, vitmae
from .data import bilinear_resize, write_pnm
from .ndgrad import ContractError, ShapeError
from .vitmae import StateError


@dataclass(frozen=True)
class TokenGrid:
    """Patch-token activations arranged [channels, g, g], class token removed."""

    activations: np.ndarray
    source_layer: str

    def __post_init__(self):
        a = self.activations
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ShapeError(f"token grid must be [C, g, g], got {a.shape}")


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel attribution in [0, 1]; a constant raw map collapses to zeros."""

    values: np.ndarray
    target_class: int
    channel_budget: int
    channel_weights: np.ndarray
    channel_ids: np.ndarray
    channel_variances: np.ndarray


def extract_token_grid(model: vitmae.VitMaeModel, image) -> TokenGrid:
    """Full unmasked forward pass capturing the final block's layernorm-before
    output; token 0 (class token) is dropped and tokens reshaped row-major so
    grid cell (r, c) of channel d is token 1 + r*g + c, dimension d."""
    if model.mode != vitmae.CLASSIFY:
        raise StateError("extract_token_grid requires a fine-tuning-mode model")
    g = model.config.grid_size
    with ndgrad.no_grad():
        _, _, prenorm = vitmae.forward_classify(model, image, capture_prenorm=True)
    tokens = prenorm.data
    if tokens.ndim == 3:
        if tokens.shape[0] != 1:
            raise ShapeError("extract_token_grid expects a single image")
        tokens = tokens[0]
    patch_tokens = tokens[1:]                       # [N, D]
    grid = patch_tokens.reshape(g, g, -1).transpose(2, 0, 1)
    return TokenGrid(activations=np.ascontiguousarray(grid),
                     source_layer=f"enc.{model.config.encoder_depth - 1}.ln1")


def _minmax(arr: np.ndarray) -> np.ndarray:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi - lo == 0.0:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def combine_channel_maps(maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Rectified weighted sum of channel maps, min-max normalized to [0, 1].

    A constant (for instance all-zero) combination collapses to zeros, and
    duplicating the full channel set leaves the result unchanged because the
    normalization absorbs the doubled sum.
    """
    combined = np.tensordot(np.asarray(weights, np.float64),
                            np.asarray(maps, np.float64), axes=(0, 0))
    return _minmax(np.maximum(combined, 0.0))


def scorecam(model: vitmae.VitMaeModel, image, target_class: int,
             channel_budget: int = 64, score_mode: str = "prob_diff") -> SaliencyMap:
    """Score-weighted channel combination for one standardized image.

    Channels are ranked by spatial variance and the top ``channel_budget``
    scored; zero-variance channels are skipped. ``score_mode`` selects the
    weight definition: 'prob_diff' (softmax probability minus the all-zero
    baseline, the default), 'prob', or 'logit'.
    """
    if score_mode not in ("prob_diff", "prob", "logit"):
        raise ContractError(f"unknown score_mode {score_mode!r}")
    grid = extract_token_grid(model, image)
    channels = grid.activations.shape[0]
    if channel_budget > channels:
        raise ContractError(f"channel budget {channel_budget} exceeds {channels} channels")
    if not 0 <= target_class < model.config.num_classes:
        raise ContractError(f"target class {target_class} outside model's classes")
    arr = image.data if isinstance(image, ndgrad.Tensor) else np.asarray(image, np.float32)
    if arr.ndim != 3:
        raise ShapeError(f"scorecam expects one [1, H, W] image, got {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]

    variances = grid.activations.reshape(channels, -1).var(axis=1)
    ranked = np.lexsort((np.arange(channels), -variances))[:channel_budget]
    selected = ranked[variances[ranked] > 0.0]

    ups = np.empty((len(selected), h, w), dtype=np.float32)
    for i, c in enumerate(selected):
        ups[i] = bilinear_resize(_minmax(grid.activations[c]), h, w)

    masked = ups[:, None, :, :] * arr[None, :, :, :]
    batch = np.concatenate([masked, np.zeros((1, 1, h, w), np.float32)], axis=0)
    with ndgrad.no_grad():
        logits, probs = vitmae.forward_classify(model, batch)
    if score_mode == "logit":
        scores = logits.data[:, target_class]
        weights = scores[:-1] - scores[-1]
    else:
        scores = probs[:, target_class]
        weights = scores[:-1] - scores[-1] if score_mode == "prob_diff" else scores[:-1]

    saliency = combine_channel_maps(ups, weights)

    full_weights = np.zeros(channels)
    full_weights[selected] = weights
    return SaliencyMap(values=saliency, target_class=target_class,
                       channel_budget=channel_budget, channel_weights=full_weights,
                       channel_ids=selected.copy(), channel_variances=variances)


_RAMP_LOW = np.array([0.0, 0.0, 255.0])    # blue
_RAMP_HIGH = np.array([255.0, 0.0, 0.0])   # red


def overlay(image: np.ndarray, saliency: SaliencyMap, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the saliency, mapped through a fixed blue-to-red ramp, onto
    the grayscale image. Returns uint8 RGB with the input's height and width."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim != 2:
        raise ShapeError(f"overlay expects a 2-D grayscale image, got {gray.shape}")
    if gray.shape != saliency.values.shape:
        raise ShapeError(f"image {gray.shape} vs saliency {saliency.values.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha {alpha} outside [0, 1]")
    s = saliency.values[:, :, None]
    ramp = _RAMP_LOW * (1.0 - s) + _RAMP_HIGH * s
    base = np.repeat(gray[:, :, None], 3, axis=2)
    blended = (1.0 - alpha) * base + alpha * ramp
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def saliency_mass_fraction(saliency: SaliencyMap, region: np.ndarray) -> float:
    """Fraction of total saliency mass inside a boolean region."""
    total = float(saliency.values.sum())
    if total == 0.0:
        return 0.0
    return float(saliency.values[region].sum()) / total


def mask_bounding_box(mask: np.ndarray) -> np.ndarray:
    """Boolean box spanning the nonzero extent of a mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ContractError("empty mask has no bounding box")
    box = np.zeros(mask.shape, dtype=bool)
    box[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
    return box


def write_saliency_outputs(out_dir, stem: str, image_u8: np.ndarray,
                           saliency: SaliencyMap, alpha: float = 0.5) -> None:
    """Overlay P6, raw saliency P5, and the per-channel weight CSV."""
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pnm(out_dir / f"{stem}_overlay.ppm", overlay(image_u8, saliency, alpha))
    write_pnm(out_dir / f"{stem}_saliency.pgm",
              np.round(saliency.values * 255).astype(np.uint8))
    with open(out_dir / f"{stem}_channels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["channel", "variance", "weight"])
        for c in saliency.channel_ids:
            writer.writerow([int(c), f"{saliency.channel_variances[c]:.15g}",
                             f"{saliency.channel_weights[c]:.15g}"])
