"""Localization heatmaps, weighted masks, and visual explanations.

The chain per image and model: average each gradient channel into a
scalar weight, combine the activation channels with those weights, clamp
negatives to zero, min-max normalize into [0, 1], upsample to image
resolution, and threshold into the binary mask that blacks out
unimportant pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_io import ImageEntry, read_array


@dataclass
class NormalizedMask:
    """Weighted mask with values in [0, 1].

    Freshly normalized masks attain both 0 and 1 exactly unless the
    source heatmap was constant, in which case the mask is all zeros and
    ``degenerate`` is set. Upsampled copies stay inside [0, 1] but may
    not attain the endpoints.
    """

    values: np.ndarray
    degenerate: bool = False


@dataclass
class BinaryMask:
    """Boolean pixel-selection mask at image resolution."""

    values: np.ndarray
    threshold_used: float


def _require_3d_f32(array: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-D [K, H, W], got rank {arr.ndim}")
    if arr.dtype != np.float32:
        raise ValueError(f"{name} must be f32, got {arr.dtype}")
    return arr


def channel_weights(gradients: np.ndarray) -> np.ndarray:
    """Spatial mean of each gradient channel, shape [K]."""
    grads = _require_3d_f32(gradients, "gradients")
    return grads.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)


def compute_heatmap(activations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of activation channels, negatives clamped to zero."""
    acts = _require_3d_f32(activations, "activations")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != acts.shape[0]:
        raise ValueError(
            f"weights length {w.shape} does not match {acts.shape[0]} channels"
        )
    combined = np.tensordot(w, acts.astype(np.float64), axes=(0, 0))
    return np.maximum(combined, 0.0).astype(np.float32)


def upsample_bilinear(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D grid.

    Sample positions map [0, H-1] onto [0, H0-1], so corners are copied
    exactly and every output value is a convex combination of inputs.
    """
    out_h, out_w = target
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {target}")
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"grid must be 2-D, got rank {g.ndim}")
    in_h, in_w = g.shape

    rows = np.arange(out_h) * ((in_h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    cols = np.arange(out_w) * ((in_w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]

    top = g[np.ix_(r0, c0)] * (1 - fc) + g[np.ix_(r0, c1)] * fc
    bottom = g[np.ix_(r1, c0)] * (1 - fc) + g[np.ix_(r1, c1)] * fc
    return (top * (1 - fr) + bottom * fr).astype(np.float32)


def normalize_mask(heatmap: np.ndarray) -> NormalizedMask:
    """Min-max normalize into [0, 1]; constant inputs become a flagged zero mask."""
    values = np.asarray(heatmap, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got rank {values.ndim}")
    if not np.isfinite(values).all():
        raise ValueError("heatmap contains non-finite values")
    low = values.min()
    high = values.max()
    if high > low:
        normalized = (values - low) / (high - low)
        return NormalizedMask(normalized.astype(np.float32), degenerate=False)
    return NormalizedMask(np.zeros(values.shape, dtype=np.float32), degenerate=True)


def threshold_mask(mask: NormalizedMask, threshold: float) -> BinaryMask:
    """Select pixels with value >= threshold; threshold must lie in [0, 1]."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return BinaryMask(mask.values >= np.float32(threshold), float(threshold))


def apply_explanation(image: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """Copy selected pixels from the RGB image, black out the rest."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"image must be u8 [H, W, 3], got {img.shape} {img.dtype}")
    if img.shape[:2] != mask.values.shape:
        raise ValueError(
            f"image size {img.shape[:2]} does not match mask {mask.values.shape}"
        )
    return np.where(mask.values[:, :, None], img, np.uint8(0))


def mask_pipeline_arrays(
    activations: np.ndarray,
    gradients: np.ndarray,
    image_size: tuple[int, int],
    threshold: float,
) -> tuple[NormalizedMask, NormalizedMask, BinaryMask]:
    """Full mask chain on in-memory tensors.

    Returns the conv-resolution mask (descriptor and model-comparison
    input), the image-resolution mask, and the thresholded binary mask.
    """
    weights = channel_weights(gradients)
    heatmap = compute_heatmap(activations, weights)
    conv_mask = normalize_mask(heatmap)
    upsampled = upsample_bilinear(conv_mask.values, image_size)
    image_mask = NormalizedMask(
        np.clip(upsampled, 0.0, 1.0), degenerate=conv_mask.degenerate
    )
    binary = threshold_mask(image_mask, threshold)
    return conv_mask, image_mask, binary


def mask_pipeline(
    entry: ImageEntry, model: str, threshold: float
) -> tuple[NormalizedMask, NormalizedMask, BinaryMask]:
    """Mask chain for one manifest entry and model, reading its tensor files."""
    if model not in entry.tensors:
        raise ValueError(f"entry '{entry.id}' has no tensors for model '{model}'")
    activations = read_array(entry.tensors[model]["activation"])
    gradients = read_array(entry.tensors[model]["gradient"])
    return mask_pipeline_arrays(activations, gradients, entry.image_size, threshold)
