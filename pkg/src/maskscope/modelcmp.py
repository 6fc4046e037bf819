"""Cross-model mask comparison via mean absolute residuals.

Two models that attend to the same image regions produce nearly equal
weighted masks; the mean absolute per-pixel difference, averaged over
the test set, quantifies their divergence on a 0..1 scale. Masks from
architectures with different conv-map sizes are compared after
resampling to the shared image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .gradcam import NormalizedMask


@dataclass
class ResidualMatrix:
    """Symmetric model-by-model average residuals with a zero diagonal."""

    models: list[str]
    values: np.ndarray
    image_counts: np.ndarray


def _mask_values(mask: NormalizedMask | np.ndarray) -> np.ndarray:
    return mask.values if isinstance(mask, NormalizedMask) else np.asarray(mask)


def average_residual(
    mask_a: NormalizedMask | np.ndarray, mask_b: NormalizedMask | np.ndarray
) -> float:
    """Mean absolute per-pixel difference of two same-grid masks, in [0, 1]."""
    a = _mask_values(mask_a)
    b = _mask_values(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ after resampling: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def residual_matrix(
    models: Sequence[str],
    masks: Mapping[str, Mapping[str, NormalizedMask | np.ndarray]],
    image_ids: Sequence[str],
) -> ResidualMatrix:
    """Average residual between every model pair over the same image set.

    ``masks[model][image_id]`` must hold that model's image-resolution
    mask; a missing mask is an error naming the image and model. The
    per-image means accumulate in double precision, so the result is
    stable against image order.
    """
    m = len(models)
    values = np.zeros((m, m), dtype=np.float64)
    counts = np.zeros((m, m), dtype=np.int64)
    for model in models:
        per_model = masks.get(model)
        if per_model is None:
            raise ValueError(f"no masks computed for model '{model}'")
        for image_id in image_ids:
            if image_id not in per_model:
                raise ValueError(f"image '{image_id}' has no mask for model '{model}'")
    for i in range(m):
        counts[i, i] = len(image_ids)
        for j in range(i + 1, m):
            total = 0.0
            for image_id in image_ids:
                total += average_residual(masks[models[i]][image_id], masks[models[j]][image_id])
            mean = total / len(image_ids) if image_ids else 0.0
            values[i, j] = values[j, i] = mean
            counts[i, j] = counts[j, i] = len(image_ids)
    return ResidualMatrix(models=list(models), values=values, image_counts=counts)


def residuals_to_csv(matrix: ResidualMatrix) -> str:
    lines = ["model," + ",".join(matrix.models)]
    for i, model in enumerate(matrix.models):
        cells = ",".join(repr(float(v)) for v in matrix.values[i])
        lines.append(f"{model},{cells}")
    return "\n".join(lines) + "\n"


def residuals_to_markdown(matrix: ResidualMatrix) -> str:
    """Pairwise table, one row per unordered model pair."""
    lines = [
        "| Models (m1-m2) | Average residual |",
        "| --- | --- |",
    ]
    for i in range(len(matrix.models)):
        for j in range(i + 1, len(matrix.models)):
            pair = f"{matrix.models[i]}-{matrix.models[j]}"
            lines.append(f"| {pair} | {matrix.values[i, j]:.4f} |")
    return "\n".join(lines) + "\n"
