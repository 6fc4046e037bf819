"""Object-level pixel statistics over segmentation label maps.

For each semantic object the binary explanation mask either covers its
pixels or it does not; the per-class ratio of covered pixels to all
pixels of that object (summed over the class's images, then divided)
says how strongly the object drives the class decision. Objects too
rare to matter are filtered by an average-pixel-count threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gradcam import BinaryMask
from .tensor_io import IGNORE_LABEL

NUM_OBJECTS = 150
DEFAULT_MIN_AVG_PIXELS = 100.0


def count_pixels(
    segmap: np.ndarray,
    mask: BinaryMask | np.ndarray,
    num_objects: int = NUM_OBJECTS,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-object (covered, total) pixel counts for one image.

    ``covered[p]`` counts pixels of object ``p`` inside the mask,
    ``total[p]`` counts them in the whole image. Ignore-labeled pixels
    are excluded from both. Any other label >= num_objects is an error.
    """
    seg = np.asarray(segmap)
    mask_values = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    if seg.ndim != 2 or mask_values.ndim != 2:
        raise ValueError("segmentation map and mask must be 2-D")
    if seg.shape != mask_values.shape:
        raise ValueError(
            f"segmentation shape {seg.shape} does not match mask {mask_values.shape}"
        )
    if mask_values.dtype != bool:
        mask_values = mask_values.astype(bool)

    valid = seg != IGNORE_LABEL
    labels = seg[valid].astype(np.int64)
    if labels.size and labels.max() >= num_objects:
        bad = int(labels[labels >= num_objects][0])
        raise ValueError(f"segmentation label {bad} outside 0..{num_objects - 1}")
    total = np.bincount(labels, minlength=num_objects)
    covered = np.bincount(seg[valid & mask_values].astype(np.int64), minlength=num_objects)
    return covered.astype(np.int64), total.astype(np.int64)


@dataclass
class ClassObjectStats:
    """Aggregated per-object counts and ratios for one class.

    ``ratio[p]`` is the ratio of summed covered pixels to summed total
    pixels; rows with zero total are undefined (NaN, ``defined`` False)
    and are never divided.
    """

    class_name: str
    n_images: int
    sum_covered: np.ndarray
    sum_total: np.ndarray
    ratio: np.ndarray
    defined: np.ndarray
    selected: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.selected is None:
            self.selected = np.zeros(len(self.sum_total), dtype=bool)


def class_pixel_ratios(
    counts: Iterable[tuple[np.ndarray, np.ndarray]],
    class_name: str,
    num_objects: int = NUM_OBJECTS,
) -> ClassObjectStats:
    """Aggregate per-image counts into the ratio-of-sums for one class."""
    sum_covered = np.zeros(num_objects, dtype=np.int64)
    sum_total = np.zeros(num_objects, dtype=np.int64)
    n_images = 0
    for covered, total in counts:
        sum_covered += covered
        sum_total += total
        n_images += 1
    defined = sum_total > 0
    ratio = np.full(num_objects, np.nan, dtype=np.float64)
    ratio[defined] = sum_covered[defined] / sum_total[defined]
    return ClassObjectStats(
        class_name=class_name,
        n_images=n_images,
        sum_covered=sum_covered,
        sum_total=sum_total,
        ratio=ratio,
        defined=defined,
    )


def select_objects(
    stats: ClassObjectStats, min_avg_pixels: float = DEFAULT_MIN_AVG_PIXELS
) -> np.ndarray:
    """Flag objects whose average pixel count per class image exceeds the bound.

    Strict comparison: an object averaging exactly ``min_avg_pixels``
    is not selected. Updates ``stats.selected`` in place and returns it.
    """
    if stats.n_images > 0:
        average = stats.sum_total / stats.n_images
        stats.selected = average > min_avg_pixels
    else:
        stats.selected = np.zeros_like(stats.sum_total, dtype=bool)
    return stats.selected


@dataclass
class HistogramRow:
    class_name: str
    object_id: int
    object_name: str
    model: str
    ratio: float


def histogram_rows(
    tables: Mapping[str, Mapping[str, ClassObjectStats]],
    object_names: Sequence[str],
    class_order: Sequence[str],
    model_order: Sequence[str],
) -> list[HistogramRow]:
    """Grouped histogram dataset across models.

    ``tables`` maps model -> class -> stats. Per class, rows are
    restricted to the union of selected objects over all models and
    ordered by object name.
    """
    rows: list[HistogramRow] = []
    for class_name in class_order:
        union: set[int] = set()
        for model in model_order:
            stats = tables.get(model, {}).get(class_name)
            if stats is not None:
                union.update(int(p) for p in np.flatnonzero(stats.selected))
        ordered = sorted(union, key=lambda p: (object_names[p], p))
        for object_id in ordered:
            for model in model_order:
                stats = tables.get(model, {}).get(class_name)
                if stats is None:
                    continue
                ratio = stats.ratio[object_id]
                rows.append(
                    HistogramRow(
                        class_name=class_name,
                        object_id=object_id,
                        object_name=object_names[object_id],
                        model=model,
                        ratio=float(ratio) if np.isfinite(ratio) else float("nan"),
                    )
                )
    return rows


def default_object_names(num_objects: int = NUM_OBJECTS) -> list[str]:
    return [f"object_{p}" for p in range(num_objects)]


def load_object_names(path: Path | str, num_objects: int = NUM_OBJECTS) -> list[str]:
    """Read an ``id name`` per-line names file; missing ids keep defaults."""
    names = default_object_names(num_objects)
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or not parts[0].isdigit():
            raise ValueError(f"names file line {line_number}: expected '<id> <name>'")
        object_id = int(parts[0])
        if 0 <= object_id < num_objects:
            names[object_id] = parts[1]
    return names
