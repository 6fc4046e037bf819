"""Synthetic two-class fixture with planted discriminate objects.

Class "towers" plants a skyscraper-labeled block (label 48) in the
upper image half, class "streets" a signboard block (label 43) in the
lower half. Activations and gradients concentrate on the conv cells
covering the block, so the thresholded mask covers it fully and the
planted object carries the top coverage ratio for its class. Two
"models" with different conv geometries stand in for two architectures.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from maskscope.tensor_io import IGNORE_LABEL, write_array

IMAGE_SIZE = 64
CLASS_NAMES = ["towers", "streets"]
MODELS = ("alpha", "beta")
CONV = {"alpha": (8, 8, 8), "beta": (6, 7, 7)}  # (K, H, W)
PLANTED_LABEL = {"towers": 48, "streets": 43}  # skyscraper, signboard
# (upper background label, lower background label) per class
BACKGROUND = {"towers": (2, 1), "streets": (1, 6)}  # sky/building, building/road

# Planted conv rows per (model, class); columns shift with the entry index.
_ROWS = {
    ("alpha", 0): range(1, 4),
    ("alpha", 1): range(5, 7),
    ("beta", 0): range(1, 3),
    ("beta", 1): range(4, 6),
}
_NCOLS = {"alpha": 3, "beta": 2}
_SHIFTS = 3


def _rect(class_index: int, shift: int) -> tuple[int, int, int, int]:
    # 12x12 block: 144 pixels per image, safely past a 100-pixel average.
    r0 = 10 if class_index == 0 else 42
    c0 = 10 + 9 * shift
    return r0, r0 + 12, c0, c0 + 12


def _conv_base(model: str, class_index: int, shift: int) -> np.ndarray:
    _, h, w = CONV[model]
    base = np.zeros((h, w), dtype=np.float64)
    cols = range(1 + shift, 1 + shift + _NCOLS[model])
    base[np.ix_(list(_ROWS[model, class_index]), list(cols))] = 1.0
    return base


def model_tensors(
    model: str, class_index: int, index: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Activations and gradients whose mask highlights the planted block."""
    k, h, w = CONV[model]
    base = _conv_base(model, class_index, index % _SHIFTS)
    rng = np.random.default_rng([seed, class_index, index, MODELS.index(model)])
    acts = base[None, :, :] + 0.02 * rng.standard_normal((k, h, w))
    gain = 0.8 + 0.4 * rng.random(k)
    grads = base[None, :, :] * gain[:, None, None] + 0.05 * rng.standard_normal((k, h, w))
    return acts.astype(np.float32), grads.astype(np.float32)


def segmentation(class_index: int, index: int) -> np.ndarray:
    upper, lower = BACKGROUND[CLASS_NAMES[class_index]]
    seg = np.full((IMAGE_SIZE, IMAGE_SIZE), upper, dtype=np.uint16)
    seg[IMAGE_SIZE // 2 :] = lower
    r0, r1, c0, c1 = _rect(class_index, index % _SHIFTS)
    seg[r0:r1, c0:c1] = PLANTED_LABEL[CLASS_NAMES[class_index]]
    seg[0, :] = seg[-1, :] = IGNORE_LABEL
    seg[:, 0] = seg[:, -1] = IGNORE_LABEL
    return seg


def render_image(class_index: int, index: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, class_index, index, 99])
    base = (70, 110, 180) if class_index == 0 else (90, 90, 90)
    img = np.tile(np.array(base, dtype=np.float64), (IMAGE_SIZE, IMAGE_SIZE, 1))
    r0, r1, c0, c1 = _rect(class_index, index % _SHIFTS)
    img[r0:r1, c0:c1] = (230, 200, 40) if class_index == 0 else (220, 60, 60)
    img += rng.uniform(-10, 10, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_dataset(
    root: Path,
    n_per_class: int = 60,
    models: tuple[str, ...] = MODELS,
    with_images: bool = True,
    seed: int = 0,
) -> Path:
    """Write tensors, segmentations, images, and the manifest; return its path."""
    root = Path(root)
    for sub in ("tensors", "seg", "img"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for class_index in range(len(CLASS_NAMES)):
        for index in range(n_per_class):
            entry_id = f"{CLASS_NAMES[class_index]}_{index:03d}"
            tensors = {}
            for model in models:
                acts, grads = model_tensors(model, class_index, index, seed)
                act_rel = f"tensors/{entry_id}.{model}.act.tnsr"
                grad_rel = f"tensors/{entry_id}.{model}.grad.tnsr"
                write_array(acts, root / act_rel)
                write_array(grads, root / grad_rel)
                tensors[model] = {"activation": act_rel, "gradient": grad_rel}
            seg_rel = f"seg/{entry_id}.tnsr"
            write_array(segmentation(class_index, index), root / seg_rel)
            image_rel = None
            if with_images:
                image_rel = f"img/{entry_id}.png"
                Image.fromarray(render_image(class_index, index, seed)).save(root / image_rel)
            entries.append(
                {
                    "id": entry_id,
                    "class": class_index,
                    "image": image_rel,
                    "segmentation": seg_rel,
                    "tensors": tensors,
                    "image_size": [IMAGE_SIZE, IMAGE_SIZE],
                }
            )
    manifest = {
        "classes": CLASS_NAMES,
        "models": list(models),
        "entries": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def make_empty(root: Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "manifest.json"
    path.write_text(
        json.dumps({"classes": CLASS_NAMES, "models": list(MODELS), "entries": []}),
        encoding="utf-8",
    )
    return path
