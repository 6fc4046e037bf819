"""Run classifiers and a segmentation model over an image tree and export.

The image folder holds one subfolder per class, so every image belongs
to exactly one class. Per image and classifier, the named conv layer's
activations and the gradient from the chosen class logit are written as
f32 TNSR files; the segmentation model contributes one u16 label map
per image. A manifest plus a names file make the folder a complete,
self-describing dataset for the analysis package.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .capture import capture, resolve_layer
from .names import NUM_OBJECTS, names_file_text
from .tnsr import write_array

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
INPUT_SIDE = 224


@dataclass
class ModelSpec:
    """One classifier: id, checkpoint path, and the conv layer to tap."""

    name: str
    checkpoint: Path
    layer: str


@dataclass
class ExportJob:
    images: Path
    models: list[ModelSpec]
    segmentation: Path
    out: Path
    device: str = "cpu"
    batch_size: int = 8
    gradient_from: str = "predicted"  # or "label": backprop the folder class instead

    def validate(self) -> None:
        if not self.models:
            raise ValueError("at least one classifier model is required")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        if self.gradient_from not in ("predicted", "label"):
            raise ValueError("gradient_from must be 'predicted' or 'label'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Discovered:
    classes: list[str]
    # per image: (class index, class name, source path, entry id)
    items: list[tuple[int, str, Path, str]] = field(default_factory=list)


def discover_images(images_dir: Path) -> Discovered:
    """Class subfolders, each image filed under exactly one class."""
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise FileNotFoundError(f"image folder {images_dir} does not exist")
    classes = sorted(d.name for d in images_dir.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{images_dir} has no class subfolders")
    found = Discovered(classes=classes)
    seen = set()
    for index, class_name in enumerate(classes):
        folder = images_dir / class_name
        for path in sorted(folder.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            entry_id = f"{class_name}/{path.stem}"
            if entry_id in seen:
                raise ValueError(f"duplicate image id '{entry_id}'")
            seen.add(entry_id)
            found.items.append((index, class_name, path, entry_id))
    if not found.items:
        raise ValueError(f"{images_dir} contains no images")
    return found


def load_model(path: Path, device: str) -> torch.nn.Module:
    model = torch.load(path, map_location=device, weights_only=False)
    if not isinstance(model, torch.nn.Module):
        raise TypeError(f"{path} did not unpickle to a torch module")
    model.eval()
    return model


def load_image_batch(paths: list[Path], device: str) -> torch.Tensor:
    """Decode, resize to the fixed input square, scale to [0, 1] floats."""
    arrays = []
    for path in paths:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((INPUT_SIDE, INPUT_SIDE), Image.BILINEAR)
            arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    stacked = np.stack(arrays).transpose(0, 3, 1, 2)  # [B, 3, H, W]
    return torch.from_numpy(stacked).to(device)


def save_resized_image(source: Path, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    with Image.open(source) as img:
        img.convert("RGB").resize((INPUT_SIDE, INPUT_SIDE), Image.BILINEAR).save(dest, format="PNG")


def segment_batch(model: torch.nn.Module, batch: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax labels at image resolution, u16 [B, H, W]."""
    with torch.no_grad():
        logits = model(batch)
    if logits.ndim != 4:
        raise ValueError(f"segmentation model must produce [B, C, H, W], got {tuple(logits.shape)}")
    if logits.shape[1] != NUM_OBJECTS:
        raise ValueError(
            f"segmentation model emits {logits.shape[1]} classes, expected {NUM_OBJECTS}"
        )
    if logits.shape[2:] != batch.shape[2:]:
        logits = torch.nn.functional.interpolate(
            logits, size=batch.shape[2:], mode="bilinear", align_corners=False
        )
    labels = logits.argmax(dim=1).to(torch.int64).cpu().numpy()
    return labels.astype(np.uint16)


def run_export(job: ExportJob) -> Path:
    """Execute the job; returns the manifest path.

    Images whose captured tensors or logits come out non-finite are
    logged and skipped entirely so the exported folder always validates.
    """
    job.validate()
    device = job.device
    found = discover_images(Path(job.images))
    classifiers = {}
    for spec in job.models:
        model = load_model(Path(spec.checkpoint), device)
        resolve_layer(model, spec.layer)  # fail before any file is written
        classifiers[spec.name] = (model, spec.layer)
    seg_model = load_model(Path(job.segmentation), device)

    out = Path(job.out)
    out.mkdir(parents=True, exist_ok=True)
    model_names = [spec.name for spec in job.models]
    entries = []
    for start in range(0, len(found.items), job.batch_size):
        chunk = found.items[start : start + job.batch_size]
        batch = load_image_batch([item[2] for item in chunk], device)
        labels = torch.tensor([item[0] for item in chunk]) if job.gradient_from == "label" else None

        per_model = {}
        bad = [False] * len(chunk)
        for name in model_names:
            model, layer = classifiers[name]
            acts, grads, logits = capture(model, layer, batch, targets=labels)
            acts = acts.cpu().numpy().astype(np.float32)
            grads = grads.cpu().numpy().astype(np.float32)
            finite_logits = torch.isfinite(logits).all(dim=1).cpu().numpy()
            for i, (_, _, path, entry_id) in enumerate(chunk):
                ok = (
                    bool(finite_logits[i])
                    and np.isfinite(acts[i]).all()
                    and np.isfinite(grads[i]).all()
                )
                if not ok:
                    bad[i] = True
                    logger.warning(
                        "skipping '%s': non-finite values under model '%s'", entry_id, name
                    )
            per_model[name] = (acts, grads)

        seg_labels = segment_batch(seg_model, batch)
        for i, (class_index, class_name, path, entry_id) in enumerate(chunk):
            if bad[i]:
                continue
            stem = path.stem
            image_rel = f"images/{class_name}/{stem}.png"
            seg_rel = f"segmentation/{class_name}/{stem}.tnsr"
            save_resized_image(path, out / image_rel)
            write_array(seg_labels[i], out / seg_rel)
            tensors = {}
            for name in model_names:
                acts, grads = per_model[name]
                act_rel = f"tensors/{name}/{class_name}/{stem}.activation.tnsr"
                grad_rel = f"tensors/{name}/{class_name}/{stem}.gradient.tnsr"
                write_array(acts[i], out / act_rel)
                write_array(grads[i], out / grad_rel)
                tensors[name] = {"activation": act_rel, "gradient": grad_rel}
            entries.append(
                {
                    "id": entry_id,
                    "class": class_index,
                    "image": image_rel,
                    "image_size": [INPUT_SIDE, INPUT_SIDE],
                    "segmentation": seg_rel,
                    "tensors": tensors,
                }
            )

    (out / "names.txt").write_text(names_file_text(), encoding="utf-8")
    manifest = {"classes": found.classes, "models": model_names, "entries": entries}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("exported %d of %d images to %s", len(entries), len(found.items), out)
    return manifest_path
