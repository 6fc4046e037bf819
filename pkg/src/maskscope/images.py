"""Small Pillow-backed helpers for 8-bit RGB images and mask thumbnails."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image


def load_rgb(path: Path | str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def encode_png(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="PNG")
    return buffer.getvalue()


def save_png(array: np.ndarray, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(array))


def mask_to_gray(values: np.ndarray) -> np.ndarray:
    """Render a [0, 1] mask as an 8-bit grayscale image."""
    return np.clip(np.asarray(values, dtype=np.float64) * 255.0, 0, 255).round().astype(np.uint8)


def thumbnail_png(png_bytes: bytes, max_side: int = 32) -> bytes:
    with Image.open(io.BytesIO(png_bytes)) as img:
        img = img.convert("RGB")
        scale = max_side / max(img.size)
        if scale < 1.0:
            width = max(1, round(img.size[0] * scale))
            height = max(1, round(img.size[1] * scale))
            img = img.resize((width, height), Image.BILINEAR)
        buffer = io.BytesIO()
        img.save(buffer, format="PNG")
        return buffer.getvalue()


def png_data_uri(png_bytes: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes).decode("ascii")
