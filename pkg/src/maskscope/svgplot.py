"""Hand-built SVG figures: class scatter, thumbnail scatter, grouped bars.

SVG output keeps the figures structurally testable; every chart is a
plain string with deterministic number formatting, no plotting library
involved. Bars and markers carry class attributes so tests and tooling
can find them.
"""

from __future__ import annotations

import colorsys
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .images import png_data_uri

SCATTER_SIZE = 640
MARGIN = 48
HIST_WIDTH = 720
HIST_HEIGHT = 420
HIST_PLOT_HEIGHT = 320


def class_colors(n: int) -> list[str]:
    """n visually distinct hex colors, deterministic in n."""
    colors = []
    for i in range(n):
        r, g, b = colorsys.hls_to_rgb((i / max(n, 1)) % 1.0, 0.45, 0.80)
        colors.append(f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}")
    return colors


def _svg_open(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]


def _scatter_positions(coords: np.ndarray, size: int, margin: int) -> np.ndarray:
    # Linear map of both axes into the plot square; y flipped so larger
    # values plot upward.
    coords = np.asarray(coords, dtype=np.float64)
    if coords.size == 0:
        return np.zeros((0, 2))
    low = coords.min(axis=0)
    high = coords.max(axis=0)
    span = np.where(high > low, high - low, 1.0)
    unit = (coords - low) / span
    x = margin + unit[:, 0] * (size - 2 * margin)
    y = size - margin - unit[:, 1] * (size - 2 * margin)
    return np.stack([x, y], axis=1)


def render_scatter(
    coords: np.ndarray,
    labels: Sequence[str],
    class_names: Sequence[str],
    title: str = "mask embedding",
) -> str:
    """One circle per point, colored by class, with a legend."""
    positions = _scatter_positions(coords, SCATTER_SIZE, MARGIN)
    palette = dict(zip(class_names, class_colors(len(class_names))))
    parts = _svg_open(SCATTER_SIZE, SCATTER_SIZE, title)
    parts.append('<g class="points">')
    for (x, y), label in zip(positions, labels):
        parts.append(
            f'<circle class="marker" data-class={quoteattr(label)} cx="{x:.2f}" '
            f'cy="{y:.2f}" r="4" fill="{palette[label]}" fill-opacity="0.8"/>'
        )
    parts.append("</g>")
    parts.append('<g class="legend">')
    for i, name in enumerate(class_names):
        y = MARGIN + 18 * i
        parts.append(
            f'<rect class="legend-swatch" data-class={quoteattr(name)} '
            f'x="{SCATTER_SIZE - 150}" y="{y - 9}" width="12" height="12" '
            f'fill="{palette[name]}"/>'
        )
        parts.append(
            f'<text x="{SCATTER_SIZE - 132}" y="{y + 2}" font-size="12" '
            f'font-family="sans-serif">{escape(name)}</text>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_thumbnail_scatter(
    coords: np.ndarray,
    thumbnails: Sequence[bytes | None],
    cap: int = 500,
    seed: int = 0,
    title: str = "visual explanations",
    thumb_size: int = 28,
) -> str:
    """Scatter with explanation thumbnails in place of markers.

    At most ``cap`` thumbnails are drawn; when more are available, a
    seeded random subset of exactly ``cap`` is chosen, reproducibly.
    """
    positions = _scatter_positions(coords, SCATTER_SIZE, MARGIN)
    available = [i for i, thumb in enumerate(thumbnails) if thumb is not None]
    if cap >= 0 and len(available) > cap:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(available), size=cap, replace=False)
        available = sorted(available[int(k)] for k in chosen)
    parts = _svg_open(SCATTER_SIZE, SCATTER_SIZE, title)
    parts.append('<g class="thumbnails">')
    half = thumb_size / 2
    for i in available:
        x, y = positions[i]
        uri = png_data_uri(thumbnails[i])
        parts.append(
            f'<image class="thumb" x="{x - half:.2f}" y="{y - half:.2f}" '
            f'width="{thumb_size}" height="{thumb_size}" href="{uri}"/>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_histogram(
    class_name: str,
    objects: Sequence[tuple[int, str]],
    models: Sequence[str],
    ratios: Mapping[tuple[int, str], float],
) -> str:
    """Grouped bars, one group per object and one bar per model; y in [0, 1].

    With no objects the axes render empty. Bar heights are proportional
    to the ratio within the fixed plot height.
    """
    left, top = 60, 48
    plot_h = HIST_PLOT_HEIGHT
    plot_w = HIST_WIDTH - left - 40
    base_y = top + plot_h
    parts = _svg_open(HIST_WIDTH, HIST_HEIGHT, f"pixel ratios: {class_name}")
    parts.append(
        f'<text x="{left}" y="24" font-size="14" font-family="sans-serif">'
        f"{escape(class_name)}</text>"
    )
    # axes and y ticks
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{base_y}" stroke="#333"/>'
    )
    parts.append(
        f'<line x1="{left}" y1="{base_y}" x2="{left + plot_w}" y2="{base_y}" stroke="#333"/>'
    )
    for tick in range(0, 11, 2):
        value = tick / 10
        y = base_y - value * plot_h
        parts.append(
            f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#333"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" font-size="10" text-anchor="end" '
            f'font-family="sans-serif">{value:.1f}</text>'
        )

    palette = dict(zip(models, class_colors(len(models))))
    if objects:
        group_w = plot_w / len(objects)
        bar_w = min(24.0, group_w * 0.8 / max(len(models), 1))
        parts.append('<g class="bars">')
        for g, (object_id, object_name) in enumerate(objects):
            group_x = left + g * group_w
            offset = (group_w - bar_w * len(models)) / 2
            for m, model in enumerate(models):
                ratio = ratios.get((object_id, model))
                if ratio is None or not np.isfinite(ratio):
                    continue
                height = ratio * plot_h
                x = group_x + offset + m * bar_w
                parts.append(
                    f'<rect class="bar" data-object={quoteattr(object_name)} '
                    f'data-model={quoteattr(model)} data-ratio="{ratio:.6f}" '
                    f'x="{x:.2f}" y="{base_y - height:.2f}" width="{bar_w:.2f}" '
                    f'height="{height:.2f}" fill="{palette[model]}"/>'
                )
            parts.append(
                f'<text x="{group_x + group_w / 2:.2f}" y="{base_y + 16}" font-size="10" '
                f'text-anchor="middle" font-family="sans-serif">{escape(object_name)}</text>'
            )
        parts.append("</g>")
    parts.append('<g class="legend">')
    for m, model in enumerate(models):
        y = top + 16 * m
        parts.append(
            f'<rect x="{HIST_WIDTH - 160}" y="{y - 9}" width="12" height="12" '
            f'fill="{palette[model]}"/>'
        )
        parts.append(
            f'<text x="{HIST_WIDTH - 142}" y="{y + 2}" font-size="11" '
            f'font-family="sans-serif">{escape(model)}</text>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_gallery(
    rows: Sequence[tuple[str, Sequence[bytes]]],
    models: Sequence[str],
    cell: int = 96,
) -> str:
    """Grid of mask thumbnails: one row per image, one column per model."""
    pad, label_w, header_h = 8, 150, 28
    width = label_w + len(models) * (cell + pad) + pad
    height = header_h + len(rows) * (cell + pad) + pad
    parts = _svg_open(width, height, "weighted masks by model")
    for m, model in enumerate(models):
        x = label_w + m * (cell + pad) + cell / 2
        parts.append(
            f'<text x="{x:.2f}" y="18" font-size="12" text-anchor="middle" '
            f'font-family="sans-serif">{escape(model)}</text>'
        )
    for r, (entry_id, cells) in enumerate(rows):
        y = header_h + r * (cell + pad)
        parts.append(
            f'<text x="{label_w - 8}" y="{y + cell / 2:.2f}" font-size="10" '
            f'text-anchor="end" font-family="sans-serif">{escape(entry_id)}</text>'
        )
        for m, png in enumerate(cells):
            x = label_w + m * (cell + pad)
            parts.append(
                f'<image class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'href="{png_data_uri(png)}"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
