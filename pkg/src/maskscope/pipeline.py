"""Stage pipeline: masks, explanations, embedding, objstats, ar, report.

Each stage writes its artifacts under the output directory and records
a stamp file in ``.cache/`` holding the stage's config hash and its
artifact list. A rerun with an unchanged hash skips the stage, so
changing only the threshold does not recompute the embedding. A stage
that aborts leaves a ``<stage>.partial`` marker next to its stamp; the
next run distrusts the cache and recomputes.

Everything written here is deterministic for a fixed config and seed:
no timestamps, sorted JSON keys, repr() floats in CSV cells.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import embedding, gradcam, images, modelcmp, objstats, svgplot
from .embedding import NumericError, TsneParams
from .tensor_io import (
    DatasetManifest,
    ImageEntry,
    ManifestError,
    TensorFormatError,
    load_manifest,
    read_array,
    write_array,
)

logger = logging.getLogger(__name__)

STAGE_ORDER = ("masks", "explanations", "embedding", "objstats", "ar", "report")
STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "masks": (),
    "explanations": ("masks",),
    "embedding": ("masks",),
    "objstats": ("masks",),
    "ar": ("masks",),
    "report": ("masks", "explanations", "embedding", "objstats", "ar"),
}
# Families the report stage promises on disk after a full run.
FIGURE_FAMILIES = ("scatter", "thumbnail_scatter", "histograms", "galleries", "ar_tables")

GALLERY_ROWS = 8
DEFAULT_THUMBNAIL_CAP = 500


class ConfigError(Exception):
    """Bad run configuration (flags, stage set, parameter ranges)."""


class DataValidationError(Exception):
    """Input data inconsistent with the manifest's promises."""


class StageError(Exception):
    """A stage aborted; carries the stage name and offending entry id."""

    def __init__(self, stage: str, entry_id: str | None, message: str):
        where = f"stage '{stage}'"
        if entry_id is not None:
            where += f", entry '{entry_id}'"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.entry_id = entry_id


def exit_code_for(exc: BaseException) -> int:
    """Map an exception (walking its cause chain) to a process exit code."""
    seen: BaseException | None = exc
    while seen is not None:
        if isinstance(seen, ConfigError):
            return 2
        if isinstance(seen, NumericError):
            return 4
        if isinstance(seen, (ManifestError, TensorFormatError, DataValidationError)):
            return 3
        if isinstance(seen, (ValueError, OSError)):
            return 3
        seen = seen.__cause__
    return 1


def worker_count() -> int:
    """Thread pool size; MASKSCOPE_THREADS caps it."""
    raw = os.environ.get("MASKSCOPE_THREADS")
    if raw is None:
        return min(8, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MASKSCOPE_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"MASKSCOPE_THREADS must be a positive integer, got {raw!r}")
    return value


@dataclass
class RunConfig:
    manifest: Path
    out: Path
    threshold: float = 0.5
    seed: int = 0
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    min_avg_pixels: float = 100.0
    models: tuple[str, ...] | None = None  # None: every model in the manifest
    stages: tuple[str, ...] = STAGE_ORDER
    thumbnail_cap: int = DEFAULT_THUMBNAIL_CAP
    names_path: Path | None = None

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        try:
            self.tsne_params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.min_avg_pixels < 0:
            raise ConfigError(f"min-avg-pixels must be >= 0, got {self.min_avg_pixels}")
        if self.thumbnail_cap < 0:
            raise ConfigError(f"thumbnail-cap must be >= 0, got {self.thumbnail_cap}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.models is not None and len(self.models) == 0:
            raise ConfigError("model subset must name at least one model")
        for stage in self.stages:
            if stage not in STAGE_DEPS:
                raise ConfigError(f"unknown stage '{stage}'")
            for dep in STAGE_DEPS[stage]:
                if dep not in self.stages:
                    raise ConfigError(f"stage '{stage}' requires stage '{dep}'")

    def tsne_params(self) -> TsneParams:
        return TsneParams(
            perplexity=self.perplexity,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            early_exaggeration=self.early_exaggeration,
            seed=self.seed,
        )


@dataclass
class RunReport:
    out: Path
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    stage_status: dict[str, str] = field(default_factory=dict)
    durations: dict[str, float] = field(default_factory=dict)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def _sanitize(text: str) -> str:
    cleaned = _UNSAFE.sub("_", text)[:80]
    return cleaned or "x"


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class _Run:
    """One pipeline execution over a validated config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.cache = self.out / ".cache"
        self.manifest_digest = hashlib.sha256(Path(cfg.manifest).read_bytes()).hexdigest()
        self.manifest: DatasetManifest = load_manifest(cfg.manifest)
        self.models = self._select_models()
        self.model_dirs = self._model_dirnames()
        self.entry_names = [
            (entry, f"{i:05d}__{_sanitize(entry.id)}")
            for i, entry in enumerate(self.manifest.entries)
        ]
        if cfg.names_path is not None:
            self.object_names = objstats.load_object_names(cfg.names_path)
            self.names_digest = hashlib.sha256(Path(cfg.names_path).read_bytes()).hexdigest()
        else:
            self.object_names = objstats.default_object_names()
            self.names_digest = "builtin"
        self.report = RunReport(out=self.out)
        self.families: dict[str, list[str]] = {}

    def _select_models(self) -> list[str]:
        if self.cfg.models is None:
            return list(self.manifest.models)
        known = set(self.manifest.models)
        for model in self.cfg.models:
            if model not in known:
                raise ConfigError(
                    f"model '{model}' not in manifest (have: {', '.join(self.manifest.models)})"
                )
        return list(self.cfg.models)

    def _model_dirnames(self) -> dict[str, str]:
        dirs = {model: _sanitize(model) for model in self.models}
        if len(set(dirs.values())) != len(dirs):
            raise ConfigError("model ids collide after filename sanitization")
        return dirs

    # -- caching ---------------------------------------------------------

    def _stage_hash(self, stage: str) -> str:
        cfg = self.cfg
        payload: dict = {
            "v": 1,
            "stage": stage,
            "manifest": self.manifest_digest,
            "models": self.models,
        }
        if stage in ("masks", "explanations", "objstats", "report"):
            payload["threshold"] = cfg.threshold
        if stage in ("embedding", "report"):
            payload.update(
                seed=cfg.seed,
                perplexity=cfg.perplexity,
                iterations=cfg.iterations,
                learning_rate=cfg.learning_rate,
                early_exaggeration=cfg.early_exaggeration,
            )
        if stage in ("objstats", "report"):
            payload["min_avg_pixels"] = cfg.min_avg_pixels
            payload["names"] = self.names_digest
        if stage == "report":
            payload["thumbnail_cap"] = cfg.thumbnail_cap
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _merge(self, families: dict[str, list[str]]) -> None:
        for family, paths in families.items():
            self.families.setdefault(family, []).extend(paths)
            self.families[family].sort()

    def _run_stage(self, stage: str, fn: Callable[[], dict[str, list[str]]]) -> None:
        stamp = self.cache / f"{stage}.json"
        partial = self.cache / f"{stage}.partial"
        digest = self._stage_hash(stage)
        if stamp.exists() and not partial.exists():
            try:
                data = json.loads(stamp.read_text(encoding="utf-8"))
            except ValueError:
                data = None
            if (
                data is not None
                and data.get("hash") == digest
                and all(
                    (self.out / p).exists()
                    for paths in data.get("artifacts", {}).values()
                    for p in paths
                )
            ):
                logger.info("stage %s: cached", stage)
                self.report.stage_status[stage] = "cached"
                self._merge({k: list(v) for k, v in data["artifacts"].items()})
                return
        self.cache.mkdir(parents=True, exist_ok=True)
        if stamp.exists():
            stamp.unlink()
        partial.write_text("", encoding="utf-8")
        start = time.perf_counter()
        try:
            families = fn()
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(stage, None, str(exc)) from exc
        stamp.write_text(
            json.dumps({"hash": digest, "artifacts": families}, sort_keys=True, indent=1)
            + "\n",
            encoding="utf-8",
        )
        partial.unlink()
        self.report.stage_status[stage] = "ran"
        self.report.durations[stage] = time.perf_counter() - start
        logger.info("stage %s: ran in %.2fs", stage, self.report.durations[stage])
        self._merge(families)

    def _rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    # -- stages ----------------------------------------------------------

    def _mask_paths(self, model: str, name: str) -> dict[str, Path]:
        base = self.out / "masks" / self.model_dirs[model]
        return {
            "conv": base / f"{name}.conv.tnsr",
            "image": base / f"{name}.image.tnsr",
            "binary": base / f"{name}.binary.tnsr",
        }

    def _stage_masks(self) -> dict[str, list[str]]:
        tasks: list[tuple[str, ImageEntry, str]] = []
        for model in self.models:
            (self.out / "masks" / self.model_dirs[model]).mkdir(parents=True, exist_ok=True)
            for entry, name in self.entry_names:
                tasks.append((model, entry, name))

        def compute(task: tuple[str, ImageEntry, str]) -> list[str]:
            model, entry, name = task
            conv, image_mask, binary = gradcam.mask_pipeline(entry, model, self.cfg.threshold)
            if conv.degenerate:
                logger.warning(
                    "entry '%s', model '%s': constant heatmap, mask is all zeros",
                    entry.id,
                    model,
                )
            paths = self._mask_paths(model, name)
            write_array(conv.values, paths["conv"])
            write_array(image_mask.values, paths["image"])
            write_array(binary.values.astype(np.uint8), paths["binary"])
            return [self._rel(p) for p in paths.values()]

        written: list[str] = []
        workers = worker_count()
        if workers == 1 or len(tasks) <= 1:
            for task in tasks:
                try:
                    written.extend(compute(task))
                except Exception as exc:
                    raise StageError("masks", task[1].id, str(exc)) from exc
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [(task, pool.submit(compute, task)) for task in tasks]
                for task, future in futures:
                    try:
                        written.extend(future.result())
                    except Exception as exc:
                        raise StageError("masks", task[1].id, str(exc)) from exc
        return {"masks": sorted(written)}

    def _stage_explanations(self) -> dict[str, list[str]]:
        written: list[str] = []
        for model in self.models:
            out_dir = self.out / "explanations" / self.model_dirs[model]
            out_dir.mkdir(parents=True, exist_ok=True)
            for entry, name in self.entry_names:
                if entry.image is None:
                    continue
                try:
                    rgb = images.load_rgb(entry.image)
                    expected = entry.image_size
                    if rgb.shape[:2] != expected:
                        raise DataValidationError(
                            f"image is {rgb.shape[0]}x{rgb.shape[1]}, "
                            f"manifest says {expected[0]}x{expected[1]}"
                        )
                    binary = read_array(self._mask_paths(model, name)["binary"])
                    mask = gradcam.BinaryMask(
                        values=binary.astype(bool), threshold_used=self.cfg.threshold
                    )
                    explanation = gradcam.apply_explanation(rgb, mask)
                    path = out_dir / f"{name}.png"
                    images.save_png(explanation, path)
                    written.append(self._rel(path))
                except Exception as exc:
                    raise StageError("explanations", entry.id, str(exc)) from exc
        return {"explanations": sorted(written)}

    def _stage_embedding(self) -> dict[str, list[str]]:
        written: dict[str, list[str]] = {"embeddings": [], "kl_traces": []}
        out_dir = self.out / "embedding"
        out_dir.mkdir(parents=True, exist_ok=True)
        n = len(self.manifest.entries)
        for model in self.models:
            coords_path = out_dir / f"{self.model_dirs[model]}.csv"
            kl_path = out_dir / f"{self.model_dirs[model]}.kl.csv"
            if n < 2:
                if n == 1:
                    logger.warning("embedding needs at least 2 entries, have 1; skipping")
                _write_text(coords_path, "id,class,x,y\n")
                _write_text(kl_path, "iteration,kl\n")
            else:
                if self.cfg.perplexity * 3 >= n:
                    raise ConfigError(
                        f"perplexity {self.cfg.perplexity} needs more than "
                        f"{int(self.cfg.perplexity * 3)} entries, manifest has {n}; "
                        "lower --perplexity"
                    )
                ids = [entry.id for entry, _ in self.entry_names]
                masks = [
                    read_array(self._mask_paths(model, name)["conv"])
                    for _, name in self.entry_names
                ]
                desc = embedding.build_descriptors(ids, masks)
                result = embedding.embed_descriptors(desc, self.cfg.tsne_params())
                rows = [
                    [
                        entry.id,
                        self.manifest.classes[entry.class_index],
                        repr(float(result.coords[i, 0])),
                        repr(float(result.coords[i, 1])),
                    ]
                    for i, (entry, _) in enumerate(self.entry_names)
                ]
                _write_text(coords_path, _csv_text(["id", "class", "x", "y"], rows))
                kl_rows = [[str(it), repr(float(kl))] for it, kl in result.kl_trace]
                _write_text(kl_path, _csv_text(["iteration", "kl"], kl_rows))
            written["embeddings"].append(self._rel(coords_path))
            written["kl_traces"].append(self._rel(kl_path))
        return written

    def _stage_objstats(self) -> dict[str, list[str]]:
        out_dir = self.out / "objstats"
        out_dir.mkdir(parents=True, exist_ok=True)
        tables: dict[str, dict[str, objstats.ClassObjectStats]] = {}
        written: list[str] = []
        for model in self.models:
            per_class: dict[str, objstats.ClassObjectStats] = {}
            for class_index, class_name in enumerate(self.manifest.classes):
                counts = []
                for entry, name in self.entry_names:
                    if entry.class_index != class_index:
                        continue
                    try:
                        seg = self.manifest.load_segmentation(entry)
                        binary = read_array(self._mask_paths(model, name)["binary"])
                        counts.append(objstats.count_pixels(seg, binary.astype(bool)))
                    except Exception as exc:
                        raise StageError("objstats", entry.id, str(exc)) from exc
                stats = objstats.class_pixel_ratios(counts, class_name)
                objstats.select_objects(stats, self.cfg.min_avg_pixels)
                per_class[class_name] = stats
            tables[model] = per_class

            rows = []
            for class_name in self.manifest.classes:
                stats = per_class[class_name]
                for p in np.flatnonzero(stats.defined):
                    rows.append(
                        [
                            class_name,
                            str(int(p)),
                            self.object_names[p],
                            str(int(stats.sum_covered[p])),
                            str(int(stats.sum_total[p])),
                            repr(float(stats.ratio[p])),
                            "true" if stats.selected[p] else "false",
                        ]
                    )
            path = out_dir / f"{self.model_dirs[model]}.csv"
            _write_text(
                path,
                _csv_text(
                    ["class", "object_id", "object_name", "sum_M", "sum_N", "R", "selected"],
                    rows,
                ),
            )
            written.append(self._rel(path))

        hist_rows = objstats.histogram_rows(
            tables, self.object_names, self.manifest.classes, self.models
        )
        hist_path = out_dir / "histogram.csv"
        _write_text(
            hist_path,
            _csv_text(
                ["class", "object_id", "object_name", "model", "R"],
                [
                    [r.class_name, str(r.object_id), r.object_name, r.model, repr(r.ratio)]
                    for r in hist_rows
                ],
            ),
        )
        return {"objstats": sorted(written), "histograms": [self._rel(hist_path)]}

    def _stage_ar(self) -> dict[str, list[str]]:
        out_dir = self.out / "ar"
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "residuals.csv"
        md_path = out_dir / "residuals.md"
        if not self.manifest.entries:
            _write_text(csv_path, "model," + ",".join(self.models) + "\n")
            _write_text(md_path, "| Models (m1-m2) | Average residual |\n| --- | --- |\n")
        else:
            masks = {
                model: {
                    entry.id: read_array(self._mask_paths(model, name)["image"])
                    for entry, name in self.entry_names
                }
                for model in self.models
            }
            ids = [entry.id for entry, _ in self.entry_names]
            matrix = modelcmp.residual_matrix(self.models, masks, ids)
            _write_text(csv_path, modelcmp.residuals_to_csv(matrix))
            _write_text(md_path, modelcmp.residuals_to_markdown(matrix))
        return {"ar_tables": [self._rel(csv_path), self._rel(md_path)]}

    def _stage_report(self) -> dict[str, list[str]]:
        out_dir = self.out / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        families: dict[str, list[str]] = {
            "scatter": [],
            "thumbnail_scatter": [],
            "histograms": [],
            "galleries": [],
            "summary": [],
        }

        for model in self.models:
            model_dir = self.model_dirs[model]
            rows = _read_csv(self.out / "embedding" / f"{model_dir}.csv")
            coords = np.array(
                [[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64
            ).reshape(len(rows), 2)
            labels = [r["class"] for r in rows]
            svg = svgplot.render_scatter(
                coords, labels, self.manifest.classes, title=f"mask embedding: {model}"
            )
            path = out_dir / f"scatter_{model_dir}.svg"
            _write_text(path, svg)
            families["scatter"].append(self._rel(path))

            by_id = {entry.id: name for entry, name in self.entry_names}
            thumbs: list[bytes | None] = []
            for r in rows:
                png_path = (
                    self.out / "explanations" / model_dir / f"{by_id[r['id']]}.png"
                )
                if png_path.exists():
                    thumbs.append(images.thumbnail_png(png_path.read_bytes(), 32))
                else:
                    thumbs.append(None)
            svg = svgplot.render_thumbnail_scatter(
                coords,
                thumbs,
                cap=self.cfg.thumbnail_cap,
                seed=self.cfg.seed,
                title=f"visual explanations: {model}",
            )
            path = out_dir / f"thumbnails_{model_dir}.svg"
            _write_text(path, svg)
            families["thumbnail_scatter"].append(self._rel(path))

        hist_rows = _read_csv(self.out / "objstats" / "histogram.csv")
        for class_index, class_name in enumerate(self.manifest.classes):
            mine = [r for r in hist_rows if r["class"] == class_name]
            objects: list[tuple[int, str]] = []
            ratios: dict[tuple[int, str], float] = {}
            for r in mine:
                key = (int(r["object_id"]), r["object_name"])
                if key not in objects:
                    objects.append(key)
                ratios[(int(r["object_id"]), r["model"])] = float(r["R"])
            svg = svgplot.render_histogram(class_name, objects, self.models, ratios)
            path = out_dir / f"histogram_{class_index:02d}_{_sanitize(class_name)}.svg"
            _write_text(path, svg)
            families["histograms"].append(self._rel(path))

        gallery_rows = []
        for entry, name in self.entry_names[:GALLERY_ROWS]:
            cells = []
            for model in self.models:
                values = read_array(self._mask_paths(model, name)["image"])
                png = images.encode_png(images.mask_to_gray(values))
                cells.append(images.thumbnail_png(png, 96))
            gallery_rows.append((entry.id, cells))
        path = out_dir / "gallery.svg"
        _write_text(path, svgplot.render_gallery(gallery_rows, self.models))
        families["galleries"].append(self._rel(path))

        merged = dict(self.families)
        for family, paths in families.items():
            merged.setdefault(family, [])
            merged[family] = sorted(set(merged[family]) | set(paths))
        cfg = self.cfg
        summary = {
            "config": {
                "threshold": cfg.threshold,
                "seed": cfg.seed,
                "perplexity": cfg.perplexity,
                "iterations": cfg.iterations,
                "learning_rate": cfg.learning_rate,
                "early_exaggeration": cfg.early_exaggeration,
                "min_avg_pixels": cfg.min_avg_pixels,
                "thumbnail_cap": cfg.thumbnail_cap,
                "models": self.models,
                "manifest_digest": self.manifest_digest,
                "object_names": self.names_digest,
            },
            "counts": {
                "entries": len(self.manifest.entries),
                "classes": len(self.manifest.classes),
                "models": len(self.models),
            },
            "families": {name: merged.get(name, []) for name in FIGURE_FAMILIES},
        }
        summary_path = out_dir / "summary.json"
        _write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        families["summary"].append(self._rel(summary_path))
        return families

    # -- driver ----------------------------------------------------------

    def execute(self) -> RunReport:
        fns = {
            "masks": self._stage_masks,
            "explanations": self._stage_explanations,
            "embedding": self._stage_embedding,
            "objstats": self._stage_objstats,
            "ar": self._stage_ar,
            "report": self._stage_report,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in STAGE_ORDER:
            if stage in self.cfg.stages:
                self._run_stage(stage, fns[stage])
        self.report.artifacts = {k: sorted(v) for k, v in self.families.items()}
        return self.report


def run(cfg: RunConfig) -> RunReport:
    """Execute the configured stages; see module docstring for caching."""
    cfg.validate()
    return _Run(cfg).execute()
