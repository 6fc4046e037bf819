"""TNSR tensor container files and the JSON dataset manifest.

Every array exchanged with the outside world travels as a TNSR file.
The layout, all integers little-endian regardless of host:

    bytes 0..3    magic ``TNSR``
    bytes 4..5    format version, u16 (currently 1)
    byte  6       dtype code, u8: 1=f32, 2=u8, 3=u16, 4=i32
    byte  7       ndim, u8 (1..4)
    next 4*ndim   shape entries, u32, each >= 1
    rest          row-major element payload

Writing is byte-for-byte deterministic. Reading validates everything and
either yields a usable record or raises a typed error carrying the byte
offset of the problem; no partially-decoded record ever escapes.

The manifest is a UTF-8 JSON index of images: class labels, optional RGB
image path, one segmentation label map, and one activation plus one
gradient tensor per model. All paths are relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
MAX_NDIM = 4

# Segmentation label maps are u16 with a reserved "unlabeled" value that is
# excluded from every pixel statistic downstream.
IGNORE_LABEL = 0xFFFF

_DTYPE_CODES = {"f32": 1, "u8": 2, "u16": 3, "i32": 4}
_CODE_DTYPES = {code: name for name, code in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
    "i32": np.dtype("<i4"),
}
_KIND_TO_NAME = {
    np.dtype(np.float32): "f32",
    np.dtype(np.uint8): "u8",
    np.dtype(np.uint16): "u16",
    np.dtype(np.int32): "i32",
}


class TensorFormatError(Exception):
    """Base for TNSR decode/encode failures; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(TensorFormatError):
    pass


class UnsupportedVersion(TensorFormatError):
    pass


class BadDtype(TensorFormatError):
    pass


class BadShape(TensorFormatError):
    pass


class ShapeOverflow(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class NonFiniteValue(TensorFormatError):
    pass


class ManifestError(Exception):
    """Manifest schema violation, missing file, or shape disagreement."""


@dataclass
class TensorRecord:
    """An n-dimensional array restricted to the four wire dtypes.

    ``values`` is kept C-contiguous in the little-endian dtype so the
    payload written to disk is exactly ``values.tobytes()``.
    """

    values: np.ndarray

    @property
    def dtype_name(self) -> str:
        return _KIND_TO_NAME[np.dtype(self.values.dtype.newbyteorder("="))]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @staticmethod
    def from_array(array: np.ndarray) -> "TensorRecord":
        arr = np.asarray(array)
        if not 1 <= arr.ndim <= MAX_NDIM:
            # checked before ascontiguousarray, which would promote rank 0
            raise ValueError(f"tensor rank must be 1..{MAX_NDIM}, got {arr.ndim}")
        name = _KIND_TO_NAME.get(np.dtype(arr.dtype.newbyteorder("=")))
        if name is None:
            raise ValueError(f"unsupported tensor dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[name])
        record = TensorRecord(arr)
        record.validate()
        return record

    def validate(self) -> None:
        arr = self.values
        if not 1 <= arr.ndim <= MAX_NDIM:
            raise ValueError(f"tensor rank must be 1..{MAX_NDIM}, got {arr.ndim}")
        if any(dim < 1 for dim in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        if self.dtype_name == "f32" and not np.isfinite(arr).all():
            raise ValueError("f32 tensor contains non-finite values")


def write_tensor(record: TensorRecord, sink: BinaryIO) -> int:
    """Serialize ``record``; returns the number of bytes written."""
    record.validate()
    arr = np.ascontiguousarray(record.values, dtype=_NUMPY_DTYPES[record.dtype_name])
    header = struct.pack(
        "<4sHBB", MAGIC, VERSION, _DTYPE_CODES[record.dtype_name], arr.ndim
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def _read_exact(source: BinaryIO, count: int, offset: int) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise TruncatedPayload(
            f"expected {count} bytes, got {len(data)}", offset + len(data)
        )
    return data


def read_tensor(source: BinaryIO) -> TensorRecord:
    """Decode one record from ``source``; exact inverse of write_tensor.

    Consumes exactly one record's bytes and leaves the stream position
    after its payload.
    """
    magic = source.read(4)
    if len(magic) < 4 or magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}", 0)
    (version,) = struct.unpack("<H", _read_exact(source, 2, 4))
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} not supported", 4)
    (dtype_code,) = struct.unpack("<B", _read_exact(source, 1, 6))
    dtype_name = _CODE_DTYPES.get(dtype_code)
    if dtype_name is None:
        raise BadDtype(f"unknown dtype code {dtype_code}", 6)
    (ndim,) = struct.unpack("<B", _read_exact(source, 1, 7))
    if not 1 <= ndim <= MAX_NDIM:
        raise BadShape(f"ndim must be 1..{MAX_NDIM}, got {ndim}", 7)
    shape_bytes = _read_exact(source, 4 * ndim, 8)
    shape = struct.unpack(f"<{ndim}I", shape_bytes)
    header_size = 8 + 4 * ndim
    element_count = 1
    for axis, dim in enumerate(shape):
        if dim < 1:
            raise BadShape(f"dimension {axis} is zero", 8 + 4 * axis)
        element_count *= dim
    if element_count > 2**64 - 1:
        raise ShapeOverflow(f"element count {element_count} overflows 64 bits", 8)
    dtype = _NUMPY_DTYPES[dtype_name]
    payload_size = element_count * dtype.itemsize
    payload = source.read(payload_size)
    if len(payload) != payload_size:
        raise TruncatedPayload(
            f"payload needs {payload_size} bytes, got {len(payload)}",
            header_size + len(payload),
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if dtype_name == "f32":
        finite = np.isfinite(values.ravel())
        if not finite.all():
            index = int(np.argmin(finite))
            raise NonFiniteValue(
                f"non-finite f32 element at flat index {index}",
                header_size + 4 * index,
            )
    return TensorRecord(values)


def write_tensor_path(record: TensorRecord, path: Path | str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as sink:
        return write_tensor(record, sink)


def read_tensor_path(path: Path | str) -> TensorRecord:
    with open(path, "rb") as source:
        return read_tensor(source)


def write_array(array: np.ndarray, path: Path | str) -> int:
    return write_tensor_path(TensorRecord.from_array(array), path)


def read_array(path: Path | str) -> np.ndarray:
    return read_tensor_path(path).values


@dataclass
class ImageEntry:
    """One image: class label, per-model tensor paths, segmentation path."""

    id: str
    class_index: int
    image: Path | None
    segmentation: Path
    tensors: dict[str, dict[str, Path]]
    image_size: tuple[int, int]


@dataclass
class DatasetManifest:
    """Validated dataset index; immutable once loaded, safe to share."""

    classes: list[str]
    models: list[str]
    entries: list[ImageEntry]
    root: Path
    conv_shapes: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def class_counts(self) -> dict[int, int]:
        counts = {index: 0 for index in range(len(self.classes))}
        for entry in self.entries:
            counts[entry.class_index] += 1
        return counts

    def entries_of_class(self, class_index: int) -> Iterator[ImageEntry]:
        return (e for e in self.entries if e.class_index == class_index)

    def load_activation(self, entry: ImageEntry, model: str) -> np.ndarray:
        return read_array(entry.tensors[model]["activation"])

    def load_gradient(self, entry: ImageEntry, model: str) -> np.ndarray:
        return read_array(entry.tensors[model]["gradient"])

    def load_segmentation(self, entry: ImageEntry) -> np.ndarray:
        return read_array(entry.segmentation)


def _fail(field_name: str, problem: str) -> None:
    raise ManifestError(f"{field_name}: {problem}")


def _string_list(value, field_name: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        _fail(field_name, "expected a list of strings")
    if len(set(value)) != len(value):
        _fail(field_name, "names must be unique")
    return list(value)


def _check_tensor_file(path: Path, field_name: str) -> TensorRecord:
    if not path.is_file():
        _fail(field_name, f"missing file {path}")
    try:
        return read_tensor_path(path)
    except TensorFormatError as exc:
        raise ManifestError(f"{field_name}: {path} failed to parse: {exc}") from exc


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load and fully validate a manifest.

    Every referenced tensor file is read and checked here: activation and
    gradient pairs must be f32 ``[K, H, W]`` with one shared shape per
    model across all entries, and each segmentation map must be a u16
    ``[H0, W0]`` matching the entry's declared image size. Nothing is
    mutated on disk.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest: missing file {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        _fail("manifest", "top level must be a JSON object")
    for key in ("classes", "models", "entries"):
        if key not in raw:
            _fail(key, "required field is missing")

    root = path.parent
    classes = _string_list(raw["classes"], "classes")
    models = _string_list(raw["models"], "models")
    if not isinstance(raw["entries"], list):
        _fail("entries", "expected a list")

    entries: list[ImageEntry] = []
    seen_ids: set[str] = set()
    conv_shapes: dict[str, tuple[int, int, int]] = {}
    for index, item in enumerate(raw["entries"]):
        where = f"entries[{index}]"
        if not isinstance(item, dict):
            _fail(where, "expected an object")
        entry_id = item.get("id")
        if not isinstance(entry_id, str) or not entry_id:
            _fail(f"{where}.id", "expected a non-empty string")
        if entry_id in seen_ids:
            _fail(f"{where}.id", f"duplicate id '{entry_id}'")
        seen_ids.add(entry_id)

        class_index = item.get("class")
        if not isinstance(class_index, int) or isinstance(class_index, bool):
            _fail(f"{where}.class", "expected an integer class index")
        if not 0 <= class_index < len(classes):
            _fail(
                f"{where}.class",
                f"index {class_index} out of range for {len(classes)} classes",
            )

        image_raw = item.get("image")
        if image_raw is not None and not isinstance(image_raw, str):
            _fail(f"{where}.image", "expected a path string or null")
        image = (root / image_raw).resolve() if image_raw else None
        if image is not None and not image.is_file():
            _fail(f"{where}.image", f"missing file {image}")

        size_raw = item.get("image_size")
        if (
            not isinstance(size_raw, list)
            or len(size_raw) != 2
            or not all(isinstance(v, int) and v >= 1 for v in size_raw)
        ):
            _fail(f"{where}.image_size", "expected [H, W] of positive integers")
        image_size = (size_raw[0], size_raw[1])

        seg_raw = item.get("segmentation")
        if not isinstance(seg_raw, str):
            _fail(f"{where}.segmentation", "expected a path string")
        segmentation = (root / seg_raw).resolve()
        seg_record = _check_tensor_file(segmentation, f"{where}.segmentation")
        if seg_record.dtype_name != "u16" or seg_record.values.ndim != 2:
            _fail(f"{where}.segmentation", "expected a 2-D u16 label map")
        if seg_record.shape != image_size:
            _fail(
                f"{where}.segmentation",
                f"shape {seg_record.shape} does not match image_size {image_size}",
            )

        tensors_raw = item.get("tensors")
        if not isinstance(tensors_raw, dict):
            _fail(f"{where}.tensors", "expected an object keyed by model")
        unknown = set(tensors_raw) - set(models)
        if unknown:
            _fail(f"{where}.tensors", f"unknown model '{sorted(unknown)[0]}'")
        tensors: dict[str, dict[str, Path]] = {}
        for model in models:
            pair = tensors_raw.get(model)
            if not isinstance(pair, dict) or set(pair) != {"activation", "gradient"}:
                _fail(
                    f"{where}.tensors.{model}",
                    "expected {'activation': path, 'gradient': path}",
                )
            paths = {
                kind: (root / pair[kind]).resolve() for kind in ("activation", "gradient")
            }
            act = _check_tensor_file(paths["activation"], f"{where}.tensors.{model}.activation")
            grad = _check_tensor_file(paths["gradient"], f"{where}.tensors.{model}.gradient")
            for kind, record in (("activation", act), ("gradient", grad)):
                if record.dtype_name != "f32" or record.values.ndim != 3:
                    _fail(
                        f"{where}.tensors.{model}.{kind}",
                        "expected a 3-D f32 tensor [K, H, W]",
                    )
            if act.shape != grad.shape:
                raise ManifestError(
                    f"entry '{entry_id}' model '{model}': activation shape "
                    f"{act.shape} does not match gradient shape {grad.shape}"
                )
            known = conv_shapes.setdefault(model, act.shape)
            if act.shape != known:
                raise ManifestError(
                    f"entry '{entry_id}' model '{model}': tensor shape {act.shape} "
                    f"disagrees with the model's established shape {known}"
                )
            tensors[model] = paths

        entries.append(
            ImageEntry(
                id=entry_id,
                class_index=class_index,
                image=image,
                segmentation=segmentation,
                tensors=tensors,
                image_size=image_size,
            )
        )

    return DatasetManifest(
        classes=classes, models=models, entries=entries, root=root, conv_shapes=conv_shapes
    )
