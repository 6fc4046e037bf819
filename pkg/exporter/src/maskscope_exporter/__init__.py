"""Export activations, gradients, and segmentation maps for mask analysis."""

from .capture import LayerNotFound, capture, resolve_layer
from .export import ExportJob, ModelSpec, discover_images, run_export, segment_batch
from .names import NUM_OBJECTS, SCENE_OBJECT_NAMES, names_file_text
from .tnsr import write_array

__version__ = "0.1.0"

__all__ = [
    "ExportJob",
    "LayerNotFound",
    "ModelSpec",
    "NUM_OBJECTS",
    "SCENE_OBJECT_NAMES",
    "capture",
    "discover_images",
    "names_file_text",
    "resolve_layer",
    "run_export",
    "segment_batch",
    "write_array",
]
