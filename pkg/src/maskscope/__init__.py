"""Weighted-mask interpretability toolkit.

Takes exported conv activations, gradients, and segmentation maps and
produces weighted masks, visual explanations, 2-D mask embeddings,
per-object coverage statistics, and cross-model residual tables.
"""

from .embedding import (
    DescriptorMatrix,
    EmbeddingResult,
    NumericError,
    TsneParams,
    calibrate_perplexity,
    embed_descriptors,
    embed_masks,
    pca_reduce,
    tsne_embed,
)
from .gradcam import (
    BinaryMask,
    NormalizedMask,
    apply_explanation,
    channel_weights,
    compute_heatmap,
    mask_pipeline,
    normalize_mask,
    threshold_mask,
    upsample_bilinear,
)
from .modelcmp import ResidualMatrix, average_residual, residual_matrix
from .objstats import (
    ClassObjectStats,
    class_pixel_ratios,
    count_pixels,
    histogram_rows,
    select_objects,
)
from .pipeline import (
    ConfigError,
    DataValidationError,
    RunConfig,
    RunReport,
    StageError,
    run,
)
from .tensor_io import (
    IGNORE_LABEL,
    DatasetManifest,
    ImageEntry,
    ManifestError,
    TensorFormatError,
    TensorRecord,
    load_manifest,
    read_array,
    read_tensor,
    write_array,
    write_tensor,
)

__version__ = "0.1.0"
