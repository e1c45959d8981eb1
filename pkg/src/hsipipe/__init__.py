"""Spatial-spectral land-cover classification for hyperspectral rasters.

Pixel-wise classification (per-class Gaussians or a small CNN) is refined by
a marker-controlled watershed segmentation: each pixel takes the majority
label of its watershed region.  See the README for the file formats, the CLI,
and the evaluation protocol.
"""

from .cnn import CnnModel, CnnSpec, TrainConfig, classify_cnn, train_cnn
from .errors import DataError, FormatError, NumericError, PipelineError
from .metrics import EvalReport, SplitIndices, compare, evaluate, split
from .formats import (
    GroundTruth,
    HyperCube,
    LabelMap,
    Palette,
    read_cube,
    read_labels,
    write_cube,
    write_label_map_png,
    write_labels,
)
from .fusion import FusionReport, majority_vote_fuse
from .gml import GmlModel, classify_gml, fit_gml, log_posterior
from .pipeline import PipelineConfig, run_pipeline
from .preprocess import (
    LabeledPixelSet,
    PatchSet,
    PcaModel,
    ScalerParams,
    apply_pca,
    apply_standardizer,
    extract_patches,
    fit_pca,
    fit_standardizer,
    oversample,
)
from .watershed import (
    SegmentationMap,
    distance_transform,
    find_markers,
    foreground_mask,
    watershed_flood,
)

__version__ = "0.1.0"
