"""Saliency-weighted bag-of-local-convolutional-features instance search."""

from .bow import DenseDescriptor, QueryRegion, SparseBow, encode, encode_query, sum_pool
from .descriptors import PcaModel, fit_pca, postprocess, postprocess_map
from .errors import (
    ConfigMismatchError,
    ImageDecodeError,
    PipelineError,
    TensorFormatError,
    ValidationError,
)
from .evalkit import EvalReport, QueryGroundTruth, average_precision, evaluate, parse_groundtruth
from .index import InvertedIndex, build_index, expand_query, query
from .tensorio import ImageMeta, load_manifest, read_saliency_image, read_tensor, write_manifest, write_tensor
from .vocab import Vocabulary, assign_map, train_vocabulary, upsample_query
from .weighting import (
    WeightContext,
    WeightingScheme,
    bms_saliency,
    downsample_saliency,
    gaussian_weights,
    l2norm_weights,
    make_weights,
    uniform_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigMismatchError",
    "DenseDescriptor",
    "EvalReport",
    "ImageDecodeError",
    "ImageMeta",
    "InvertedIndex",
    "PcaModel",
    "PipelineError",
    "QueryGroundTruth",
    "QueryRegion",
    "SparseBow",
    "TensorFormatError",
    "ValidationError",
    "Vocabulary",
    "WeightContext",
    "WeightingScheme",
    "assign_map",
    "average_precision",
    "bms_saliency",
    "build_index",
    "downsample_saliency",
    "encode",
    "encode_query",
    "evaluate",
    "expand_query",
    "fit_pca",
    "gaussian_weights",
    "l2norm_weights",
    "load_manifest",
    "make_weights",
    "parse_groundtruth",
    "postprocess",
    "postprocess_map",
    "query",
    "read_saliency_image",
    "read_tensor",
    "sum_pool",
    "train_vocabulary",
    "uniform_weights",
    "upsample_query",
    "write_manifest",
    "write_tensor",
]
