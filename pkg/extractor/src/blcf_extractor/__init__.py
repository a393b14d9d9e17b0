"""Offline VGG16 feature extraction for the sparse instance-search engine."""

from .extract import ExtractionSpec, build_backbone, extract, extract_saliency_stub, resized_dims

__version__ = "0.1.0"

__all__ = [
    "ExtractionSpec",
    "build_backbone",
    "extract",
    "extract_saliency_stub",
    "resized_dims",
]
