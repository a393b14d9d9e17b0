"""Sparse bag-of-words encoding from assignment and weight maps, query
bounding-box handling, and the dense sum-pooling baseline."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import descriptors, vocab as vocab_mod, weighting
from .errors import ValidationError

NORM_TOL = 1e-5


@dataclass
class SparseBow:
    """L2-normalized sparse histogram over K visual words.

    `words` is strictly increasing; `weights` are the matching positive
    histogram values. An empty vector (no entries) is legal.
    """

    words: np.ndarray  # (nnz,) int32, strictly increasing
    weights: np.ndarray  # (nnz,) float64
    K: int
    image_id: str = ""

    @property
    def nnz(self) -> int:
        return int(self.words.size)

    def norm(self) -> float:
        return float(np.linalg.norm(self.weights))

    def as_dense(self) -> np.ndarray:
        out = np.zeros(self.K, dtype=np.float64)
        out[self.words] = self.weights
        return out

    def entries(self) -> list[tuple[int, float]]:
        return [(int(w), float(v)) for w, v in zip(self.words, self.weights)]


@dataclass
class QueryRegion:
    """Axis-aligned bounding box in original-image pixels.

    Image dimensions may be bound later via `bind` when they are not known at
    construction time (e.g. when parsing ground-truth files).
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(
                f"degenerate bbox ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if self.x_min < 0 or self.y_min < 0:
            raise ValidationError("bbox coordinates must be non-negative")
        if self.width is not None and self.height is not None:
            if self.x_max > self.width or self.y_max > self.height:
                raise ValidationError(
                    f"bbox ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}) "
                    f"exceeds image {self.width}x{self.height}"
                )

    def bind(self, width: int, height: int) -> "QueryRegion":
        return QueryRegion(self.x_min, self.y_min, self.x_max, self.y_max, width, height)


@dataclass
class DenseDescriptor:
    """Sum-pooling baseline: one L2-normalized D-vector per image."""

    values: np.ndarray
    image_id: str = ""


def encode(assignment: np.ndarray, weights: np.ndarray, K: int, image_id: str = "") -> SparseBow:
    """Histogram the per-cell weights by visual word and L2-normalize.

    Words whose summed weight is zero are omitted; an all-zero weight map
    yields the empty vector.
    """
    amap = np.asarray(assignment)
    wmap = np.asarray(weights, dtype=np.float64)
    if amap.shape != wmap.shape:
        raise ValidationError(f"shape mismatch: assignment {amap.shape} vs weights {wmap.shape}")
    if amap.size == 0:
        raise ValidationError("empty assignment map")
    if amap.min() < 0 or amap.max() >= K:
        raise ValidationError(f"word ids outside [0, {K})")
    hist = np.bincount(amap.ravel(), weights=wmap.ravel(), minlength=K)
    words = np.flatnonzero(hist > 0.0)
    values = hist[words]
    norm = np.linalg.norm(values)
    if norm > 0.0:
        values = values / norm
    return SparseBow(
        words=words.astype(np.int32), weights=values, K=int(K), image_id=image_id
    )


def map_bbox_to_grid(region: QueryRegion, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Map a pixel bbox onto grid cells, over-covering via floor/ceil.

    Returns half-open (i0, i1, j0, j1). A region that collapses after
    clamping expands to the single cell nearest the bbox center.
    """
    if region.width is None or region.height is None:
        raise ValidationError("query region must be bound to image dimensions")
    H, W = region.height, region.width
    i0 = math.floor(region.y_min * grid_h / H)
    i1 = math.ceil(region.y_max * grid_h / H)
    j0 = math.floor(region.x_min * grid_w / W)
    j1 = math.ceil(region.x_max * grid_w / W)
    i0 = min(max(i0, 0), grid_h - 1)
    j0 = min(max(j0, 0), grid_w - 1)
    i1 = min(max(i1, 0), grid_h)
    j1 = min(max(j1, 0), grid_w)
    if i1 <= i0 or j1 <= j0:
        ci = min(grid_h - 1, max(0, int((region.y_min + region.y_max) / 2 * grid_h / H)))
        cj = min(grid_w - 1, max(0, int((region.x_min + region.x_max) / 2 * grid_w / W)))
        return ci, ci + 1, cj, cj + 1
    return i0, i1, j0, j1


def encode_query(
    raw_feature_map: np.ndarray,
    region: QueryRegion,
    pca: descriptors.PcaModel,
    vocab: vocab_mod.Vocabulary,
    scheme: weighting.WeightingScheme,
    saliency_path: str | None = None,
    image_path: str | None = None,
    image_id: str = "",
    assign_mode: str = "exact",
) -> SparseBow:
    """Encode a query: upsample the raw volume 2x, post-process, quantize, then
    keep only the grid cells covered by the bounding box.

    Weights are computed on the full upsampled grid (center priors and
    saliency maps are defined relative to the whole image) and cropped after.
    """
    up = vocab_mod.upsample_query(raw_feature_map)
    grid_h, grid_w = up.shape[0], up.shape[1]
    amap = vocab_mod.assign_map(descriptors.postprocess_map(up, pca), vocab, mode=assign_mode)
    ctx = weighting.WeightContext(
        grid=(grid_h, grid_w),
        raw_feature_map=up,
        saliency_path=saliency_path,
        image_path=image_path,
    )
    wmap = weighting.make_weights(scheme, ctx)
    i0, i1, j0, j1 = map_bbox_to_grid(region, grid_h, grid_w)
    return encode(amap[i0:i1, j0:j1], wmap[i0:i1, j0:j1], vocab.K, image_id=image_id)


def sum_pool(raw_feature_map: np.ndarray, weights: np.ndarray, image_id: str = "") -> DenseDescriptor:
    """Weighted spatial sum of the local features, L2-normalized."""
    fmap = np.asarray(raw_feature_map, dtype=np.float64)
    wmap = np.asarray(weights, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError(f"feature map must be 3-D, got ndim={fmap.ndim}")
    if fmap.shape[:2] != wmap.shape:
        raise ValidationError(f"shape mismatch: map {fmap.shape[:2]} vs weights {wmap.shape}")
    vec = np.einsum("ijd,ij->d", fmap, wmap)
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec = vec / norm
    return DenseDescriptor(values=vec, image_id=image_id)


def dump_bows_jsonl(path, bows: list[SparseBow]):
    """Debug export: one `{image_id, entries}` JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for bow in bows:
            obj = {"image_id": bow.image_id, "entries": [[w, v] for w, v in bow.entries()]}
            f.write(json.dumps(obj) + "\n")
