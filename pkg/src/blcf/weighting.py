"""Spatial weight maps for the assignment grid.

Schemes: uniform (no weighting), Gaussian center prior, L2-norm of the local
convolutional features, externally supplied saliency maps, and a built-in
Boolean Map Saliency detector. Saliency maps at pixel resolution are reduced
to the grid by block-max pooling and max-normalized into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensorio
from .errors import ImageDecodeError, ValidationError

DEFAULT_SIGMA_FRAC = 1.0 / 3.0
DEFAULT_BMS_STEP = 8
DEFAULT_BMS_DILATION = 7
DEFAULT_BLOCK = 16

SCHEME_KINDS = ("none", "gaussian", "l2norm", "saliency_file", "bms")


@dataclass
class WeightingScheme:
    kind: str
    sigma_frac: float = DEFAULT_SIGMA_FRAC
    bms_step: int = DEFAULT_BMS_STEP
    bms_dilation: int = DEFAULT_BMS_DILATION
    bms_blur_sigma: float | None = None  # None: 0.02 * max(H, W) at call time
    bms_whiten: bool = True

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValidationError(f"unknown weighting kind {self.kind!r}")

    def params(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "gaussian":
            out["sigma_frac"] = self.sigma_frac
        elif self.kind == "bms":
            out.update(
                bms_step=self.bms_step,
                bms_dilation=self.bms_dilation,
                bms_blur_sigma=self.bms_blur_sigma,
                bms_whiten=self.bms_whiten,
            )
        return out


@dataclass
class WeightContext:
    """Everything a scheme might need to produce weights for one image."""

    grid: tuple[int, int]  # (M, N) of the assignment map
    raw_feature_map: np.ndarray | None = None
    saliency_path: str | None = None
    image_path: str | None = None
    extras: dict = field(default_factory=dict)


def uniform_weights(M: int, N: int) -> np.ndarray:
    if M < 1 or N < 1:
        raise ValidationError(f"grid dims must be >= 1, got {M}x{N}")
    return np.ones((M, N), dtype=np.float64)


def gaussian_weights(M: int, N: int, sigma_frac: float = DEFAULT_SIGMA_FRAC) -> np.ndarray:
    """Center prior: exp of a separable quadratic falloff from the grid center."""
    if M < 1 or N < 1:
        raise ValidationError(f"grid dims must be >= 1, got {M}x{N}")
    if sigma_frac <= 0.0:
        raise ValidationError("sigma_frac must be positive")
    si = sigma_frac * M
    sj = sigma_frac * N
    di = np.arange(M) - (M - 1) / 2.0
    dj = np.arange(N) - (N - 1) / 2.0
    return np.exp(-(di[:, None] ** 2 / (2 * si * si) + dj[None, :] ** 2 / (2 * sj * sj)))


def l2norm_weights(raw_feature_map: np.ndarray) -> np.ndarray:
    """Per-location feature magnitude divided by its maximum; all-zero maps
    fall back to uniform weights."""
    fmap = np.asarray(raw_feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError(f"feature map must be 3-D, got ndim={fmap.ndim}")
    norms = np.linalg.norm(fmap, axis=2)
    peak = norms.max()
    if peak == 0.0:
        return np.ones(norms.shape, dtype=np.float64)
    return norms / peak


def downsample_saliency(
    saliency: np.ndarray,
    M: int | None = None,
    N: int | None = None,
    block: int = DEFAULT_BLOCK,
) -> np.ndarray:
    """Block-max reduce a pixel-resolution saliency map onto an (M, N) grid.

    Blocks are ceil(H'/M) x ceil(W'/N) with trailing partial blocks included;
    when M/N are omitted they default to ceil-division by `block`. The result
    is divided by its maximum; an all-zero map falls back to uniform weights.
    """
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.ndim != 2:
        raise ValidationError(f"saliency map must be 2-D, got ndim={sal.ndim}")
    if sal.min() < 0.0 or sal.max() > 1.0:
        raise ValidationError("saliency values outside [0, 1]")
    H, W = sal.shape
    if M is None:
        M = -(-H // block)
    if N is None:
        N = -(-W // block)
    if M < 1 or N < 1:
        raise ValidationError(f"grid dims must be >= 1, got {M}x{N}")
    bh = -(-H // M)
    bw = -(-W // N)
    out = np.zeros((M, N), dtype=np.float64)
    for i in range(M):
        r0 = i * bh
        r1 = min(r0 + bh, H)
        if r0 >= r1:
            continue  # grid taller than the map: no pixels fall in this block
        for j in range(N):
            c0 = j * bw
            c1 = min(c0 + bw, W)
            if c0 >= c1:
                continue
            out[i, j] = sal[r0:r1, c0:c1].max()
    peak = out.max()
    if peak == 0.0:
        return np.ones((M, N), dtype=np.float64)
    return out / peak


def _surrounded(boolmap: np.ndarray) -> np.ndarray:
    """Foreground connected components that do not touch the image border."""
    labels, count = ndimage.label(boolmap)
    if count == 0:
        return np.zeros(boolmap.shape, dtype=bool)
    border = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    border = border[border != 0]
    return boolmap & ~np.isin(labels, border)


def bms_saliency(
    image: np.ndarray,
    step: int = DEFAULT_BMS_STEP,
    dilation_width: int = DEFAULT_BMS_DILATION,
    blur_sigma: float | None = None,
    whiten: bool = True,
) -> np.ndarray:
    """Boolean Map Saliency over the color channels of an RGB image.

    Each channel is swept with thresholds at multiples of `step`; for both
    polarities of every boolean map, border-detached regions form an attention
    map which is dilated and L2-normalized. The combined attention is blurred
    and max-normalized. The accumulation uses a plain sum: any constant factor
    (mean vs. sum) cancels under the final max normalization. A degenerate
    image with no surrounded region anywhere yields a uniform map of ones.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 RGB image, got shape {img.shape}")
    if step < 1:
        raise ValidationError("step must be >= 1")
    if dilation_width < 1:
        raise ValidationError("dilation_width must be >= 1")
    H, W = img.shape[:2]
    if blur_sigma is None:
        blur_sigma = 0.02 * max(H, W)

    channels = []
    for c in range(3):
        ch = img[:, :, c]
        if whiten:
            std = ch.std()
            ch = (ch - ch.mean()) / std if std > 0.0 else np.zeros_like(ch)
        lo, hi = ch.min(), ch.max()
        ch = (ch - lo) * (255.0 / (hi - lo)) if hi > lo else np.zeros_like(ch)
        channels.append(ch)

    acc = np.zeros((H, W), dtype=np.float64)
    for ch in channels:
        for theta in range(step, 256, step):
            for boolmap in (ch > theta, ch <= theta):
                att = _surrounded(boolmap)
                if not att.any():
                    continue
                att = ndimage.maximum_filter(
                    att.astype(np.float64), size=dilation_width, mode="constant", cval=0.0
                )
                acc += att / np.sqrt(np.einsum("ij,ij->", att, att))

    if acc.max() == 0.0:
        return np.ones((H, W), dtype=np.float64)
    sal = ndimage.gaussian_filter(acc, sigma=blur_sigma)
    return sal / sal.max()


def load_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def make_weights(scheme: WeightingScheme, context: WeightContext) -> np.ndarray:
    """Produce the (M, N) weight map for one image under the given scheme."""
    M, N = context.grid
    if scheme.kind == "none":
        return uniform_weights(M, N)
    if scheme.kind == "gaussian":
        return gaussian_weights(M, N, scheme.sigma_frac)
    if scheme.kind == "l2norm":
        if context.raw_feature_map is None:
            raise ValidationError("l2norm weighting requires the raw feature map")
        fmap = context.raw_feature_map
        if fmap.shape[:2] != (M, N):
            raise ValidationError(
                f"raw feature map grid {fmap.shape[:2]} does not match assignment grid {(M, N)}"
            )
        return l2norm_weights(fmap)
    if scheme.kind == "saliency_file":
        if context.saliency_path is None:
            raise ValidationError("saliency_file weighting requires a saliency_path")
        sal = tensorio.load_saliency(context.saliency_path)
        return downsample_saliency(sal, M, N)
    if scheme.kind == "bms":
        if context.image_path is None:
            raise ValidationError("bms weighting requires an image_path")
        sal = bms_saliency(
            load_rgb(context.image_path),
            step=scheme.bms_step,
            dilation_width=scheme.bms_dilation,
            blur_sigma=scheme.bms_blur_sigma,
            whiten=scheme.bms_whiten,
        )
        return downsample_saliency(sal, M, N)
    raise ValidationError(f"unknown weighting kind {scheme.kind!r}")
