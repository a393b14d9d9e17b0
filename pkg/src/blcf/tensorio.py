"""Binary tensor file format, saliency-map ingestion, and dataset manifests.

The on-disk tensor layout is fixed and shared with the feature extractor:
magic ``BLCF``, one version byte, ndim and each dim as unsigned 32-bit
little-endian, then the payload as little-endian 32-bit floats in row-major
order. File size is therefore exactly ``9 + 4*ndim + 4*prod(dims)`` bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ImageDecodeError, TensorFormatError, ValidationError

MAGIC = b"BLCF"
FORMAT_VERSION = 1

_ALLOWED_NDIM = (2, 3)


@dataclass
class ImageMeta:
    """One dataset entry: identifiers, original pixel size, and file paths."""

    image_id: str
    width: int
    height: int
    tensor_path: str
    saliency_path: str | None = None
    image_path: str | None = None

    def validate(self):
        if not self.image_id:
            raise ValidationError("manifest entry with empty image_id")
        if self.width < 1 or self.height < 1:
            raise ValidationError(
                f"image {self.image_id!r}: width/height must be >= 1, "
                f"got {self.width}x{self.height}"
            )


def _validate_tensor(arr: np.ndarray, context: str):
    if arr.ndim not in _ALLOWED_NDIM:
        raise ValidationError(f"{context}: tensor must be 2-D or 3-D, got ndim={arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"{context}: tensor dims must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise TensorFormatError(f"{context}: non-finite values")


def write_tensor(path, tensor: np.ndarray):
    """Write a 2-D or 3-D float tensor to `path` in the BLCF binary format."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    _validate_tensor(arr, str(path))
    header = MAGIC + struct.pack("<B", FORMAT_VERSION)
    header += struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write tensor {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read a BLCF tensor file back into a float32 array."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise OSError(f"cannot read tensor {path}: {exc}") from exc

    if len(blob) < 9 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a BLCF tensor")
    version = blob[4]
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported format version {version}")
    (ndim,) = struct.unpack_from("<I", blob, 5)
    if ndim not in _ALLOWED_NDIM:
        raise TensorFormatError(f"{path}: invalid ndim {ndim}")
    header_end = 9 + 4 * ndim
    if len(blob) < header_end:
        raise TensorFormatError(f"{path}: truncated tensor")
    dims = struct.unpack_from(f"<{ndim}I", blob, 9)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"{path}: invalid dims {dims}")
    count = int(np.prod(dims))
    if len(blob) - header_end != 4 * count:
        raise TensorFormatError(f"{path}: truncated tensor")
    arr = np.frombuffer(blob, dtype="<f4", offset=header_end).reshape(dims)
    if not np.isfinite(arr).all():
        raise TensorFormatError(f"{path}: non-finite values")
    return arr.astype(np.float32)  # copy: frombuffer views are read-only


def read_saliency_image(path, target_w: int, target_h: int) -> np.ndarray:
    """Load an 8-bit grayscale image as a (target_h, target_w) map in [0, 1].

    Bilinearly resized when the source resolution differs from the target.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if img.size != (target_w, target_h):
                img = img.resize((target_w, target_h), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except OSError as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def load_saliency(path) -> np.ndarray:
    """Load a saliency map at native resolution from a BLCF tensor or an image.

    Tensor files must be 2-D with values already in [0, 1]; grayscale images
    are scaled by 1/255.
    """
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise ValidationError(f"{path}: saliency tensor must be 2-D, got ndim={arr.ndim}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(f"{path}: saliency values outside [0, 1]")
        return arr
    try:
        with Image.open(path) as img:
            w, h = img.size
    except OSError as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return read_saliency_image(path, w, h)


def _resolve(base_dir: str, path: str | None) -> str | None:
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(base_dir, path)


def load_manifest(path) -> list[ImageMeta]:
    """Parse a JSONL dataset manifest; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    metas = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                meta = ImageMeta(
                    image_id=str(obj["image_id"]),
                    width=int(obj["width"]),
                    height=int(obj["height"]),
                    tensor_path=_resolve(base, str(obj["tensor_path"])),
                    saliency_path=_resolve(base, obj.get("saliency_path")),
                    image_path=_resolve(base, obj.get("image_path")),
                )
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            meta.validate()
            if meta.image_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate image_id {meta.image_id!r}")
            seen.add(meta.image_id)
            metas.append(meta)
    return metas


def write_manifest(path, metas: list[ImageMeta]):
    """Write dataset entries as one JSON object per line."""
    with open(path, "w", encoding="utf-8") as f:
        for meta in metas:
            obj = {
                "image_id": meta.image_id,
                "width": meta.width,
                "height": meta.height,
                "tensor_path": meta.tensor_path,
            }
            if meta.saliency_path is not None:
                obj["saliency_path"] = meta.saliency_path
            if meta.image_path is not None:
                obj["image_path"] = meta.image_path
            f.write(json.dumps(obj, sort_keys=True) + "\n")
