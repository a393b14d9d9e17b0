"""Batch feature extraction: VGG16 convolutional activations per image.

Images are resized so their longest side matches `max_side` (no upscaling by
default), normalized, and forwarded up to the requested layer's ReLU. Each
image yields an (M, N, 512) tensor file plus one manifest line carrying the
original pixel dimensions.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torchvision.models import vgg16

from . import tensorfmt

log = logging.getLogger(__name__)

DEFAULT_MAX_SIDE = 340
# ImageNet statistics matching the torchvision VGG16 weights
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

# slice of vgg16().features ending just after the layer's ReLU
LAYER_SLICES = {
    "conv4_3": 23,
    "conv5_1": 26,
    "conv5_2": 28,
    "conv5_3": 30,
}


@dataclass
class ExtractionSpec:
    images: list[str]
    output_dir: str
    max_side: int = DEFAULT_MAX_SIDE
    layer: str = "conv5_1"
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD
    weights: str = "imagenet"  # "imagenet", "random", or a state-dict path
    seed: int = 0
    allow_upscale: bool = False
    saliency_dir: str | None = None
    extra_manifest: dict = field(default_factory=dict)


def build_backbone(spec: ExtractionSpec) -> torch.nn.Module:
    """The VGG16 convolutional stack truncated after the requested layer."""
    if spec.layer not in LAYER_SLICES:
        raise ValueError(f"unknown layer {spec.layer!r}; choose from {sorted(LAYER_SLICES)}")
    if spec.weights == "imagenet":
        try:
            model = vgg16(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise RuntimeError(
                "pretrained weights are unavailable; pass a local state-dict path "
                f"or weights='random' ({exc})"
            ) from exc
    elif spec.weights == "random":
        torch.manual_seed(spec.seed)
        model = vgg16(weights=None)
    else:
        model = vgg16(weights=None)
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    backbone = model.features[: LAYER_SLICES[spec.layer]]
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def resized_dims(width: int, height: int, max_side: int, allow_upscale: bool) -> tuple[int, int]:
    """Target (width, height) with the aspect ratio preserved."""
    longest = max(width, height)
    if longest <= max_side and not allow_upscale:
        return width, height
    scale = max_side / longest
    if width >= height:
        return max_side, max(1, round(height * scale))
    return max(1, round(width * scale)), max_side


def _prepare(image: Image.Image, spec: ExtractionSpec) -> torch.Tensor:
    w, h = image.size
    tw, th = resized_dims(w, h, spec.max_side, spec.allow_upscale)
    if (tw, th) != (w, h):
        image = image.resize((tw, th), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.array(spec.mean, dtype=np.float32)) / np.array(spec.std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def extract_features(backbone: torch.nn.Module, image: Image.Image, spec: ExtractionSpec) -> np.ndarray:
    """(M, N, D) activation volume for one image."""
    batch = _prepare(image.convert("RGB"), spec)
    with torch.no_grad():
        out = backbone(batch)
    return out[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def find_saliency_map(saliency_dir: str, stem: str) -> str | None:
    for ext in (".png", ".jpg", ".jpeg", ".bmp", ".blcf"):
        candidate = os.path.join(saliency_dir, stem + ext)
        if os.path.exists(candidate):
            return candidate
    return None


def extract_saliency_stub(images: list[str], saliency_dir: str, out_dir: str) -> dict[str, str]:
    """Copy externally produced saliency maps into the output layout.

    Returns stem -> copied path; images without a map are logged and omitted.
    Map resolution is not checked: the engine resizes on read.
    """
    os.makedirs(out_dir, exist_ok=True)
    found = {}
    for image_path in images:
        stem = os.path.splitext(os.path.basename(image_path))[0]
        src = find_saliency_map(saliency_dir, stem)
        if src is None:
            log.warning("no saliency map for %s", stem)
            continue
        dst = os.path.join(out_dir, stem + os.path.splitext(src)[1])
        shutil.copyfile(src, dst)
        found[stem] = dst
    return found


def extract(spec: ExtractionSpec) -> tuple[list[dict], str]:
    """Run the full extraction; returns (manifest entries, manifest path).

    Unreadable images are skipped with a log line; extracting nothing at all
    raises so batch jobs fail loudly.
    """
    os.makedirs(spec.output_dir, exist_ok=True)
    tensor_dir = os.path.join(spec.output_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    backbone = build_backbone(spec)

    saliency_paths = {}
    if spec.saliency_dir:
        saliency_paths = extract_saliency_stub(
            spec.images, spec.saliency_dir, os.path.join(spec.output_dir, "saliency")
        )

    entries = []
    seen = set()
    for image_path in spec.images:
        stem = os.path.splitext(os.path.basename(image_path))[0]
        if stem in seen:
            raise ValueError(f"duplicate image id {stem!r} (from {image_path})")
        try:
            with Image.open(image_path) as img:
                width, height = img.size
                fmap = extract_features(backbone, img, spec)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", image_path, exc)
            continue
        seen.add(stem)
        tensor_path = os.path.join(tensor_dir, stem + ".blcf")
        tensorfmt.write_tensor(tensor_path, fmap)
        entry = {
            "image_id": stem,
            "width": width,
            "height": height,
            "tensor_path": os.path.relpath(tensor_path, spec.output_dir),
            "image_path": os.path.abspath(image_path),
        }
        if stem in saliency_paths:
            entry["saliency_path"] = os.path.relpath(saliency_paths[stem], spec.output_dir)
        entry.update(spec.extra_manifest)
        entries.append(entry)
        log.info("extracted %s: %s -> %s", stem, (height, width), fmap.shape)

    if not entries:
        raise RuntimeError("no images were successfully extracted")
    manifest_path = os.path.join(spec.output_dir, "manifest.jsonl")
    tensorfmt.write_manifest(manifest_path, entries)
    return entries, manifest_path
