"""Oxford-style ground truth parsing and mean-average-precision evaluation."""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .bow import QueryRegion, encode_query
from .errors import PipelineError, ValidationError
from .index import InvertedIndex, RankedList, expand_query, query
from .weighting import WeightingScheme

log = logging.getLogger(__name__)

AP_CONVENTIONS = ("trapezoid", "standard")


@dataclass
class QueryGroundTruth:
    """One benchmark query: its image, bbox, and relevance sets.

    `positives` is the union of the distribution's good and ok lists; `junk`
    entries are removed from rankings before scoring.
    """

    query_id: str
    query_image_id: str
    bbox: QueryRegion
    positives: set[str]
    junk: set[str] = field(default_factory=set)

    def __post_init__(self):
        overlap = self.positives & self.junk
        if overlap:
            raise ValidationError(
                f"query {self.query_id!r}: ids in both positives and junk: {sorted(overlap)[:5]}"
            )


@dataclass
class EvalReport:
    per_query: list[tuple[str, float]]
    map: float
    config_echo: dict
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_json(self) -> str:
        obj = {
            "map": self.map,
            "per_query": [{"query_id": q, "ap": ap} for q, ap in self.per_query],
            "config": self.config_echo,
            "skipped": [{"query_id": q, "reason": r} for q, r in self.skipped],
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _read_id_set(path) -> set[str]:
    with open(path, "r", encoding="utf-8") as f:
        return {line.strip() for line in f if line.strip()}


def parse_groundtruth(
    gt_dir, style: str = "oxford", strip_query_prefix: str = ""
) -> list[QueryGroundTruth]:
    """Parse `<query>_query.txt` plus `<query>_{good,ok,junk}.txt` quadruples.

    The query file holds the query image id and four bbox floats on one line.
    `strip_query_prefix` removes a leading marker from the query image id
    (the Oxford distribution prefixes it with ``oxc1_`` while the relevance
    lists use bare names).
    """
    if style != "oxford":
        raise ValidationError(f"unknown ground-truth style {style!r}")
    query_files = sorted(glob.glob(os.path.join(gt_dir, "*_query.txt")))
    if not query_files:
        raise ValidationError(f"no *_query.txt files under {gt_dir}")
    gts = []
    for qf in query_files:
        query_id = os.path.basename(qf)[: -len("_query.txt")]
        with open(qf, "r", encoding="utf-8") as f:
            line = f.readline().strip()
        parts = line.split()
        if len(parts) != 5:
            raise ValidationError(f"{qf}: expected 'image_id x1 y1 x2 y2', got {line!r}")
        image_id = parts[0]
        if strip_query_prefix and image_id.startswith(strip_query_prefix):
            image_id = image_id[len(strip_query_prefix) :]
        try:
            x1, y1, x2, y2 = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise ValidationError(f"{qf}: bad bbox floats: {exc}") from exc
        sets = {}
        for kind in ("good", "ok", "junk"):
            companion = os.path.join(gt_dir, f"{query_id}_{kind}.txt")
            if not os.path.exists(companion):
                raise ValidationError(f"query {query_id!r}: missing companion file {companion}")
            sets[kind] = _read_id_set(companion)
        gts.append(
            QueryGroundTruth(
                query_id=query_id,
                query_image_id=image_id,
                bbox=QueryRegion(x1, y1, x2, y2),
                positives=sets["good"] | sets["ok"],
                junk=sets["junk"],
            )
        )
    return gts


def write_groundtruth(gt_dir, gts: list[QueryGroundTruth], ok_split: bool = False):
    """Write queries back out in the oxford layout (all positives as good)."""
    os.makedirs(gt_dir, exist_ok=True)
    for gt in gts:
        base = os.path.join(gt_dir, gt.query_id)
        bbox = gt.bbox
        with open(base + "_query.txt", "w", encoding="utf-8") as f:
            f.write(f"{gt.query_image_id} {bbox.x_min} {bbox.y_min} {bbox.x_max} {bbox.y_max}\n")
        good = sorted(gt.positives)
        ok: list[str] = []
        if ok_split and len(good) > 1:
            half = len(good) // 2
            good, ok = good[:half], good[half:]
        for kind, ids in (("good", good), ("ok", ok), ("junk", sorted(gt.junk))):
            with open(f"{base}_{kind}.txt", "w", encoding="utf-8") as f:
                for image_id in ids:
                    f.write(image_id + "\n")


def average_precision(
    ranked: RankedList, gt: QueryGroundTruth, convention: str = "trapezoid"
) -> float:
    """Average precision after junk removal.

    `trapezoid` follows the Oxford reference evaluation: each positive hit
    contributes (precision at the previous kept rank + precision at the hit)/2,
    with the pre-list precision taken as 1. `standard` is the plain sum of
    precisions at hits. Both divide by the total positive count, so positives
    missing from the ranking contribute zero.
    """
    if convention not in AP_CONVENTIONS:
        raise ValidationError(f"unknown AP convention {convention!r}")
    n_pos = len(gt.positives)
    if n_pos == 0:
        raise ValidationError(f"query {gt.query_id!r} has no positives")
    ap = 0.0
    hits = 0
    old_recall = 0.0
    old_precision = 1.0
    kept = 0
    for image_id, _ in ranked:
        if image_id in gt.junk:
            continue
        kept += 1
        if image_id in gt.positives:
            hits += 1
            precision = hits / kept
            if convention == "trapezoid":
                recall = hits / n_pos
                ap += (recall - old_recall) * (old_precision + precision) / 2.0
                old_recall = recall
            else:
                ap += precision / n_pos
            old_precision = precision
        else:
            old_precision = hits / kept
    return ap


def evaluate(
    search_index: InvertedIndex,
    gts: list[QueryGroundTruth],
    scheme: WeightingScheme,
    pca,
    vocab,
    manifest: list[tensorio.ImageMeta],
    aqe: bool = False,
    aqe_n: int = 10,
    aqe_include_query: bool = True,
    convention: str = "trapezoid",
    assign_mode: str = "exact",
) -> EvalReport:
    """Run every query end-to-end against the index and report mAP.

    Queries whose tensors are missing or that have no positives are skipped
    with a logged warning and listed in the report instead of failing the run.
    """
    meta_by_id = {m.image_id: m for m in manifest}
    per_query: list[tuple[str, float]] = []
    skipped: list[tuple[str, str]] = []
    for gt in sorted(gts, key=lambda g: g.query_id):
        meta = meta_by_id.get(gt.query_image_id)
        if meta is None:
            reason = f"query image {gt.query_image_id!r} not in manifest"
            log.warning("skipping %s: %s", gt.query_id, reason)
            skipped.append((gt.query_id, reason))
            continue
        if not gt.positives:
            reason = "no positives"
            log.warning("skipping %s: %s", gt.query_id, reason)
            skipped.append((gt.query_id, reason))
            continue
        try:
            raw = tensorio.read_tensor(meta.tensor_path)
            region = gt.bbox.bind(meta.width, meta.height)
            qbow = encode_query(
                raw,
                region,
                pca,
                vocab,
                scheme,
                saliency_path=meta.saliency_path,
                image_path=meta.image_path,
                image_id=gt.query_image_id,
                assign_mode=assign_mode,
            )
            ranked = query(search_index, qbow)
            if aqe:
                expanded = expand_query(
                    qbow, ranked, search_index, n=aqe_n, include_query=aqe_include_query
                )
                ranked = query(search_index, expanded)
            ap = average_precision(ranked, gt, convention=convention)
        except (PipelineError, OSError) as exc:
            log.warning("skipping %s: %s", gt.query_id, exc)
            skipped.append((gt.query_id, str(exc)))
            continue
        per_query.append((gt.query_id, float(ap)))
    mean_ap = float(np.mean([ap for _, ap in per_query])) if per_query else 0.0
    config_echo = {
        "weighting": scheme.params(),
        "aqe": aqe,
        "aqe_n": aqe_n,
        "aqe_include_query": aqe_include_query,
        "ap_convention": convention,
        "doc_count": search_index.doc_count,
        "K": search_index.K,
    }
    return EvalReport(per_query=per_query, map=mean_ap, config_echo=config_echo, skipped=skipped)
