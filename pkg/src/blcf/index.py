"""Sparse inverted index with exact cosine ranking and average query expansion.

Scores accumulate in float64 so sparse posting traversal agrees with a dense
brute-force dot product to 1e-6 even with float32 stored weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .bow import SparseBow
from .errors import TensorFormatError, ValidationError

INDEX_FORMAT_VERSION = 1
NORM_TOL = 1e-5

RankedList = list[tuple[str, float]]


@dataclass
class InvertedIndex:
    K: int
    doc_ids: list[str]
    postings: dict[int, tuple[np.ndarray, np.ndarray]]  # word -> (ordinals, weights)
    _ordinals: dict[str, int] = field(default_factory=dict, repr=False)
    _forward: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def ordinal_of(self, image_id: str) -> int:
        try:
            return self._ordinals[image_id]
        except KeyError:
            raise ValidationError(f"unknown image_id {image_id!r}") from None

    def doc_vector(self, ordinal: int) -> tuple[np.ndarray, np.ndarray]:
        """Sparse (words, weights) of one document, rebuilt from postings on
        first use when the index was loaded from disk."""
        if self._forward is None:
            buckets: list[list[tuple[int, float]]] = [[] for _ in range(self.doc_count)]
            for word in sorted(self.postings):
                ords, wts = self.postings[word]
                for o, w in zip(ords.tolist(), wts.tolist()):
                    buckets[o].append((word, w))
            self._forward = [
                (
                    np.array([w for w, _ in entries], dtype=np.int32),
                    np.array([v for _, v in entries], dtype=np.float64),
                )
                for entries in buckets
            ]
        return self._forward[ordinal]


def build_index(bows: list[SparseBow]) -> InvertedIndex:
    """Construct the word -> (document, weight) postings from encoded vectors.

    Every non-empty vector must arrive unit-norm; image ids must be unique and
    all vectors must share the same K.
    """
    if not bows:
        return InvertedIndex(K=0, doc_ids=[], postings={})
    K = bows[0].K
    doc_ids: list[str] = []
    ordinals: dict[str, int] = {}
    acc: dict[int, tuple[list[int], list[float]]] = {}
    forward: list[tuple[np.ndarray, np.ndarray]] = []
    for ordinal, bow in enumerate(bows):
        if bow.K != K:
            raise ValidationError(f"K mismatch: {bow.image_id!r} has K={bow.K}, expected {K}")
        if bow.image_id in ordinals:
            raise ValidationError(f"duplicate image_id {bow.image_id!r}")
        if "\n" in bow.image_id:
            raise ValidationError(f"image_id {bow.image_id!r} contains a newline")
        if bow.nnz:
            if abs(bow.norm() - 1.0) > NORM_TOL:
                raise ValidationError(
                    f"{bow.image_id!r}: vector norm {bow.norm():.6f} is not 1"
                )
            if bow.words.min() < 0 or bow.words.max() >= K:
                raise ValidationError(f"{bow.image_id!r}: word ids outside [0, {K})")
            if np.any(np.diff(bow.words) <= 0):
                raise ValidationError(f"{bow.image_id!r}: word ids not strictly increasing")
        ordinals[bow.image_id] = ordinal
        doc_ids.append(bow.image_id)
        for word, value in zip(bow.words.tolist(), bow.weights.tolist()):
            if word not in acc:
                acc[word] = ([], [])
            acc[word][0].append(ordinal)
            acc[word][1].append(value)
        forward.append((bow.words.astype(np.int32), np.asarray(bow.weights, dtype=np.float64)))
    postings = {
        word: (np.array(ords, dtype=np.int64), np.array(wts, dtype=np.float64))
        for word, (ords, wts) in acc.items()
    }
    return InvertedIndex(K=K, doc_ids=doc_ids, postings=postings, _ordinals=ordinals, _forward=forward)


def query(index: InvertedIndex, q: SparseBow, top_n: int | None = None, stats: dict | None = None) -> RankedList:
    """Rank documents by cosine similarity to `q`, touching only the posting
    lists of the query's non-zero words.

    Ties break by image_id ascending. `stats`, when given, receives the number
    of posting entries traversed.
    """
    if index.doc_count == 0:
        if stats is not None:
            stats["postings_touched"] = 0
        return []
    if q.K != index.K:
        raise ValidationError(f"K mismatch: query has K={q.K}, index has {index.K}")
    scores = np.zeros(index.doc_count, dtype=np.float64)
    touched = 0
    for word, qw in zip(q.words.tolist(), q.weights.tolist()):
        posting = index.postings.get(word)
        if posting is None:
            continue
        ords, wts = posting
        scores[ords] += qw * wts
        touched += ords.size
    if stats is not None:
        stats["postings_touched"] = touched
    order = sorted(range(index.doc_count), key=lambda d: (-scores[d], index.doc_ids[d]))
    if top_n is not None:
        order = order[:top_n]
    return [(index.doc_ids[d], float(scores[d])) for d in order]


def expand_query(
    q: SparseBow,
    ranked: RankedList,
    index: InvertedIndex,
    n: int = 10,
    include_query: bool = True,
) -> SparseBow:
    """Average query expansion: sum the query with its top-n retrieved vectors
    and L2-normalize."""
    if q.K != index.K and index.doc_count:
        raise ValidationError(f"K mismatch: query has K={q.K}, index has {index.K}")
    dense = np.zeros(q.K, dtype=np.float64)
    if include_query:
        dense[q.words] += q.weights
    for image_id, _ in ranked[: max(n, 0)]:
        words, weights = index.doc_vector(index.ordinal_of(image_id))
        dense[words] += weights
    norm = np.linalg.norm(dense)
    if norm == 0.0:
        # nothing was aggregated: fall back to the (re-normalized) query
        dense[q.words] = q.weights
        norm = np.linalg.norm(dense)
        if norm == 0.0:
            return SparseBow(words=q.words.copy(), weights=q.weights.copy(), K=q.K, image_id=q.image_id)
    dense /= norm
    words = np.flatnonzero(dense > 0.0)
    return SparseBow(
        words=words.astype(np.int32), weights=dense[words], K=q.K, image_id=q.image_id
    )


def save_index(path, index: InvertedIndex, extra_header: dict | None = None):
    """Single-file layout: JSON header line, doc-id table (one per line), then
    one posting block per word in [0, K): u32 count followed by
    (u32 ordinal, f32 weight) pairs, all little-endian."""
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "K": index.K,
        "doc_count": index.doc_count,
    }
    if extra_header:
        header.update(extra_header)
    pair_dtype = np.dtype([("ordinal", "<u4"), ("weight", "<f4")])
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for doc_id in index.doc_ids:
            f.write(doc_id.encode("utf-8") + b"\n")
        empty = struct.pack("<I", 0)
        for word in range(index.K):
            posting = index.postings.get(word)
            if posting is None:
                f.write(empty)
                continue
            ords, wts = posting
            f.write(struct.pack("<I", ords.size))
            block = np.empty(ords.size, dtype=pair_dtype)
            block["ordinal"] = ords
            block["weight"] = wts
            f.write(block.tobytes())


def load_index(path) -> tuple[InvertedIndex, dict]:
    """Read an index file back; returns (index, header dict)."""
    pair_dtype = np.dtype([("ordinal", "<u4"), ("weight", "<f4")])
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFormatError(f"{path}: not an index file: {exc}") from exc
        if header.get("format_version") != INDEX_FORMAT_VERSION:
            raise TensorFormatError(f"{path}: unsupported index format version")
        K = int(header["K"])
        doc_count = int(header["doc_count"])
        doc_ids = []
        for _ in range(doc_count):
            line = f.readline()
            if not line:
                raise TensorFormatError(f"{path}: truncated doc table")
            doc_ids.append(line.decode("utf-8").rstrip("\n"))
        postings: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for word in range(K):
            raw = f.read(4)
            if len(raw) != 4:
                raise TensorFormatError(f"{path}: truncated posting blocks")
            (count,) = struct.unpack("<I", raw)
            if count == 0:
                continue
            blob = f.read(8 * count)
            if len(blob) != 8 * count:
                raise TensorFormatError(f"{path}: truncated posting blocks")
            block = np.frombuffer(blob, dtype=pair_dtype)
            postings[word] = (
                block["ordinal"].astype(np.int64),
                block["weight"].astype(np.float64),
            )
        if f.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after posting blocks")
    ordinals = {doc_id: i for i, doc_id in enumerate(doc_ids)}
    if len(ordinals) != len(doc_ids):
        raise TensorFormatError(f"{path}: duplicate ids in doc table")
    return InvertedIndex(K=K, doc_ids=doc_ids, postings=postings, _ordinals=ordinals), header
