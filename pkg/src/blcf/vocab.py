"""Visual vocabulary training (Lloyd k-means with k-means++ seeding),
feature-map quantization into assignment maps, and query upsampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ValidationError

DEFAULT_MAX_ITERS = 50
_ASSIGN_CHUNK = 16384


@dataclass
class Vocabulary:
    centroids: np.ndarray  # (K, D) float64
    K: int
    D: int
    seed: int
    iterations_run: int
    final_objective: float
    objective_history: list[float] = field(default_factory=list)


def _sqdist_block(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clamped at zero."""
    xx = np.einsum("ij,ij->i", X, X)
    cc = np.einsum("ij,ij->i", C, C)
    d = xx[:, None] + cc[None, :] - 2.0 * (X @ C.T)
    np.maximum(d, 0.0, out=d)
    return d


def _assign_exact(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point; ties resolve to the lowest centroid index."""
    n = X.shape[0]
    assign = np.empty(n, dtype=np.int64)
    dmin = np.empty(n, dtype=np.float64)
    for start in range(0, n, _ASSIGN_CHUNK):
        stop = min(start + _ASSIGN_CHUNK, n)
        d = _sqdist_block(X[start:stop], C)
        idx = np.argmin(d, axis=1)
        assign[start:stop] = idx
        dmin[start:stop] = d[np.arange(stop - start), idx]
    return assign, dmin


class _CoarseIndex:
    """Partition of the centroids into groups for multi-probe nearest search."""

    def __init__(self, C: np.ndarray, seed: int, n_probe: int | None = None):
        K = C.shape[0]
        self.n_groups = max(1, int(np.ceil(np.sqrt(K))))
        if n_probe is None:
            n_probe = max(1, int(np.ceil(0.3 * self.n_groups)))
        self.n_probe = min(n_probe, self.n_groups)
        rng = np.random.default_rng([seed, 0xC0A5])
        centers = _kmeans_pp(C, self.n_groups, rng)
        for _ in range(3):
            labels, _ = _assign_exact(C, centers)
            centers = _segment_means(C, labels, centers)
        labels, _ = _assign_exact(C, centers)
        self.centers = centers
        self.members = [np.flatnonzero(labels == g) for g in range(self.n_groups)]

    def assign(
        self, X: np.ndarray, C: np.ndarray, incumbent: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Multi-probe nearest-centroid search; the incumbent assignment, when
        given, stays in the candidate set so the k-means objective cannot rise."""
        n = X.shape[0]
        K = C.shape[0]
        dg = _sqdist_block(X, self.centers)
        if self.n_probe >= self.n_groups:
            probed = np.argsort(dg, axis=1)
        else:
            probed = np.argpartition(dg, self.n_probe - 1, axis=1)[:, : self.n_probe]
        best_d = np.full(n, np.inf)
        best_i = np.full(n, K, dtype=np.int64)
        for g in range(self.n_groups):
            members = self.members[g]
            if members.size == 0:
                continue
            rows = np.flatnonzero((probed == g).any(axis=1))
            if rows.size == 0:
                continue
            d = _sqdist_block(X[rows], C[members])
            loc = np.argmin(d, axis=1)
            dloc = d[np.arange(rows.size), loc]
            gidx = members[loc]
            _take_better(best_d, best_i, rows, dloc, gidx)
        if incumbent is not None:
            cinc = C[incumbent]
            dinc = np.einsum("ij,ij->i", X, X) + np.einsum("ij,ij->i", cinc, cinc)
            dinc -= 2.0 * np.einsum("ij,ij->i", X, cinc)
            np.maximum(dinc, 0.0, out=dinc)
            _take_better(best_d, best_i, np.arange(n), dinc, incumbent.astype(np.int64))
        return best_i, best_d


def _take_better(best_d, best_i, rows, d, idx):
    cur_d = best_d[rows]
    cur_i = best_i[rows]
    upd = (d < cur_d) | ((d == cur_d) & (idx < cur_i))
    sel = rows[upd]
    best_d[sel] = d[upd]
    best_i[sel] = idx[upd]


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: iteratively sample points proportional to squared distance."""
    n = X.shape[0]
    C = np.empty((K, X.shape[1]), dtype=np.float64)
    C[0] = X[rng.integers(n)]
    d2 = _sqdist_block(X, C[0:1])[:, 0]
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        C[k] = X[idx]
        np.minimum(d2, _sqdist_block(X, C[k : k + 1])[:, 0], out=d2)
    return C


def _segment_means(X: np.ndarray, assign: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Per-cluster means with a fixed summation order; empty clusters keep `fallback`."""
    K = fallback.shape[0]
    order = np.argsort(assign, kind="stable")
    sorted_assign = assign[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_assign)) + 1]
    sums = np.add.reduceat(X[order], starts, axis=0)
    labels = sorted_assign[starts]
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    out = fallback.copy()
    out[labels] = sums / counts[labels, None]
    return out


def _repair_empty(C: np.ndarray, X: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Move each empty cluster's centroid to the point farthest from it.

    Points already consumed by a repair in the same round are skipped so two
    empty clusters cannot collapse onto the same point.
    """
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return C
    used: set[int] = set()
    for e in empty:
        d2 = np.einsum("ij,ij->i", X - C[e], X - C[e])
        for idx in np.argsort(-d2, kind="stable"):
            if int(idx) not in used:
                C[e] = X[idx]
                used.add(int(idx))
                break
    return C


def train_vocabulary(
    features,
    K: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
    mode: str = "exact",
    n_probe: int | None = None,
) -> Vocabulary:
    """Cluster post-processed descriptors into K visual words.

    Runs Lloyd iterations from a k-means++ start until assignments stop
    changing or `max_iters` is reached. The recorded objective (sum of squared
    distances to assigned centroids) is non-increasing across iterations in
    both exact and approximate mode.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"feature sample must be 2-D, got ndim={X.ndim}")
    if not np.isfinite(X).all():
        raise ValidationError("feature sample contains non-finite values")
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    n, D = X.shape
    if n < K:
        raise ValidationError(f"too few samples: {n} < K={K}")
    if mode not in ("exact", "approximate"):
        raise ValidationError(f"unknown mode {mode!r}")
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, K, rng)
    history: list[float] = []
    prev_assign = None
    iterations_run = max_iters
    for it in range(1, max_iters + 1):
        if mode == "exact":
            assign, dmin = _assign_exact(X, C)
        else:
            coarse = _CoarseIndex(C, seed=seed, n_probe=n_probe)
            assign, dmin = coarse.assign(X, C, incumbent=prev_assign)
        history.append(float(dmin.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            iterations_run = it
            break
        counts = np.bincount(assign, minlength=K)
        C = _segment_means(X, assign, C)
        C = _repair_empty(C, X, counts)
        prev_assign = assign

    return Vocabulary(
        centroids=C,
        K=K,
        D=D,
        seed=seed,
        iterations_run=iterations_run,
        final_objective=history[-1],
        objective_history=history,
    )


def assign_map(
    feature_map: np.ndarray,
    vocab: Vocabulary,
    mode: str = "exact",
    n_probe: int | None = None,
) -> np.ndarray:
    """Quantize an (M, N, D) post-processed volume into an (M, N) word-id grid."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError(f"feature map must be 3-D, got ndim={fmap.ndim}")
    M, N, D = fmap.shape
    if D != vocab.D:
        raise ValidationError(f"descriptor dim mismatch: map has D={D}, vocabulary has {vocab.D}")
    X = fmap.reshape(M * N, D)
    if mode == "exact":
        assign, _ = _assign_exact(X, vocab.centroids)
    elif mode == "approximate":
        coarse = _CoarseIndex(vocab.centroids, seed=vocab.seed, n_probe=n_probe)
        assign, _ = coarse.assign(X, vocab.centroids)
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    return assign.reshape(M, N).astype(np.int32)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: output endpoints land exactly on input endpoints
    if n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def upsample_query(feature_map: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate an (M, N, D) volume to (2M, 2N, D), corner-aligned."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError(f"feature map must be 3-D, got ndim={fmap.ndim}")
    M, N, _ = fmap.shape
    r = _axis_coords(M, 2 * M)
    c = _axis_coords(N, 2 * N)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, M - 1)
    c1 = np.minimum(c0 + 1, N - 1)
    wr = (r - r0)[:, None, None]
    wc = (c - c0)[None, :, None]
    top = fmap[r0][:, c0] * (1 - wc) + fmap[r0][:, c1] * wc
    bot = fmap[r1][:, c0] * (1 - wc) + fmap[r1][:, c1] * wc
    return top * (1 - wr) + bot * wr


def save_vocab(prefix, vocab: Vocabulary, extra: dict | None = None):
    """Persist as `<prefix>.blcf` (K x D centroids) plus `<prefix>.json`."""
    prefix = str(prefix)
    tensorio.write_tensor(prefix + ".blcf", vocab.centroids)
    sidecar = {
        "K": vocab.K,
        "D": vocab.D,
        "seed": vocab.seed,
        "iterations_run": vocab.iterations_run,
        "final_objective": vocab.final_objective,
    }
    if extra:
        sidecar.update(extra)
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def load_vocab(prefix) -> tuple[Vocabulary, dict]:
    prefix = str(prefix)
    with open(prefix + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    centroids = tensorio.read_tensor(prefix + ".blcf").astype(np.float64)
    vocab = Vocabulary(
        centroids=centroids,
        K=int(sidecar["K"]),
        D=int(sidecar["D"]),
        seed=int(sidecar["seed"]),
        iterations_run=int(sidecar["iterations_run"]),
        final_objective=float(sidecar["final_objective"]),
    )
    if centroids.shape != (vocab.K, vocab.D):
        raise ValidationError(
            f"{prefix}: centroid shape {centroids.shape} does not match sidecar "
            f"({vocab.K}, {vocab.D})"
        )
    return vocab, sidecar
