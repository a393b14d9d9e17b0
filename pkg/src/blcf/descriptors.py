"""Local-descriptor post-processing: L2-normalize, PCA-whiten, L2-normalize again."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import ValidationError

DEFAULT_EPSILON = 1e-8


@dataclass
class PcaModel:
    """Whitening transform fit on a dataset's local descriptors.

    `basis` rows are covariance eigenvectors (descending eigenvalue order),
    each divided by sqrt(eigenvalue + epsilon).
    """

    mean: np.ndarray  # (in_dim,)
    basis: np.ndarray  # (out_dim, in_dim)
    in_dim: int
    out_dim: int
    epsilon: float


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; all-zero rows stay zero."""
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return X / safe


def fit_pca(features, out_dim: int | None = None, epsilon: float = DEFAULT_EPSILON) -> PcaModel:
    """Fit a whitening PCA on already L2-normalized descriptors.

    Uses the exact eigendecomposition of the D x D covariance; eigenvalues are
    floored by `epsilon` so rank-deficient covariances stay invertible.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"feature sample must be 2-D, got ndim={X.ndim}")
    if not np.isfinite(X).all():
        raise ValidationError("feature sample contains non-finite values")
    n, in_dim = X.shape
    if out_dim is None:
        out_dim = in_dim
    if out_dim < 1 or out_dim > in_dim:
        raise ValidationError(f"out_dim must be in [1, {in_dim}], got {out_dim}")
    if n < out_dim:
        raise ValidationError(f"insufficient samples: {n} < out_dim {out_dim}")
    if epsilon <= 0.0:
        raise ValidationError("epsilon must be positive")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1][:out_dim]
    scales = 1.0 / np.sqrt(eigvals[order] + epsilon)
    basis = eigvecs[:, order].T * scales[:, None]
    return PcaModel(mean=mean, basis=basis, in_dim=in_dim, out_dim=out_dim, epsilon=epsilon)


def postprocess_batch(X: np.ndarray, pca: PcaModel, final_l2: bool = True) -> np.ndarray:
    """Apply l2norm -> center -> whiten (-> l2norm) to each row.

    All-zero rows map to all-zero outputs and skip the final normalization.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != pca.in_dim:
        raise ValidationError(
            f"descriptor dim mismatch: got {X.shape}, model expects (*, {pca.in_dim})"
        )
    zero_rows = np.linalg.norm(X, axis=1) == 0.0
    Y = (l2_normalize_rows(X) - pca.mean) @ pca.basis.T
    Y[zero_rows] = 0.0
    if final_l2:
        Y = l2_normalize_rows(Y)
    return Y


def postprocess(descriptor, pca: PcaModel) -> np.ndarray:
    """Post-process a single D-vector; returns a unit vector (or zeros for zero input)."""
    vec = np.asarray(descriptor, dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError(f"descriptor must be 1-D, got ndim={vec.ndim}")
    return postprocess_batch(vec[None, :], pca)[0]


def postprocess_map(feature_map: np.ndarray, pca: PcaModel) -> np.ndarray:
    """Post-process every spatial location of an (M, N, D) feature volume."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValidationError(f"feature map must be 3-D, got ndim={fmap.ndim}")
    M, N, D = fmap.shape
    if D != pca.in_dim:
        raise ValidationError(f"descriptor dim mismatch: map has D={D}, model expects {pca.in_dim}")
    out = postprocess_batch(fmap.reshape(M * N, D), pca)
    return out.reshape(M, N, pca.out_dim)


def save_pca(prefix, model: PcaModel, extra: dict | None = None):
    """Persist as `<prefix>.mean.blcf`, `<prefix>.basis.blcf`, `<prefix>.json`."""
    prefix = str(prefix)
    tensorio.write_tensor(prefix + ".mean.blcf", model.mean[None, :])
    tensorio.write_tensor(prefix + ".basis.blcf", model.basis)
    sidecar = {"in_dim": model.in_dim, "out_dim": model.out_dim, "epsilon": model.epsilon}
    if extra:
        sidecar.update(extra)
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def load_pca(prefix) -> tuple[PcaModel, dict]:
    """Load a persisted model; returns (model, sidecar dict)."""
    prefix = str(prefix)
    with open(prefix + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    mean = tensorio.read_tensor(prefix + ".mean.blcf").astype(np.float64)
    basis = tensorio.read_tensor(prefix + ".basis.blcf").astype(np.float64)
    if mean.ndim != 2 or mean.shape[0] != 1:
        raise ValidationError(f"{prefix}.mean.blcf: expected shape (1, D)")
    model = PcaModel(
        mean=mean[0],
        basis=basis,
        in_dim=int(sidecar["in_dim"]),
        out_dim=int(sidecar["out_dim"]),
        epsilon=float(sidecar["epsilon"]),
    )
    if model.basis.shape != (model.out_dim, model.in_dim):
        raise ValidationError(
            f"{prefix}: basis shape {model.basis.shape} does not match sidecar "
            f"({model.out_dim}, {model.in_dim})"
        )
    if model.mean.shape != (model.in_dim,):
        raise ValidationError(f"{prefix}: mean length {model.mean.shape[0]} != in_dim")
    return model, sidecar
