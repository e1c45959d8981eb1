"""Training-set preparation: class balancing, standardization, PCA, patches.

The chain mirrors how the classifiers consume pixels: weak classes are
oversampled by random duplication up to the largest class count, features are
standardized to zero mean / unit variance (population convention), PCA reduces
dimensionality to the smallest component count reaching the requested variance
fraction, and patch extraction serves the convolutional classifier from a
zero-padded raster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .formats import MAGIC_PCA, GroundTruth, read_container, write_container

DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class LabeledPixelSet:
    """Feature rows paired with nonzero class ids, aligned by index."""

    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) integer, all nonzero

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0 or self.features.shape[1] == 0:
            raise DataError(f"features must be a nonempty N x D matrix, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must align with feature rows")
        if (np.asarray(self.labels) == 0).any():
            raise DataError("labeled set may not contain class id 0")

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


# ---------------------------------------------------------------------------
# Oversampling
# ---------------------------------------------------------------------------


def oversample_indices(labels: np.ndarray, rng_seed: int) -> np.ndarray:
    """Row indices that balance every class to the maximum class count.

    The result starts with ``arange(N)`` (all originals, original order),
    followed by uniform-random duplicate indices drawn with replacement,
    grouped by ascending class id.  Deterministic for a fixed seed.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot oversample an empty set")
    rng = np.random.default_rng(rng_seed)
    ids, counts = np.unique(labels, return_counts=True)
    target = int(counts.max())
    parts = [np.arange(labels.size, dtype=np.int64)]
    for cid, count in zip(ids, counts):
        need = target - int(count)
        if need == 0:
            continue
        rows = np.flatnonzero(labels == cid)
        parts.append(rows[rng.integers(0, rows.size, size=need)])
    return np.concatenate(parts)


def oversample(pixel_set: LabeledPixelSet, rng_seed: int) -> LabeledPixelSet:
    """Balance class counts by duplicating randomly chosen original rows."""
    idx = oversample_indices(pixel_set.labels, rng_seed)
    return LabeledPixelSet(features=pixel_set.features[idx], labels=pixel_set.labels[idx])


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature mean and (population) standard deviation."""

    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,) strictly positive

    def to_json_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ScalerParams":
        return cls(mean=np.asarray(obj["mean"], dtype=np.float64),
                   std=np.asarray(obj["std"], dtype=np.float64))


def fit_standardizer(pixel_set: LabeledPixelSet) -> ScalerParams:
    """Fit per-feature mean/std; features with std below 1e-12 pass through
    untouched (std treated as 1) instead of dividing by zero."""
    X = np.asarray(pixel_set.features, dtype=np.float64)
    if X.shape[0] < 2:
        raise DataError("standardizer needs at least 2 samples")
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population (1/N), matching the PCA covariance convention
    std = np.where(std < DEGENERATE_STD, 1.0, std)
    return ScalerParams(mean=mean, std=std)


def apply_standardizer(params: ScalerParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.mean.shape[0]:
        raise DataError(
            f"feature dimension {features.shape[-1]} != scaler dimension {params.mean.shape[0]}"
        )
    return (features - params.mean) / params.std


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    """Orthonormal components in eigenvalue-descending order.

    ``components`` is (K, D); K is the smallest count whose cumulative
    explained-variance ratio reaches ``retained_fraction``.
    """

    mean: np.ndarray  # (D,)
    components: np.ndarray  # (K, D)
    explained_variance: np.ndarray  # (K,) non-increasing
    retained_fraction: float
    total_variance: float

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def num_components(self) -> int:
        return self.components.shape[0]


def fit_pca(features: np.ndarray, retained_fraction: float) -> PcaModel:
    """Eigendecompose the D x D population covariance and keep the smallest
    component count whose cumulative variance ratio reaches ``retained_fraction``.

    Eigenvector signs are fixed so each component's largest-magnitude entry is
    positive, making the output deterministic across platforms.
    """
    if not 0.0 < retained_fraction <= 1.0:
        raise DataError(f"retained_fraction must be in (0, 1], got {retained_fraction}")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("PCA needs an N x D matrix with N >= 2")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / X.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]
    eigvals = np.clip(eigvals, 0.0, None)  # eigh can return -1e-17 for null directions
    total = float(eigvals.sum())
    if total <= 0.0:
        raise NumericError("covariance has rank 0, PCA is undefined")
    ratios = np.cumsum(eigvals) / total
    k = int(np.searchsorted(ratios, retained_fraction) + 1)
    k = min(k, eigvals.size)
    components = eigvecs[:, :k].T.copy()
    flip = components[np.arange(k), np.abs(components).argmax(axis=1)] < 0
    components[flip] *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=eigvals[:k].copy(),
        retained_fraction=float(retained_fraction),
        total_variance=total,
    )


def apply_pca(model: PcaModel, features: np.ndarray) -> np.ndarray:
    """Project ``features`` onto the retained components: (x - mean) @ components.T."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != model.dim:
        raise DataError(f"feature dimension {features.shape[-1]} != PCA dimension {model.dim}")
    return (features - model.mean) @ model.components.T


def save_pca(model: PcaModel, path: str | Path) -> None:
    """Write a PcaModel as an HSP1 container (f64 payload: mean, components,
    explained variance, concatenated)."""
    header = {
        "dtype": "f64",
        "dim": model.dim,
        "components": model.num_components,
        "retained_fraction": model.retained_fraction,
        "total_variance": model.total_variance,
    }
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (model.mean, model.components, model.explained_variance)
    )
    write_container(path, MAGIC_PCA, header, payload)


def load_pca(path: str | Path) -> PcaModel:
    header, payload = read_container(path, MAGIC_PCA)
    if header.get("dtype") != "f64":
        raise DataError(f"{path}: unsupported PCA payload dtype {header.get('dtype')!r}")
    dim = int(header["dim"])
    k = int(header["components"])
    expect = (dim + k * dim + k) * 8
    if len(payload) != expect:
        raise DataError(f"{path}: PCA payload is {len(payload)} bytes, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f8")
    mean = flat[:dim].copy()
    components = flat[dim:dim + k * dim].reshape(k, dim).copy()
    explained = flat[dim + k * dim:].copy()
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=explained,
        retained_fraction=float(header["retained_fraction"]),
        total_variance=float(header["total_variance"]),
    )


def save_scaler(params: ScalerParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_json_dict()), encoding="utf-8")


def load_scaler(path: str | Path) -> ScalerParams:
    return ScalerParams.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchSet:
    """Square windows centered on labeled pixels, zero-padded at borders."""

    patches: np.ndarray  # (N, window, window, K) float32
    labels: np.ndarray  # (N,)
    window: int


def patches_at(feature_raster: np.ndarray, rows: np.ndarray, cols: np.ndarray, window: int) -> np.ndarray:
    """Extract (window x window x K) patches centered on the given pixels.

    ``feature_raster`` is (H, W, K); pixels outside the raster contribute zeros.
    """
    if window < 1 or window % 2 == 0:
        raise DataError(f"window must be odd and >= 1, got {window}")
    pad = window // 2
    padded = np.pad(feature_raster, ((pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    # windows: (H, W, K, window, window) -> gather centers, put K last
    out = windows[rows, cols]
    return np.moveaxis(out, 1, -1).astype(np.float32)


def extract_patches(feature_raster: np.ndarray, gt: GroundTruth, window: int) -> PatchSet:
    """One patch per nonzero-label pixel, in row-major pixel order."""
    if feature_raster.shape[:2] != (gt.height, gt.width):
        raise DataError(
            f"raster shape {feature_raster.shape[:2]} != labels ({gt.height}, {gt.width})"
        )
    rows, cols = np.nonzero(gt.labels)
    patches = patches_at(feature_raster, rows, cols, window)
    return PatchSet(patches=patches, labels=gt.labels[rows, cols].astype(np.int64), window=window)
