"""Gaussian maximum-likelihood pixel classifier.

One multivariate Gaussian per class, fit by sample moments; pixels are scored
by the joint log score ln[P(C) * p(x|C)] (the evidence term is constant over
classes and dropped, as is the -K/2 ln 2pi constant).  Scoring stays in log
space throughout: raw densities underflow once the feature dimension grows
past a few dozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .formats import LabelMap
from .preprocess import LabeledPixelSet

#: Relative ridge applied per class when none is given: 1e-6 * trace(cov)/K.
AUTO_RIDGE_SCALE = 1e-6


@dataclass(frozen=True)
class GmlClassModel:
    """Moments of one class. ``covariance`` already includes the ridge;
    ``precision`` and ``log_det`` belong to that regularized matrix."""

    class_id: int
    prior: float
    mean: np.ndarray  # (K,)
    covariance: np.ndarray  # (K, K)
    precision: np.ndarray = field(repr=False, default=None)
    log_det: float = 0.0


@dataclass(frozen=True)
class GmlModel:
    """Per-class Gaussians plus the unknown-label floor.

    ``threshold`` applies to the max joint log score; -inf disables the
    unknown rule so every pixel receives a class.
    """

    classes: list[GmlClassModel]
    threshold: float = -math.inf

    @property
    def dim(self) -> int:
        return self.classes[0].mean.shape[0]

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([c.class_id for c in self.classes], dtype=np.int64)


def _invert_spd(cov: np.ndarray, class_id: int) -> tuple[np.ndarray, float]:
    """Cholesky-based inverse and log-determinant; raises NumericError if the
    matrix is not positive definite."""
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"class {class_id}: covariance not positive definite (add ridge)"
        ) from exc
    log_det = 2.0 * float(np.log(np.diag(chol)).sum())
    inv_chol = np.linalg.inv(chol)
    precision = inv_chol.T @ inv_chol
    precision = (precision + precision.T) / 2.0
    return precision, log_det


def fit_gml(train: LabeledPixelSet, ridge: float | None = None,
            threshold: float = -math.inf) -> GmlModel:
    """Fit one Gaussian per class: sample mean, population covariance + ridge*I,
    prior = class count / N.

    ``ridge=None`` uses 1e-6 * trace(cov)/K per class; an explicit value is
    added as-is.  Every class needs at least 2 samples.
    """
    if ridge is not None and ridge < 0:
        raise DataError(f"ridge must be >= 0, got {ridge}")
    X = np.asarray(train.features, dtype=np.float64)
    y = np.asarray(train.labels)
    n_total, dim = X.shape
    classes = []
    for cid in np.unique(y):
        rows = X[y == cid]
        if rows.shape[0] < 2:
            raise DataError(f"class {int(cid)} has {rows.shape[0]} sample(s), need >= 2")
        mean = rows.mean(axis=0)
        centered = rows - mean
        cov = centered.T @ centered / rows.shape[0]
        cov = (cov + cov.T) / 2.0
        eff_ridge = AUTO_RIDGE_SCALE * float(np.trace(cov)) / dim if ridge is None else ridge
        cov_reg = cov + eff_ridge * np.eye(dim)
        precision, log_det = _invert_spd(cov_reg, int(cid))
        classes.append(GmlClassModel(
            class_id=int(cid),
            prior=rows.shape[0] / n_total,
            mean=mean,
            covariance=cov_reg,
            precision=precision,
            log_det=log_det,
        ))
    return GmlModel(classes=classes, threshold=threshold)


def log_posterior(model: GmlModel, pixels: np.ndarray) -> np.ndarray:
    """Joint log scores ln P(C) - 0.5 ln det(cov) - 0.5 maha(x, C), one column
    per class in ascending class-id order.

    Accepts a single K-vector or an (N, K) matrix; returns (C,) or (N, C).
    """
    x = np.asarray(pixels, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise DataError(f"pixel dimension {x.shape[1]} != model dimension {model.dim}")
    scores = np.empty((x.shape[0], len(model.classes)), dtype=np.float64)
    for j, cls in enumerate(model.classes):
        centered = x - cls.mean
        maha = np.einsum("ni,ij,nj->n", centered, cls.precision, centered)
        scores[:, j] = math.log(cls.prior) - 0.5 * cls.log_det - 0.5 * maha
    return scores[0] if single else scores


def classify_pixels(model: GmlModel, pixels: np.ndarray) -> np.ndarray:
    """Labels for an (N, K) matrix: argmax score, smallest class id on ties,
    0 where the max score falls below the threshold."""
    scores = log_posterior(model, np.atleast_2d(pixels))
    best = scores.argmax(axis=1)  # first occurrence == smallest class id
    labels = model.class_ids[best].astype(np.uint16)
    if model.threshold != -math.inf:
        labels[scores.max(axis=1) < model.threshold] = 0
    return labels


def classify_gml(model: GmlModel, feature_raster: np.ndarray, threads: int = 1) -> LabelMap:
    """Classify every pixel of an (H, W, K) raster into a LabelMap."""
    height, width = feature_raster.shape[:2]
    flat = np.asarray(feature_raster, dtype=np.float64).reshape(-1, feature_raster.shape[-1])
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(flat.shape[0]), threads)
        labels = np.empty(flat.shape[0], dtype=np.uint16)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, part in zip(chunks, pool.map(lambda i: classify_pixels(model, flat[i]), chunks)):
                labels[idx] = part
    else:
        labels = classify_pixels(model, flat)
    return LabelMap(height=height, width=width, labels=labels.reshape(height, width))


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_gml(model: GmlModel, path: str | Path) -> None:
    """JSON checkpoint: priors, means, regularized covariances, threshold.

    Precision matrices are recomputed on load, so the JSON round trip is exact
    (floats serialize via repr and parse back bit-identical).
    """
    obj = {
        "threshold": None if model.threshold == -math.inf else model.threshold,
        "classes": [
            {
                "class_id": c.class_id,
                "prior": c.prior,
                "mean": c.mean.tolist(),
                "covariance": c.covariance.tolist(),
            }
            for c in model.classes
        ],
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_gml(path: str | Path) -> GmlModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    classes = []
    for entry in obj["classes"]:
        cov = np.asarray(entry["covariance"], dtype=np.float64)
        precision, log_det = _invert_spd(cov, entry["class_id"])
        classes.append(GmlClassModel(
            class_id=int(entry["class_id"]),
            prior=float(entry["prior"]),
            mean=np.asarray(entry["mean"], dtype=np.float64),
            covariance=cov,
            precision=precision,
            log_det=log_det,
        ))
    classes.sort(key=lambda c: c.class_id)
    threshold = obj.get("threshold")
    return GmlModel(classes=classes, threshold=-math.inf if threshold is None else float(threshold))
