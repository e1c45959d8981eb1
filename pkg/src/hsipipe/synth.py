"""Synthetic labeled scenes with known class distributions.

Used for self-contained demos and for verification: each class is a Gaussian
cloud in spectral space painted onto a spatial disc, so the best achievable
pixel-wise classifier is known by construction, the discs give the
segmentation stage unambiguous objects, and the whole scene fits in memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import GroundTruth, HyperCube


@dataclass(frozen=True)
class SceneTruth:
    """The generating distributions: per-class means/covariances and priors."""

    means: np.ndarray  # (C, L)
    covariances: np.ndarray  # (C, L, L)
    centers: np.ndarray  # (C, 2) disc centers (row, col)
    radius: float


def gaussian_blob_scene(size: int = 96, bands: int = 8, num_classes: int = 4,
                        radius: float = 14.0, separation: float = 6.0,
                        noise_std: float = 1.0, background_std: float = 0.05,
                        seed: int = 7) -> tuple[HyperCube, GroundTruth, SceneTruth]:
    """A ``size`` x ``size`` cube with ``num_classes`` Gaussian-blob classes on
    disjoint discs over a near-zero background.

    Class means sit ``separation`` * ``noise_std`` apart along distinct band
    patterns, all with a positive common offset so the blobs separate from the
    background on the first principal component.
    """
    if num_classes > 4:
        raise ValueError("scene layout supports up to 4 disc centers")
    rng = np.random.default_rng(seed)
    q = size // 4
    centers = np.array([[q, q], [q, 3 * q], [3 * q, q], [3 * q, 3 * q]])[:num_classes]

    base = np.full(bands, 6.0)
    means = np.tile(base, (num_classes, 1))
    for c in range(num_classes):
        pattern = np.zeros(bands)
        pattern[c % bands] = 1.0
        pattern[(c + 3) % bands] = -0.5
        means[c] += separation * noise_std * pattern
    covariances = np.stack([np.eye(bands) * noise_std ** 2 for _ in range(num_classes)])

    rows, cols = np.mgrid[0:size, 0:size]
    labels = np.zeros((size, size), dtype=np.uint16)
    data = rng.normal(0.0, background_std, size=(size, size, bands))
    for c in range(num_classes):
        disc = (rows - centers[c, 0]) ** 2 + (cols - centers[c, 1]) ** 2 <= radius ** 2
        n = int(disc.sum())
        data[disc] = rng.multivariate_normal(means[c], covariances[c], size=n)
        labels[disc] = c + 1

    cube = HyperCube(height=size, width=size, bands=bands,
                     data=np.moveaxis(data, -1, 0).astype(np.float32))
    gt = GroundTruth(height=size, width=size, labels=labels, num_classes=num_classes)
    return cube, gt, SceneTruth(means=means, covariances=covariances,
                                centers=centers, radius=radius)
