"""Marker-controlled watershed: mask, distance transform, markers, flood.

The stage chain is: threshold the first feature band into a foreground mask,
compute the exact Euclidean distance to the background, place markers on the
distance map's local maxima, then priority-flood the negated distance map
(or a gradient image) so each marker grows one catchment basin.  8-connectivity
is used throughout so the distance, marker, and flood steps agree.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SegmentationMap:
    """Region ids per pixel; 0 marks background, ids 1..num_regions are basins."""

    height: int
    width: int
    labels: np.ndarray  # (height, width) uint32
    num_regions: int

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise DataError(
                f"segmentation shape {self.labels.shape} != ({self.height}, {self.width})"
            )


# ---------------------------------------------------------------------------
# Foreground mask
# ---------------------------------------------------------------------------


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing between-class variance over a ``bins``-bin histogram.

    Returns the upper edge of the chosen bin; ties resolve to the lowest
    threshold.  Raises DataError when the input is constant.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise DataError("cannot threshold a constant band")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    total = hist.sum()
    w0 = np.cumsum(hist)
    centers = (edges[:-1] + edges[1:]) / 2.0
    mass = np.cumsum(hist * centers)
    mean_total = mass[-1] / total
    valid = (w0 > 0) & (w0 < total)
    w0f = w0 / total
    # between-class variance w0*w1*(mu0-mu1)^2 rewritten via the total mean
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = np.where(valid, (mean_total * w0f - mass / total) ** 2 / (w0f * (1 - w0f)), -1.0)
    split = int(sigma_b.argmax())
    return float(edges[split + 1])


def foreground_mask(feature_raster: np.ndarray) -> np.ndarray:
    """Otsu on the first feature band; pixels above the threshold are foreground."""
    if feature_raster.ndim != 3 or feature_raster.shape[-1] < 1:
        raise DataError("expected an (H, W, K) raster with K >= 1")
    band = np.asarray(feature_raster[..., 0], dtype=np.float64)
    thresh = otsu_threshold(band)
    return band > thresh


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform
# ---------------------------------------------------------------------------


def distance_transform_squared(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest background pixel.

    Two-phase scan (columns, then a lower-envelope sweep per row), entirely in
    integer arithmetic, so results equal the all-pairs minimum exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DataError("mask must be 2-D")
    height, width = mask.shape
    if mask.all():
        raise DataError("mask has no background pixel; distances are undefined")
    inf = height + width  # larger than any in-grid coordinate span

    # Phase 1: per-column vertical distance to background (vectorized over columns).
    g = np.empty((height, width), dtype=np.int64)
    g[0] = np.where(mask[0], inf, 0)
    for i in range(1, height):
        g[i] = np.where(mask[i], np.minimum(g[i - 1] + 1, inf), 0)
    for i in range(height - 2, -1, -1):
        np.minimum(g[i], g[i + 1] + 1, out=g[i])

    # Phase 2: per row, lower envelope of the parabolas j -> (j-q)^2 + g[q]^2.
    out = np.empty((height, width), dtype=np.int64)
    g2 = g * g
    s = np.empty(width, dtype=np.int64)  # parabola sites
    t = np.empty(width, dtype=np.int64)  # segment start positions
    for i in range(height):
        row_g2 = g2[i]
        q = 0
        s[0] = 0
        t[0] = 0
        for u in range(1, width):
            while q >= 0 and (t[q] - s[q]) ** 2 + row_g2[s[q]] > (t[q] - u) ** 2 + row_g2[u]:
                q -= 1
            if q < 0:
                q = 0
                s[0] = u
            else:
                w = 1 + (u * u - s[q] * s[q] + row_g2[u] - row_g2[s[q]]) // (2 * (u - s[q]))
                if w < width:
                    q += 1
                    s[q] = u
                    t[q] = w
        for u in range(width - 1, -1, -1):
            out[i, u] = (u - s[q]) ** 2 + row_g2[s[q]]
            if u == t[q]:
                q -= 1
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest background pixel (0 on background)."""
    return np.sqrt(distance_transform_squared(mask).astype(np.float64))


# ---------------------------------------------------------------------------
# Markers
# ---------------------------------------------------------------------------


def _window_max(values: np.ndarray, radius: int) -> np.ndarray:
    """Maximum over a (2*radius+1)^2 window, separable, edge-padded with -inf."""
    pad = np.pad(values, radius, constant_values=-np.inf)
    rows = np.lib.stride_tricks.sliding_window_view(pad, 2 * radius + 1, axis=1).max(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(rows, 2 * radius + 1, axis=0).max(axis=-1)


def find_markers(distance: np.ndarray, min_distance: int = 7, min_height: float = 1.0) -> np.ndarray:
    """Local maxima of the distance map, one marker per basin seed.

    A pixel is a candidate when it is foreground (distance > 0), at least
    ``min_height`` high, and not exceeded anywhere in its
    (2*min_distance+1)^2 window.  Equal-valued candidates within one window
    collapse to the lexicographically smallest coordinate.  Any foreground
    component left without a marker by that suppression regains one at its
    own maximum, so every basin keeps a seed.  Ids follow row-major order of
    the returned coordinates.

    Returns an (M, 2) int array of (row, col); raises DataError when no marker
    qualifies.
    """
    if min_distance < 1:
        raise DataError(f"min_distance must be >= 1, got {min_distance}")
    distance = np.asarray(distance, dtype=np.float64)
    wmax = _window_max(distance, min_distance)
    candidates = (distance > 0) & (distance >= min_height) & (distance == wmax)
    height, width = distance.shape
    kept: list[tuple[int, int]] = []
    kept_mask = np.zeros_like(candidates)
    for r, c in zip(*np.nonzero(candidates)):  # np.nonzero yields row-major = lex order
        r0, r1 = max(0, r - min_distance), min(height, r + min_distance + 1)
        c0, c1 = max(0, c - min_distance), min(width, c + min_distance + 1)
        window_kept = kept_mask[r0:r1, c0:c1]
        if (window_kept & (distance[r0:r1, c0:c1] == distance[r, c])).any():
            continue
        kept.append((int(r), int(c)))
        kept_mask[r, c] = True

    # Re-seed any foreground component that lost all its maxima to suppression.
    comp = label_components(distance > 0)
    seeded = {int(comp[r, c]) for r, c in kept}
    for comp_id in range(1, int(comp.max()) + 1):
        if comp_id in seeded:
            continue
        rows, cols = np.nonzero(comp == comp_id)
        vals = distance[rows, cols]
        best = vals == vals.max()
        order = np.lexsort((cols[best], rows[best]))
        kept.append((int(rows[best][order[0]]), int(cols[best][order[0]])))

    if not kept:
        raise DataError("no markers found; mask is degenerate")
    kept.sort()
    return np.array(kept, dtype=np.int64)


def label_components(mask: np.ndarray) -> np.ndarray:
    """8-connected component labels (0 on background), BFS, row-major ids."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.int64)
    current = 0
    for r, c in zip(*np.nonzero(mask)):
        if labels[r, c]:
            continue
        current += 1
        stack = [(r, c)]
        labels[r, c] = current
        while stack:
            pr, pc = stack.pop()
            for dr, dc in _NEIGHBORS:
                nr, nc = pr + dr, pc + dc
                if 0 <= nr < height and 0 <= nc < width and mask[nr, nc] and not labels[nr, nc]:
                    labels[nr, nc] = current
                    stack.append((nr, nc))
    return labels


# ---------------------------------------------------------------------------
# Priority flood
# ---------------------------------------------------------------------------


def watershed_flood(elevation: np.ndarray, markers: np.ndarray, mask: np.ndarray) -> SegmentationMap:
    """Grow one region per marker by flooding ``elevation`` lowest-first.

    Pixels pop in nondecreasing elevation order with ties broken by insertion
    order; each popped pixel claims its unclaimed 8-neighbors inside the mask.
    Background is never claimed.  Single-threaded by design: correctness
    depends on the global pop order.
    """
    elevation = np.asarray(elevation, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if elevation.shape != mask.shape:
        raise DataError(f"elevation shape {elevation.shape} != mask shape {mask.shape}")
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.uint32)
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for i, (r, c) in enumerate(np.asarray(markers, dtype=np.int64)):
        if not mask[r, c]:
            raise DataError(f"marker {i + 1} at ({r}, {c}) lies on background")
        labels[r, c] = i + 1
        heapq.heappush(heap, (float(elevation[r, c]), counter, int(r), int(c)))
        counter += 1
    while heap:
        _, _, r, c = heapq.heappop(heap)
        region = labels[r, c]
        for dr, dc in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < height and 0 <= nc < width and mask[nr, nc] and not labels[nr, nc]:
                labels[nr, nc] = region
                heapq.heappush(heap, (float(elevation[nr, nc]), counter, nr, nc))
                counter += 1
    return SegmentationMap(height=height, width=width, labels=labels,
                           num_regions=int(len(markers)))


# ---------------------------------------------------------------------------
# Gradient elevation (alternative to the negated distance map)
# ---------------------------------------------------------------------------


def sobel_magnitude(band: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with edge-replicated borders."""
    band = np.asarray(band, dtype=np.float64)
    p = np.pad(band, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def segment(feature_raster: np.ndarray, mask: np.ndarray | None = None,
            min_distance: int = 7, min_height: float = 1.0,
            elevation_mode: str = "distance") -> SegmentationMap:
    """Full marker-controlled watershed over a feature raster.

    ``mask`` defaults to Otsu on the first band.  ``elevation_mode`` selects
    the flooded surface: "distance" floods the negated distance map,
    "gradient" floods the Sobel magnitude of the first band.
    """
    if mask is None:
        mask = foreground_mask(feature_raster)
    distance = distance_transform(mask)
    markers = find_markers(distance, min_distance=min_distance, min_height=min_height)
    if elevation_mode == "distance":
        elevation = -distance
    elif elevation_mode == "gradient":
        elevation = sobel_magnitude(feature_raster[..., 0])
    else:
        raise DataError(f"unknown elevation mode {elevation_mode!r}")
    return watershed_flood(elevation, markers, mask)
