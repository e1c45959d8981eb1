"""Binary raster containers, PNG rendering, and the shared header convention.

Every on-disk artifact uses the same container layout: a 4-byte ASCII magic,
a UTF-8 JSON header terminated by a single newline, then a raw little-endian
payload whose size is fully determined by the header.

Containers defined here:

================  ======  =========================================  ==========================
file              magic   header fields                              payload
================  ======  =========================================  ==========================
cube (.hsc)       HSC1    dtype="f32", height, width, bands          H*W*L f32, band-sequential
labels (.hsl)     HSL1    dtype="u16", height, width                 H*W u16, row-major
segmentation      HSS1    dtype="u32", height, width, num_regions    H*W u32, row-major
================  ======  =========================================  ==========================

Band-sequential means band-major, then row-major within a band, which keeps
per-band access (projection, thresholding) contiguous.  All readers validate
sizes and reject non-finite floats outright instead of patching them up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError

MAGIC_CUBE = b"HSC1"
MAGIC_LABELS = b"HSL1"
MAGIC_SEGMENTATION = b"HSS1"
MAGIC_PCA = b"HSP1"
MAGIC_CNN = b"HSN1"

_MAX_HEADER_BYTES = 65536


# ---------------------------------------------------------------------------
# Generic container plumbing
# ---------------------------------------------------------------------------


def write_container(path: str | Path, magic: bytes, header: dict, payload: bytes) -> None:
    """Write magic + JSON header line + raw payload to ``path``."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(head)
        fh.write(b"\n")
        fh.write(payload)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    """Read a container, returning ``(header, payload)``.

    Raises FormatError on a wrong magic, an unterminated or non-JSON header,
    or a header that is not a JSON object.
    """
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise FormatError(
                f"{path}: bad magic {got!r}, expected {magic.decode('ascii')!r}"
            )
        buf = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise FormatError(f"{path}: header not terminated by newline")
            if ch == b"\n":
                break
            buf.extend(ch)
            if len(buf) > _MAX_HEADER_BYTES:
                raise FormatError(f"{path}: header exceeds {_MAX_HEADER_BYTES} bytes")
        try:
            header = json.loads(buf.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise FormatError(f"{path}: header must be a JSON object")
        payload = fh.read()
    return header, payload


def _require_dims(header: dict, path, *keys: str) -> list[int]:
    vals = []
    for key in keys:
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
        val = header[key]
        if not isinstance(val, int) or isinstance(val, bool) or val <= 0:
            raise FormatError(f"{path}: header field {key!r} must be a positive integer")
        vals.append(val)
    return vals


def _require_dtype(header: dict, path, expected: str) -> None:
    if header.get("dtype") != expected:
        raise FormatError(f"{path}: dtype {header.get('dtype')!r}, expected {expected!r}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperCube:
    """A height x width raster with ``bands`` spectral values per pixel.

    ``data`` has shape (bands, height, width), float32 — the in-memory mirror
    of the band-sequential file layout.
    """

    height: int
    width: int
    bands: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.bands, self.height, self.width):
            raise DataError(
                f"cube data shape {self.data.shape} does not match "
                f"(bands={self.bands}, height={self.height}, width={self.width})"
            )
        if not np.isfinite(self.data).all():
            raise DataError("cube contains non-finite values")

    def pixel_matrix(self) -> np.ndarray:
        """All pixels as an (H*W, bands) matrix, row-major pixel order."""
        return self.data.reshape(self.bands, -1).T

    def to_hwc(self) -> np.ndarray:
        """View of the data with shape (height, width, bands)."""
        return np.moveaxis(self.data, 0, -1)


@dataclass(frozen=True)
class GroundTruth:
    """Reference class ids per pixel; 0 means unlabeled and is never trained on."""

    height: int
    width: int
    labels: np.ndarray  # (height, width) uint16
    num_classes: int

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise DataError(
                f"label shape {self.labels.shape} != ({self.height}, {self.width})"
            )
        if self.num_classes < 1:
            raise DataError("ground truth has no nonzero classes")
        if int(self.labels.max(initial=0)) > self.num_classes:
            raise DataError("label id exceeds num_classes")


@dataclass(frozen=True)
class LabelMap:
    """Predicted class ids per pixel; 0 is reserved for unknown/unlabeled."""

    height: int
    width: int
    labels: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise DataError(
                f"label shape {self.labels.shape} != ({self.height}, {self.width})"
            )


# ---------------------------------------------------------------------------
# Cube I/O
# ---------------------------------------------------------------------------


def read_cube(path: str | Path) -> HyperCube:
    """Read an HSC1 cube file.

    Raises FormatError on a malformed header or a payload whose size does not
    match height*width*bands, and DataError on non-finite values.
    """
    header, payload = read_container(path, MAGIC_CUBE)
    _require_dtype(header, path, "f32")
    height, width, bands = _require_dims(header, path, "height", "width", "bands")
    expect = height * width * bands * 4
    if len(payload) != expect:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expect} "
            f"({height}x{width}x{bands} f32)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: cube contains non-finite values")
    return HyperCube(height=height, width=width, bands=bands, data=data.copy())


def write_cube(cube: HyperCube, path: str | Path) -> None:
    header = {"dtype": "f32", "height": cube.height, "width": cube.width, "bands": cube.bands}
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    write_container(path, MAGIC_CUBE, header, payload)


# ---------------------------------------------------------------------------
# Label raster I/O (shared by ground truth and predicted maps)
# ---------------------------------------------------------------------------


def _read_u16_raster(path: str | Path) -> tuple[int, int, np.ndarray]:
    header, payload = read_container(path, MAGIC_LABELS)
    _require_dtype(header, path, "u16")
    height, width = _require_dims(header, path, "height", "width")
    expect = height * width * 2
    if len(payload) != expect:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expect} ({height}x{width} u16)"
        )
    labels = np.frombuffer(payload, dtype="<u2").reshape(height, width)
    return height, width, labels.copy()


def read_labels(path: str | Path) -> GroundTruth:
    """Read an HSL1 raster as ground truth; errors if every label is zero."""
    height, width, labels = _read_u16_raster(path)
    num_classes = int(labels.max())
    if num_classes == 0:
        raise DataError(f"{path}: all labels are zero, nothing to train on")
    return GroundTruth(height=height, width=width, labels=labels, num_classes=num_classes)


def read_label_map(path: str | Path) -> LabelMap:
    """Read an HSL1 raster as a predicted map (zeros allowed)."""
    height, width, labels = _read_u16_raster(path)
    return LabelMap(height=height, width=width, labels=labels)


def _write_u16_raster(height: int, width: int, labels: np.ndarray, path: str | Path) -> None:
    header = {"dtype": "u16", "height": height, "width": width}
    payload = np.ascontiguousarray(labels, dtype="<u2").tobytes()
    write_container(path, MAGIC_LABELS, header, payload)


def write_labels(gt: GroundTruth, path: str | Path) -> None:
    _write_u16_raster(gt.height, gt.width, gt.labels, path)


def write_label_map(lmap: LabelMap, path: str | Path) -> None:
    _write_u16_raster(lmap.height, lmap.width, lmap.labels, path)


# ---------------------------------------------------------------------------
# Segmentation raster I/O
# ---------------------------------------------------------------------------


def write_segmentation(labels: np.ndarray, num_regions: int, path: str | Path) -> None:
    """Write a (H, W) uint32 region-id raster as an HSS1 container."""
    height, width = labels.shape
    header = {
        "dtype": "u32",
        "height": int(height),
        "width": int(width),
        "num_regions": int(num_regions),
    }
    write_container(path, MAGIC_SEGMENTATION, header, np.ascontiguousarray(labels, dtype="<u4").tobytes())


def read_segmentation(path: str | Path) -> tuple[np.ndarray, int]:
    header, payload = read_container(path, MAGIC_SEGMENTATION)
    _require_dtype(header, path, "u32")
    height, width = _require_dims(header, path, "height", "width")
    expect = height * width * 4
    if len(payload) != expect:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    labels = np.frombuffer(payload, dtype="<u4").reshape(height, width).copy()
    num_regions = header.get("num_regions", int(labels.max()))
    return labels, int(num_regions)


# ---------------------------------------------------------------------------
# Palettes and PNG rendering
# ---------------------------------------------------------------------------

# Curated, visually separated colors for class maps; id 0 is always black.
_BASE_COLORS: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)


class Palette:
    """Maps class ids to RGB triples; id 0 is fixed to black, ids never collide."""

    def __init__(self, colors: dict[int, tuple[int, int, int]]):
        colors = dict(colors)
        colors.setdefault(0, (0, 0, 0))
        if colors[0] != (0, 0, 0):
            raise DataError("palette id 0 must be black")
        seen: dict[tuple[int, int, int], int] = {}
        for cid, rgb in colors.items():
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise DataError(f"palette entry {cid} is not an RGB triple: {rgb}")
            rgb = tuple(int(v) for v in rgb)
            if rgb in seen:
                raise DataError(f"palette ids {seen[rgb]} and {cid} share color {rgb}")
            seen[rgb] = cid
            colors[cid] = rgb
        self.colors = colors

    def __contains__(self, cid: int) -> bool:
        return cid in self.colors

    def __getitem__(self, cid: int) -> tuple[int, int, int]:
        return self.colors[cid]

    @classmethod
    def default(cls, num_classes: int) -> "Palette":
        """Distinct colors for ids 1..num_classes (curated list, then a bijective
        24-bit scramble for anything beyond it)."""
        colors = {0: (0, 0, 0)}
        for cid in range(1, num_classes + 1):
            if cid <= len(_BASE_COLORS):
                colors[cid] = _BASE_COLORS[cid - 1]
            else:
                colors[cid] = _scramble_color(cid)
        return cls(colors)

    @classmethod
    def regions(cls, num_regions: int) -> "Palette":
        """Distinct colors for arbitrarily many region ids."""
        return cls({i: _scramble_color(i) for i in range(1, num_regions + 1)})


def _scramble_color(i: int) -> tuple[int, int, int]:
    # Odd multiplier => bijection on 24-bit values, and 0 is the only preimage
    # of black, so nonzero ids always get distinct nonzero colors.
    v = (i * 2654435761) & 0xFFFFFF
    return (v >> 16 & 0xFF, v >> 8 & 0xFF, v & 0xFF)


def write_label_map_png(lmap: LabelMap, palette: Palette, path: str | Path) -> None:
    """Render a label map to an 8-bit RGB PNG using ``palette``.

    Every id present in the map must have a palette entry.
    """
    present = np.unique(lmap.labels)
    missing = [int(cid) for cid in present if int(cid) not in palette]
    if missing:
        raise DataError(f"palette has no entry for label id(s) {missing}")
    lut = np.zeros((int(present.max()) + 1, 3), dtype=np.uint8)
    for cid in present:
        lut[int(cid)] = palette[int(cid)]
    rgb = lut[lmap.labels]
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def write_region_map_png(labels: np.ndarray, path: str | Path) -> None:
    """Render a segmentation (uint32 region ids) to PNG with scrambled colors."""
    ids = labels.astype(np.int64)
    v = (ids * 2654435761) & 0xFFFFFF
    rgb = np.stack([(v >> 16) & 0xFF, (v >> 8) & 0xFF, v & 0xFF], axis=-1).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
