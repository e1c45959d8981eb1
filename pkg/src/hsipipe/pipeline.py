"""End-to-end orchestration shared by the one-shot and stage-wise commands.

Both execution styles call the exact same functions on the exact same
intermediate values: the projected feature raster is float32 (the cube
container's precision), pixel index lists live in the split plan, and every
model checkpoint round-trips its floats exactly.  Stage-wise runs therefore
reproduce one-shot runs bit for bit.

Two split protocols are supported:

* ``split-first`` (default): split the labeled pixels 3:1, then oversample
  only the training fold.  No sample ever appears on both sides.
* ``oversample-first``: oversample the full labeled set to balance, then
  split the resulting multiset.  Duplicates of one pixel can land on both
  sides, which inflates test scores; the order is kept available because it
  matches how the published accuracy figures for this method family were
  produced.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import metrics as eval_mod
from . import formats, watershed
from .errors import DataError
from .fusion import majority_vote_fuse, write_fusion_report
from .gml import GmlModel, classify_gml, fit_gml, load_gml, save_gml
from .preprocess import (
    LabeledPixelSet,
    PatchSet,
    PcaModel,
    ScalerParams,
    apply_pca,
    apply_standardizer,
    fit_pca,
    fit_standardizer,
    load_pca,
    load_scaler,
    oversample_indices,
    patches_at,
    save_pca,
    save_scaler,
)

METHODS = ("gml", "gml-w", "cnn", "cnn-w")
PROTOCOLS = ("split-first", "oversample-first")


def _load_toml(path: Path) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml
    with open(path, "rb") as fh:
        return toml.load(fh)


@dataclass
class PipelineConfig:
    """One flat record of every knob; the manifest serializes it verbatim."""

    cube: str = ""
    labels: str = ""
    out_dir: str = "out"
    methods: list[str] = field(default_factory=lambda: ["gml", "gml-w"])
    retained_variance: float = 0.999
    window: int = 5
    seed: int = 0
    ratio: tuple[int, int] = (3, 1)
    protocol: str = "split-first"
    stratified: bool = True
    exclude_zero_votes: bool = False
    threads: int = 1
    gml_ridge: float | None = None
    gml_threshold: float = -math.inf
    cnn_epochs: int = 50
    cnn_batch_size: int = 64
    cnn_learning_rate: float = 1e-2
    cnn_momentum: float = 0.9
    ws_min_distance: int = 7
    ws_min_height: float = 1.0
    ws_elevation: str = "distance"
    ws_mask: str = "otsu"

    # Seeds derived from the master seed; recorded in the manifest.
    @property
    def split_seed(self) -> int:
        return self.seed

    @property
    def oversample_seed(self) -> int:
        return self.seed + 1

    @property
    def cnn_seed(self) -> int:
        return self.seed + 2

    def validate(self) -> None:
        if not 0.0 < self.retained_variance <= 1.0:
            raise DataError(f"retained_variance must be in (0, 1]: {self.retained_variance}")
        if self.window < 1 or self.window % 2 == 0:
            raise DataError(f"window must be odd and >= 1: {self.window}")
        if len(self.ratio) != 2 or self.ratio[0] < 1 or self.ratio[1] < 1:
            raise DataError(f"ratio must be two positive integers: {self.ratio}")
        if self.protocol not in PROTOCOLS:
            raise DataError(f"protocol must be one of {PROTOCOLS}: {self.protocol!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise DataError(f"unknown method(s) {bad}; choose from {METHODS}")
        if not self.methods:
            raise DataError("at least one method is required")
        if self.gml_ridge is not None and self.gml_ridge < 0:
            raise DataError(f"gml_ridge must be >= 0: {self.gml_ridge}")
        if self.ws_min_distance < 1:
            raise DataError(f"ws_min_distance must be >= 1: {self.ws_min_distance}")
        if self.ws_min_height < 0:
            raise DataError(f"ws_min_height must be >= 0: {self.ws_min_height}")
        if self.ws_elevation not in ("distance", "gradient"):
            raise DataError(f"ws_elevation must be distance or gradient: {self.ws_elevation!r}")
        if self.ws_mask not in ("otsu", "labels"):
            raise DataError(f"ws_mask must be otsu or labels: {self.ws_mask!r}")
        if self.threads < 1:
            raise DataError(f"threads must be >= 1: {self.threads}")
        self.cnn_train_config()  # range-checks the cnn fields

    def cnn_train_config(self) -> cnn_mod.TrainConfig:
        return cnn_mod.TrainConfig(
            epochs=self.cnn_epochs,
            batch_size=self.cnn_batch_size,
            learning_rate=self.cnn_learning_rate,
            momentum=self.cnn_momentum,
            rng_seed=self.cnn_seed,
        )

    def to_json_dict(self) -> dict:
        obj = asdict(self)
        obj["ratio"] = list(self.ratio)
        obj["gml_threshold"] = None if self.gml_threshold == -math.inf else self.gml_threshold
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        if "ratio" in obj:
            obj["ratio"] = tuple(int(v) for v in obj["ratio"])
        if obj.get("gml_threshold") is None:
            obj["gml_threshold"] = -math.inf
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_toml(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(_load_toml(Path(path)))


# ---------------------------------------------------------------------------
# Split plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """The sampled train/test pixel index lists, ready to serialize.

    Indices are flat row-major positions in the raster.  ``train_pixels`` is
    a multiset (oversampling duplicates entries); under the oversample-first
    protocol ``test_pixels`` is one too.
    """

    protocol: str
    stratified: bool
    seed: int
    oversample_seed: int
    ratio: tuple[int, int]
    train_pixels: np.ndarray
    test_pixels: np.ndarray


def build_split_plan(gt: formats.GroundTruth, config: PipelineConfig) -> SplitPlan:
    flat_labels = gt.labels.ravel()
    labeled = np.flatnonzero(flat_labels)
    labels = flat_labels[labeled].astype(np.int64)
    splitter = (eval_mod.stratified_split_indices if config.stratified
                else eval_mod.global_split_indices)
    if config.protocol == "oversample-first":
        ov = oversample_indices(labels, config.oversample_seed)
        ov_pixels = labeled[ov]
        parts = splitter(labels[ov], ratio=config.ratio, seed=config.split_seed)
        train_pixels = ov_pixels[parts.train]
        test_pixels = ov_pixels[parts.test]
    else:
        parts = splitter(labels, ratio=config.ratio, seed=config.split_seed)
        ov = oversample_indices(labels[parts.train], config.oversample_seed)
        train_pixels = labeled[parts.train[ov]]
        test_pixels = labeled[parts.test]
    return SplitPlan(
        protocol=config.protocol,
        stratified=config.stratified,
        seed=config.split_seed,
        oversample_seed=config.oversample_seed,
        ratio=config.ratio,
        train_pixels=train_pixels,
        test_pixels=test_pixels,
    )


def save_split_plan(plan: SplitPlan, path: str | Path) -> None:
    obj = {
        "protocol": plan.protocol,
        "stratified": plan.stratified,
        "seed": plan.seed,
        "oversample_seed": plan.oversample_seed,
        "ratio": list(plan.ratio),
        "train_pixels": plan.train_pixels.tolist(),
        "test_pixels": plan.test_pixels.tolist(),
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_split_plan(path: str | Path) -> SplitPlan:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitPlan(
        protocol=obj["protocol"],
        stratified=bool(obj["stratified"]),
        seed=int(obj["seed"]),
        oversample_seed=int(obj["oversample_seed"]),
        ratio=tuple(int(v) for v in obj["ratio"]),
        train_pixels=np.asarray(obj["train_pixels"], dtype=np.int64),
        test_pixels=np.asarray(obj["test_pixels"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Preprocess: fit on the training multiset, project the whole cube
# ---------------------------------------------------------------------------


def fit_preprocess(cube: formats.HyperCube, gt: formats.GroundTruth,
                   plan: SplitPlan, retained_variance: float) -> tuple[ScalerParams, PcaModel]:
    rows = cube.pixel_matrix()[plan.train_pixels]
    labels = gt.labels.ravel()[plan.train_pixels]
    train_set = LabeledPixelSet(features=rows, labels=labels)
    scaler = fit_standardizer(train_set)
    pca = fit_pca(apply_standardizer(scaler, rows), retained_variance)
    return scaler, pca


def project_cube(cube: formats.HyperCube, scaler: ScalerParams,
                 pca: PcaModel) -> np.ndarray:
    """(H, W, K) float32 feature raster: standardize, project, cast."""
    projected = apply_pca(pca, apply_standardizer(scaler, cube.pixel_matrix()))
    return projected.reshape(cube.height, cube.width, -1).astype(np.float32)


def features_to_cube(features: np.ndarray) -> formats.HyperCube:
    height, width, bands = features.shape
    return formats.HyperCube(height=height, width=width, bands=bands,
                             data=np.moveaxis(features, -1, 0).astype(np.float32))


def train_pixel_set(features: np.ndarray, gt: formats.GroundTruth,
                    plan: SplitPlan) -> LabeledPixelSet:
    flat = features.reshape(-1, features.shape[-1])
    return LabeledPixelSet(features=flat[plan.train_pixels],
                           labels=gt.labels.ravel()[plan.train_pixels].astype(np.int64))


def train_patch_set(features: np.ndarray, gt: formats.GroundTruth,
                    plan: SplitPlan, window: int) -> PatchSet:
    rows, cols = np.unravel_index(plan.train_pixels, (gt.height, gt.width))
    patches = patches_at(features, rows, cols, window)
    return PatchSet(patches=patches,
                    labels=gt.labels.ravel()[plan.train_pixels].astype(np.int64),
                    window=window)


def train_gml_model(features: np.ndarray, gt: formats.GroundTruth, plan: SplitPlan,
                    config: PipelineConfig) -> GmlModel:
    return fit_gml(train_pixel_set(features, gt, plan),
                   ridge=config.gml_ridge, threshold=config.gml_threshold)


def train_cnn_model(features: np.ndarray, gt: formats.GroundTruth, plan: SplitPlan,
                    config: PipelineConfig) -> tuple[cnn_mod.CnnModel, list[float]]:
    patch_set = train_patch_set(features, gt, plan, config.window)
    num_classes = int(np.unique(patch_set.labels).size)
    spec = cnn_mod.CnnSpec(
        input_window=config.window,
        input_channels=features.shape[-1],
        num_classes=num_classes,
        conv1_filters=features.shape[-1],
    )
    return cnn_mod.train_cnn(spec, patch_set, config.cnn_train_config())


def segment_features(features: np.ndarray, gt: formats.GroundTruth | None,
                     config: PipelineConfig) -> watershed.SegmentationMap:
    if config.ws_mask == "labels":
        if gt is None:
            raise DataError("ws_mask='labels' needs a ground-truth raster")
        mask = gt.labels > 0
    else:
        mask = watershed.foreground_mask(features)
    return watershed.segment(features, mask=mask,
                             min_distance=config.ws_min_distance,
                             min_height=config.ws_min_height,
                             elevation_mode=config.ws_elevation)


# ---------------------------------------------------------------------------
# One-shot run
# ---------------------------------------------------------------------------


def _needs(methods: list[str], base: str) -> bool:
    return base in methods or f"{base}-w" in methods


def run_pipeline(config: PipelineConfig,
                 cube: formats.HyperCube | None = None,
                 gt: formats.GroundTruth | None = None) -> dict:
    """Execute every stage needed by ``config.methods`` and write all artifacts.

    Returns the manifest dict (also written to ``out_dir/manifest.json``).
    Raises with a ``failed_stage`` manifest on disk if any stage errors.
    """
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "config": config.to_json_dict(),
        "seeds": {"split": config.split_seed, "oversample": config.oversample_seed,
                  "cnn": config.cnn_seed},
        "completed": [],
        "outputs": [],
    }

    def done(stage: str, *paths: Path) -> None:
        manifest["completed"].append(stage)
        manifest["outputs"].extend(str(p.relative_to(out)) for p in paths)

    stage = "load"
    try:
        if cube is None:
            cube = formats.read_cube(config.cube)
        if gt is None:
            gt = formats.read_labels(config.labels)
        if (cube.height, cube.width) != (gt.height, gt.width):
            raise DataError(
                f"cube {cube.height}x{cube.width} does not match "
                f"labels {gt.height}x{gt.width}"
            )
        done("load")

        stage = "preprocess"
        plan = build_split_plan(gt, config)
        save_split_plan(plan, out / "split.json")
        scaler, pca = fit_preprocess(cube, gt, plan, config.retained_variance)
        save_scaler(scaler, out / "scaler.json")
        save_pca(pca, out / "pca.hsp")
        features = project_cube(cube, scaler, pca)
        formats.write_cube(features_to_cube(features), out / "features.hsc")
        done("preprocess", out / "split.json", out / "scaler.json",
             out / "pca.hsp", out / "features.hsc")

        maps: dict[str, formats.LabelMap] = {}
        palette = formats.Palette.default(gt.num_classes)

        if _needs(config.methods, "gml"):
            stage = "train-gml"
            gml_model = train_gml_model(features, gt, plan, config)
            save_gml(gml_model, out / "gml.json")
            done("train-gml", out / "gml.json")

            stage = "classify-gml"
            maps["gml"] = classify_gml(gml_model, features, threads=config.threads)
            _write_map(maps["gml"], palette, out, "gml")
            done("classify-gml", out / "gml_map.hsl", out / "gml_map.png")

        if _needs(config.methods, "cnn"):
            stage = "train-cnn"
            cnn_model, losses = train_cnn_model(features, gt, plan, config)
            cnn_mod.save_cnn(cnn_model, out / "cnn.hsn")
            manifest["cnn_loss"] = losses
            done("train-cnn", out / "cnn.hsn")

            stage = "classify-cnn"
            maps["cnn"] = cnn_mod.classify_cnn(cnn_model, features, threads=config.threads)
            _write_map(maps["cnn"], palette, out, "cnn")
            done("classify-cnn", out / "cnn_map.hsl", out / "cnn_map.png")

        fused_methods = [m for m in config.methods if m.endswith("-w")]
        if fused_methods:
            stage = "segment"
            seg = segment_features(features, gt, config)
            formats.write_segmentation(seg.labels, seg.num_regions, out / "seg.hss")
            formats.write_region_map_png(seg.labels, out / "seg.png")
            done("segment", out / "seg.hss", out / "seg.png")

            stage = "fuse"
            for method in fused_methods:
                base = method[:-2]
                fused, report = majority_vote_fuse(
                    seg, maps[base], count_unlabeled=not config.exclude_zero_votes)
                maps[method] = fused
                _write_map(fused, palette, out, method)
                write_fusion_report(report, out / f"{method}_fusion.csv")
                done(f"fuse-{method}", out / f"{method}_map.hsl",
                     out / f"{method}_map.png", out / f"{method}_fusion.csv")

        stage = "evaluate"
        reports = []
        for method in config.methods:
            report = eval_mod.evaluate(maps[method], gt, plan.test_pixels)
            eval_mod.write_report(report, out / f"{method}_report.csv")
            reports.append((method, report))
            manifest["outputs"].append(f"{method}_report.csv")
        csv_text, console = eval_mod.compare(reports)
        (out / "comparison.csv").write_text(csv_text, encoding="utf-8")
        (out / "comparison.txt").write_text(console, encoding="utf-8")
        done("evaluate", out / "comparison.csv", out / "comparison.txt")
        manifest["accuracies"] = {
            name: {"overall": rep.overall_accuracy, "average": rep.average_accuracy}
            for name, rep in reports
        }
    except Exception:
        manifest["failed_stage"] = stage
        _write_manifest(manifest, out)
        raise
    _write_manifest(manifest, out)
    return manifest


def _write_map(lmap: formats.LabelMap, palette: formats.Palette, out: Path, name: str) -> None:
    formats.write_label_map(lmap, out / f"{name}_map.hsl")
    formats.write_label_map_png(lmap, palette, out / f"{name}_map.png")


def _write_manifest(manifest: dict, out: Path) -> None:
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
