"""Command-line entry points.

``hsipipe pipeline`` runs end to end from a TOML config; ``hsipipe stage``
exposes each step individually so runs can be checkpointed and resumed, and
``hsipipe synth`` writes a self-contained demo scene.  Stage-wise execution
composes to byte-identical results because both paths share the functions in
``pipeline``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import metrics as eval_mod
from . import formats, pipeline, synth, watershed
from .errors import DataError, NumericError
from .fusion import majority_vote_fuse, write_fusion_report
from .gml import classify_gml, load_gml, save_gml

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hsipipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("pipeline", help="run the full pipeline from a config file")
    run.add_argument("--config", required=True, help="TOML config file")
    run.add_argument("--methods", help="comma list from gml,gml-w,cnn,cnn-w")
    run.add_argument("--cube", help="override cube path")
    run.add_argument("--labels", help="override labels path")
    run.add_argument("--out-dir", help="override output directory")
    run.add_argument("--seed", type=int, help="override master seed")
    run.add_argument("--protocol", choices=pipeline.PROTOCOLS,
                     help="split-first (no leakage) or oversample-first "
                          "(balances before splitting; duplicates can cross the split)")
    run.add_argument("--global-split", action="store_true",
                     help="plain shuffled split instead of the stratified default")
    run.add_argument("--threads", type=int, help="parallel workers for classification")

    stage = sub.add_parser("stage", help="run one pipeline stage")
    st = stage.add_subparsers(dest="stage", required=True, parser_class=_Parser)

    conv = st.add_parser("convert", help="convert .npy arrays to native containers")
    conv.add_argument("--cube-npy", help="(H, W, L) float array")
    conv.add_argument("--out-cube")
    conv.add_argument("--labels-npy", help="(H, W) integer array")
    conv.add_argument("--out-labels")

    prep = st.add_parser("preprocess", help="split, fit scaler+PCA, project the cube")
    prep.add_argument("--config", required=True)
    prep.add_argument("--cube")
    prep.add_argument("--labels")
    prep.add_argument("--out-dir", required=True)

    tgml = st.add_parser("train-gml", help="fit the per-class Gaussians")
    tgml.add_argument("--features", required=True, help="projected cube (.hsc)")
    tgml.add_argument("--labels", required=True)
    tgml.add_argument("--split", required=True, help="split.json from preprocess")
    tgml.add_argument("--ridge", type=float, default=None)
    tgml.add_argument("--threshold", type=float, default=None,
                      help="unknown-label floor on the joint log score")
    tgml.add_argument("--out", required=True)

    tcnn = st.add_parser("train-cnn", help="train the convolutional classifier")
    tcnn.add_argument("--features", required=True)
    tcnn.add_argument("--labels", required=True)
    tcnn.add_argument("--split", required=True)
    tcnn.add_argument("--window", type=int, default=5)
    tcnn.add_argument("--epochs", type=int, default=50)
    tcnn.add_argument("--batch-size", type=int, default=64)
    tcnn.add_argument("--learning-rate", type=float, default=1e-2)
    tcnn.add_argument("--momentum", type=float, default=0.9)
    tcnn.add_argument("--seed", type=int, default=2, help="training seed")
    tcnn.add_argument("--out", required=True)

    cls = st.add_parser("classify", help="produce a label map from a trained model")
    cls.add_argument("--method", choices=("gml", "cnn"), required=True)
    cls.add_argument("--model", required=True)
    cls.add_argument("--features", required=True)
    cls.add_argument("--out", required=True)
    cls.add_argument("--png", help="also render the map with the default palette")
    cls.add_argument("--threads", type=int, default=1)

    seg = st.add_parser("segment", help="watershed over the projected cube")
    seg.add_argument("--features", required=True)
    seg.add_argument("--labels", help="needed for --mask labels")
    seg.add_argument("--mask", choices=("otsu", "labels"), default="otsu")
    seg.add_argument("--min-distance", type=int, default=7)
    seg.add_argument("--min-height", type=float, default=1.0)
    seg.add_argument("--elevation", choices=("distance", "gradient"), default="distance")
    seg.add_argument("--out", required=True)
    seg.add_argument("--png")

    fuse = st.add_parser("fuse", help="majority vote per watershed region")
    fuse.add_argument("--seg", required=True)
    fuse.add_argument("--map", required=True, dest="map_path")
    fuse.add_argument("--out", required=True)
    fuse.add_argument("--report", help="per-region vote CSV")
    fuse.add_argument("--exclude-zero-votes", action="store_true")

    evl = st.add_parser("evaluate", help="score a label map on the test pixels")
    evl.add_argument("--map", required=True, dest="map_path")
    evl.add_argument("--labels", required=True)
    evl.add_argument("--split", required=True)
    evl.add_argument("--out", required=True)

    gen = sub.add_parser("synth", help="write a synthetic demo scene + config")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--size", type=int, default=96)
    gen.add_argument("--bands", type=int, default=8)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--seed", type=int, default=7)

    return parser


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------


def _cmd_pipeline(args) -> int:
    config = pipeline.PipelineConfig.from_toml(args.config)
    if args.methods:
        config.methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for name in ("cube", "labels", "out_dir", "seed", "protocol", "threads"):
        val = getattr(args, name)
        if val is not None:
            setattr(config, name, val)
    if args.global_split:
        config.stratified = False
    manifest = pipeline.run_pipeline(config)
    console = Path(config.out_dir, "comparison.txt").read_text(encoding="utf-8")
    sys.stdout.write(console)
    sys.stdout.write(f"artifacts in {config.out_dir} "
                     f"({len(manifest['outputs'])} files, manifest.json)\n")
    return EXIT_OK


def _cmd_convert(args) -> int:
    if not (args.cube_npy or args.labels_npy):
        raise DataError("convert needs --cube-npy and/or --labels-npy")
    if args.cube_npy:
        if not args.out_cube:
            raise DataError("--cube-npy needs --out-cube")
        arr = np.load(args.cube_npy)
        if arr.ndim != 3:
            raise DataError(f"cube array must be (H, W, L), got shape {arr.shape}")
        cube = formats.HyperCube(height=arr.shape[0], width=arr.shape[1],
                                 bands=arr.shape[2],
                                 data=np.moveaxis(arr, -1, 0).astype(np.float32))
        formats.write_cube(cube, args.out_cube)
        print(f"wrote {args.out_cube} ({cube.height}x{cube.width}x{cube.bands})")
    if args.labels_npy:
        if not args.out_labels:
            raise DataError("--labels-npy needs --out-labels")
        arr = np.load(args.labels_npy)
        if arr.ndim != 2:
            raise DataError(f"label array must be (H, W), got shape {arr.shape}")
        if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
            raise DataError("label values must fit in uint16")
        gt = formats.GroundTruth(height=arr.shape[0], width=arr.shape[1],
                                 labels=arr.astype(np.uint16),
                                 num_classes=int(arr.max()))
        formats.write_labels(gt, args.out_labels)
        print(f"wrote {args.out_labels} ({gt.num_classes} classes)")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    config = pipeline.PipelineConfig.from_toml(args.config)
    if args.cube:
        config.cube = args.cube
    if args.labels:
        config.labels = args.labels
    config.validate()
    cube = formats.read_cube(config.cube)
    gt = formats.read_labels(config.labels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = pipeline.build_split_plan(gt, config)
    pipeline.save_split_plan(plan, out / "split.json")
    scaler, pca = pipeline.fit_preprocess(cube, gt, plan, config.retained_variance)
    from .preprocess import save_pca, save_scaler

    save_scaler(scaler, out / "scaler.json")
    save_pca(pca, out / "pca.hsp")
    features = pipeline.project_cube(cube, scaler, pca)
    formats.write_cube(pipeline.features_to_cube(features), out / "features.hsc")
    print(f"retained {pca.num_components} components "
          f"({pca.retained_fraction:.4f} variance target); "
          f"train {plan.train_pixels.size} / test {plan.test_pixels.size} samples")
    return EXIT_OK


def _features_array(path: str) -> np.ndarray:
    return formats.read_cube(path).to_hwc()


def _plan_config(plan: pipeline.SplitPlan) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    cfg.protocol = plan.protocol
    cfg.stratified = plan.stratified
    cfg.ratio = plan.ratio
    return cfg


def _cmd_train_gml(args) -> int:
    features = _features_array(args.features)
    gt = formats.read_labels(args.labels)
    plan = pipeline.load_split_plan(args.split)
    cfg = _plan_config(plan)
    cfg.gml_ridge = args.ridge
    cfg.gml_threshold = -math.inf if args.threshold is None else args.threshold
    model = pipeline.train_gml_model(features, gt, plan, cfg)
    save_gml(model, args.out)
    print(f"fit {len(model.classes)} classes on {plan.train_pixels.size} samples -> {args.out}")
    return EXIT_OK


def _cmd_train_cnn(args) -> int:
    features = _features_array(args.features)
    gt = formats.read_labels(args.labels)
    plan = pipeline.load_split_plan(args.split)
    cfg = _plan_config(plan)
    cfg.window = args.window
    cfg.cnn_epochs = args.epochs
    cfg.cnn_batch_size = args.batch_size
    cfg.cnn_learning_rate = args.learning_rate
    cfg.cnn_momentum = args.momentum
    cfg.seed = args.seed - 2  # cnn_seed = seed + 2
    model, losses = pipeline.train_cnn_model(features, gt, plan, cfg)
    cnn_mod.save_cnn(model, args.out)
    print(f"trained {args.epochs} epochs, final loss {losses[-1]:.6f} -> {args.out}"
          if losses else f"trained 0 epochs -> {args.out}")
    return EXIT_OK


def _cmd_classify(args) -> int:
    features = _features_array(args.features)
    if args.method == "gml":
        lmap = classify_gml(load_gml(args.model), features, threads=args.threads)
    else:
        lmap = cnn_mod.classify_cnn(cnn_mod.load_cnn(args.model), features,
                                    threads=args.threads)
    formats.write_label_map(lmap, args.out)
    if args.png:
        palette = formats.Palette.default(int(lmap.labels.max(initial=1)))
        formats.write_label_map_png(lmap, palette, args.png)
    print(f"classified {lmap.height}x{lmap.width} pixels -> {args.out}")
    return EXIT_OK


def _cmd_segment(args) -> int:
    features = _features_array(args.features)
    gt = formats.read_labels(args.labels) if args.labels else None
    cfg = pipeline.PipelineConfig()
    cfg.ws_mask = args.mask
    cfg.ws_min_distance = args.min_distance
    cfg.ws_min_height = args.min_height
    cfg.ws_elevation = args.elevation
    seg = pipeline.segment_features(features, gt, cfg)
    formats.write_segmentation(seg.labels, seg.num_regions, args.out)
    if args.png:
        formats.write_region_map_png(seg.labels, args.png)
    print(f"{seg.num_regions} regions -> {args.out}")
    return EXIT_OK


def _cmd_fuse(args) -> int:
    labels, num_regions = formats.read_segmentation(args.seg)
    seg = watershed.SegmentationMap(height=labels.shape[0], width=labels.shape[1],
                                    labels=labels, num_regions=num_regions)
    lmap = formats.read_label_map(args.map_path)
    fused, report = majority_vote_fuse(seg, lmap,
                                       count_unlabeled=not args.exclude_zero_votes)
    formats.write_label_map(fused, args.out)
    if args.report:
        write_fusion_report(report, args.report)
    print(f"fused {report.regions_processed} regions, "
          f"{report.pixels_flipped} pixels changed -> {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    lmap = formats.read_label_map(args.map_path)
    gt = formats.read_labels(args.labels)
    plan = pipeline.load_split_plan(args.split)
    report = eval_mod.evaluate(lmap, gt, plan.test_pixels)
    eval_mod.write_report(report, args.out)
    print(f"overall {report.overall_accuracy:.4f}, "
          f"average {report.average_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cube, gt, _ = synth.gaussian_blob_scene(size=args.size, bands=args.bands,
                                            num_classes=args.classes, seed=args.seed)
    formats.write_cube(cube, out / "scene.hsc")
    formats.write_labels(gt, out / "scene.hsl")
    config_text = "\n".join([
        f'cube = "{out / "scene.hsc"}"',
        f'labels = "{out / "scene.hsl"}"',
        f'out_dir = "{out / "run"}"',
        'methods = ["gml", "gml-w"]',
        "seed = 0",
        "window = 5",
        "retained_variance = 0.999",
        "",
    ])
    (out / "run.toml").write_text(config_text, encoding="utf-8")
    print(f"wrote {out}/scene.hsc, {out}/scene.hsl, {out}/run.toml "
          f"({args.size}x{args.size}, {args.classes} classes)")
    return EXIT_OK


_STAGE_COMMANDS = {
    "convert": _cmd_convert,
    "preprocess": _cmd_preprocess,
    "train-gml": _cmd_train_gml,
    "train-cnn": _cmd_train_cnn,
    "classify": _cmd_classify,
    "segment": _cmd_segment,
    "fuse": _cmd_fuse,
    "evaluate": _cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "pipeline":
            return _cmd_pipeline(args)
        if args.command == "stage":
            return _STAGE_COMMANDS[args.stage](args)
        if args.command == "synth":
            return _cmd_synth(args)
        raise DataError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
