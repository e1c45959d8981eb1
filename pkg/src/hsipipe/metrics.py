"""Train/test splitting, confusion matrices, and accuracy tables.

Splits are stratified per class at the requested ratio (3:1 by default) under
a fixed seed; a global unstratified variant exists for protocol comparison.
Reports carry a per-class confusion matrix with a dedicated column for
"unknown" (id 0) predictions, per-class recalls, their unweighted mean
(average accuracy), and the trace fraction (overall accuracy).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import GroundTruth, LabelMap
from .preprocess import LabeledPixelSet


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    seed: int
    ratio: tuple[int, int]


def stratified_split_indices(labels: np.ndarray, ratio: tuple[int, int] = (3, 1),
                             seed: int = 0) -> SplitIndices:
    """Per class: shuffle under the seed, send floor(train_share) samples to
    train, the rest to test, keeping at least one sample on each side.

    Raises DataError for any class with fewer than 2 samples.
    """
    labels = np.asarray(labels)
    train_share = ratio[0] / (ratio[0] + ratio[1])
    rng = np.random.default_rng(seed)
    train_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for cid in np.unique(labels):
        rows = np.flatnonzero(labels == cid)
        if rows.size < 2:
            raise DataError(
                f"class {int(cid)} has {rows.size} sample(s); cannot appear on both sides"
            )
        perm = rows[rng.permutation(rows.size)]
        n_train = min(max(int(rows.size * train_share), 1), rows.size - 1)
        train_parts.append(perm[:n_train])
        test_parts.append(perm[n_train:])
    return SplitIndices(
        train=np.concatenate(train_parts),
        test=np.concatenate(test_parts),
        seed=seed,
        ratio=(int(ratio[0]), int(ratio[1])),
    )


def global_split_indices(labels: np.ndarray, ratio: tuple[int, int] = (3, 1),
                         seed: int = 0) -> SplitIndices:
    """Unstratified split: one global shuffle, first train_share to train."""
    labels = np.asarray(labels)
    if labels.size < 2:
        raise DataError("need at least 2 samples to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(labels.size)
    n_train = min(max(int(labels.size * ratio[0] / (ratio[0] + ratio[1])), 1), labels.size - 1)
    return SplitIndices(train=perm[:n_train], test=perm[n_train:], seed=seed,
                        ratio=(int(ratio[0]), int(ratio[1])))


def split(pixel_set: LabeledPixelSet, ratio: tuple[int, int] = (3, 1),
          seed: int = 0) -> SplitIndices:
    """Stratified split of a labeled pixel set (see stratified_split_indices)."""
    return stratified_split_indices(pixel_set.labels, ratio=ratio, seed=seed)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts plus the derived accuracy figures.

    ``confusion`` is (num_classes, num_classes + 1): rows are true classes
    1..C, columns are predicted classes 1..C, and the trailing column counts
    "unknown" (id 0) predictions, which are always errors.  ``per_class``
    holds recalls, NaN for classes absent from the test set.
    """

    confusion: np.ndarray
    per_class: np.ndarray
    average_accuracy: float
    overall_accuracy: float

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]


def evaluate(pred: LabelMap, truth: GroundTruth, test_pixels: np.ndarray) -> EvalReport:
    """Score predictions on the given test pixels (flat row-major indices).

    Indices may repeat (a protocol that oversamples before splitting produces
    duplicate test samples); every occurrence is counted.  Test pixels whose
    ground truth is 0 are ignored.
    """
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise DataError(
            f"prediction {pred.height}x{pred.width} does not match "
            f"truth {truth.height}x{truth.width}"
        )
    test_pixels = np.asarray(test_pixels, dtype=np.int64)
    t = truth.labels.ravel()[test_pixels].astype(np.int64)
    p = pred.labels.ravel()[test_pixels].astype(np.int64)
    keep = t > 0
    t, p = t[keep], p[keep]
    if t.size == 0:
        raise DataError("test mask contains no labeled pixels")
    num_classes = truth.num_classes
    confusion = compute_confusion(t, p, num_classes)
    return report_from_confusion(confusion)


def compute_confusion(t: np.ndarray, p: np.ndarray, num_classes: int) -> np.ndarray:
    """Count (truth, prediction) pairs into a (C, C+1) matrix; prediction 0
    lands in the trailing unknown column."""
    cols = np.where(p == 0, num_classes, p - 1)
    flat = (t - 1) * (num_classes + 1) + cols
    counts = np.bincount(flat, minlength=num_classes * (num_classes + 1))
    return counts.reshape(num_classes, num_classes + 1)


def report_from_confusion(confusion: np.ndarray) -> EvalReport:
    num_classes = confusion.shape[0]
    row_sums = confusion.sum(axis=1)
    diag = confusion[np.arange(num_classes), np.arange(num_classes)]
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class = np.where(row_sums > 0, diag / np.maximum(row_sums, 1), np.nan)
    present = row_sums > 0
    average = float(per_class[present].mean()) if present.any() else math.nan
    overall = float(diag.sum() / confusion.sum())
    return EvalReport(
        confusion=confusion,
        per_class=per_class,
        average_accuracy=average,
        overall_accuracy=overall,
    )


def merge_confusions(parts: list[np.ndarray]) -> np.ndarray:
    """Partial confusion matrices combine by addition."""
    return np.sum(parts, axis=0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def report_csv(report: EvalReport, class_names: list[str] | None = None) -> str:
    """CSV: confusion rows (one per true class, unknown column last), each with
    its recall, then trailing overall/average accuracy rows."""
    n = report.num_classes
    names = class_names or [f"class_{i}" for i in range(1, n + 1)]
    if len(names) != n:
        raise DataError(f"{len(names)} class names for {n} classes")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *names, "unknown", "accuracy"])
    for i in range(n):
        acc = report.per_class[i]
        writer.writerow([
            names[i],
            *(int(v) for v in report.confusion[i]),
            "n/a" if math.isnan(acc) else f"{acc:.6f}",
        ])
    writer.writerow(["overall_accuracy", f"{report.overall_accuracy:.6f}"])
    writer.writerow(["average_accuracy",
                     "n/a" if math.isnan(report.average_accuracy) else f"{report.average_accuracy:.6f}"])
    return buf.getvalue()


def write_report(report: EvalReport, path: str | Path,
                 class_names: list[str] | None = None) -> None:
    Path(path).write_text(report_csv(report, class_names), encoding="utf-8")


def compare(named_reports: list[tuple[str, EvalReport]]) -> tuple[str, str]:
    """Comparison table over methods, in the given order.

    Returns (csv_text, console_text); percentages in the console rendering,
    full fractions in the CSV.
    """
    if not named_reports:
        raise DataError("compare needs at least one report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "overall_accuracy", "average_accuracy"])
    rows = []
    for name, report in named_reports:
        aa = report.average_accuracy
        writer.writerow([
            name,
            f"{report.overall_accuracy:.6f}",
            "n/a" if math.isnan(aa) else f"{aa:.6f}",
        ])
        rows.append((name, report.overall_accuracy, aa))
    width = max(len(name) for name, _, _ in rows)
    lines = [f"{'method'.ljust(width)}  OA(%)   AA(%)"]
    for name, oa, aa in rows:
        aa_txt = "  n/a" if math.isnan(aa) else f"{100 * aa:5.2f}"
        lines.append(f"{name.ljust(width)}  {100 * oa:5.2f}   {aa_txt}")
    return buf.getvalue(), "\n".join(lines) + "\n"
