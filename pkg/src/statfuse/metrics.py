"""Segmentation evaluation: per-class IoU, precision and the eval confusion matrix.

IoU is computed from counts accumulated over the whole dataset, not averaged
per image.  "AP" in the reports is the macro average of per-class precision
``TP / (TP + FP)``; it is a stand-in, not a ranked average precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from statfuse.calibration import accumulate_confusion
from statfuse.core import ClassSet
from statfuse.errors import DomainError, ShapeError


@dataclass
class EvalReport:
    """Evaluation of predicted against ground-truth labels.

    Per-class entries are NaN where undefined: IoU for classes absent from
    the ground truth, precision for classes never predicted, and both for
    the ignore class.
    """

    class_set: ClassSet
    confusion: np.ndarray
    per_class_iou: np.ndarray
    per_class_precision: np.ndarray

    @property
    def element_count(self) -> int:
        return int(self.confusion.sum())

    @property
    def mean_iou(self) -> float:
        c = self.confusion
        tp = np.diag(c)
        return _exact_mean(tp, c.sum(axis=1) + c.sum(axis=0) - tp, ~np.isnan(self.per_class_iou))

    @property
    def mean_precision(self) -> float:
        return _exact_mean(np.diag(self.confusion), self.confusion.sum(axis=1), ~np.isnan(self.per_class_precision))

    def merge(self, other: "EvalReport") -> "EvalReport":
        return report_from_confusion(self.confusion + other.confusion, self.class_set)

    def lines(self) -> list[str]:
        """Machine-readable ``class<TAB>metric<TAB>value`` lines."""
        out = []
        for k, name in enumerate(self.class_set.names):
            out.append(f"{name}\tiou\t{_fmt(self.per_class_iou[k])}")
            out.append(f"{name}\tprecision\t{_fmt(self.per_class_precision[k])}")
        out.append(f"mean\tiou\t{_fmt(self.mean_iou)}")
        out.append(f"mean\tprecision\t{_fmt(self.mean_precision)}")
        out.append(f"all\telements\t{self.element_count}")
        return out


def _exact_mean(num, den, valid) -> float:
    # mean of count ratios in rational arithmetic, rounded once at the end,
    # so results do not depend on class order
    terms = [Fraction(int(n), int(d)) for n, d, ok in zip(num, den, valid) if ok]
    return float(sum(terms) / len(terms)) if terms else float("nan")


def _fmt(v) -> str:
    return "nan" if np.isnan(v) else f"{float(v):.17g}"


def report_from_confusion(confusion, class_set: ClassSet) -> EvalReport:
    c = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(c).astype(np.float64)
    predicted = c.sum(axis=1).astype(np.float64)
    actual = c.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(actual > 0, tp / (predicted + actual - tp), np.nan)
        precision = np.where(predicted > 0, tp / predicted, np.nan)
    if class_set.ignore_index is not None:
        iou[class_set.ignore_index] = np.nan
        precision[class_set.ignore_index] = np.nan
    return EvalReport(class_set, c, iou, precision)


def evaluate(pred, gt, class_set: ClassSet) -> EvalReport:
    """Evaluate one predicted label map against its ground truth."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    conf = accumulate_confusion(pred, gt, num_classes=class_set.count, ignore_index=class_set.ignore_index)
    return report_from_confusion(conf, class_set)


def evaluate_batch(preds: Sequence, gts: Sequence, class_set: ClassSet) -> EvalReport:
    """Dataset-level report: confusion counts are summed before any ratio."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    k = class_set.count
    conf = np.zeros((k, k), dtype=np.int64)
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"pair {i}: prediction {p.shape} and ground truth {g.shape} differ")
        conf = accumulate_confusion(p, g, conf, ignore_index=class_set.ignore_index)
    return report_from_confusion(conf, class_set)


def format_table(reports: dict[str, EvalReport], metric: str = "iou") -> str:
    """Aligned text table with one row per class and one column per method."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    attr = {"iou": "per_class_iou", "precision": "per_class_precision"}[metric]
    mean_attr = {"iou": "mean_iou", "precision": "mean_precision"}[metric]
    names = list(first.class_set.names)
    width = max(len(n) for n in names + ["mean", "class"])
    cols = list(reports)
    colw = [max(len(c), 7) for c in cols]
    header = "class".ljust(width) + "".join("  " + c.rjust(w) for c, w in zip(cols, colw))
    rows = [header, "-" * len(header)]

    def cell(v, w):
        return ("-" if np.isnan(v) else f"{100 * v:.2f}").rjust(w)

    for k, name in enumerate(names):
        if first.class_set.ignore_index == k:
            continue
        rows.append(name.ljust(width) + "".join("  " + cell(getattr(reports[c], attr)[k], w) for c, w in zip(cols, colw)))
    rows.append("-" * len(header))
    rows.append("mean".ljust(width) + "".join("  " + cell(getattr(reports[c], mean_attr), w) for c, w in zip(cols, colw)))
    return "\n".join(rows)


def bench_inference(method, inputs=None, trials: int = 100, model=None) -> tuple[float, float]:
    """Time ``trials`` fusions of preloaded inputs; returns (mean ms, sample std ms).

    ``method`` is a fusion method id, fused through :func:`statfuse.fusion.fuse`
    with ``inputs`` and ``model``, or any zero-argument callable that performs
    one full-image fusion.  Timing is wall clock around each call on the
    calling thread only.
    """
    from statfuse.fusion import fuse

    if trials < 2:
        raise DomainError("benchmarking needs at least two trials")
    run = method if callable(method) else (lambda: fuse(method, inputs, model))
    times = np.empty(trials)
    for i in range(trials):
        start = time.perf_counter()
        run()
        times[i] = (time.perf_counter() - start) * 1e3
    return float(times.mean()), float(times.std(ddof=1))
