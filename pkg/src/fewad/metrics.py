"""Detection metrics: AUROC, AUPR, per-region overlap, and aggregation.

All metric functions take plain arrays and return fractions in [0, 1].
Ties are handled with midranks (AUROC) or threshold grouping (AUPR);
every implementation here is checked against an exhaustive brute-force
oracle in the test suite.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError, StructuralError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
METRIC_FIELDS = ("image_auroc", "image_aupr", "pixel_auroc", "pixel_pro")


def _validate_binary(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0/1")


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(equal)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    _validate_binary(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC needs both classes present")
    ranks = midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Area under precision-recall via step interpolation at distinct
    thresholds (average-precision form; ties grouped per threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    _validate_binary(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise InputError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # keep only the last index of each tie group
    boundary = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp = tp[boundary].astype(np.float64)
    fp = fp[boundary].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def _counts_at_thresholds(sorted_ascending: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """#elements >= t for every threshold; input sorted ascending."""
    return sorted_ascending.size - np.searchsorted(sorted_ascending, thresholds, side="left")


def pro(score_maps, masks, fpr_cap: float = 0.3) -> float:
    """Per-region overlap: mean connected-component recall integrated
    over false-positive rate up to ``fpr_cap``, normalized by the cap.

    Components use 8-connectivity.  Every distinct score value is a
    threshold (binarization is ``score >= t``), and the resulting curve
    is anchored at (0, 0) and integrated piecewise-linearly.
    """
    if len(score_maps) != len(masks):
        raise InputError("score_maps and masks differ in length")
    if not 0 < fpr_cap <= 1:
        raise InputError(f"fpr_cap must be in (0, 1], got {fpr_cap}")

    component_scores: list[np.ndarray] = []
    negatives: list[np.ndarray] = []
    all_scores: list[np.ndarray] = []
    for score_map, mask in zip(score_maps, masks):
        score_map = np.asarray(score_map, dtype=np.float64)
        mask = np.asarray(mask)
        if score_map.shape != mask.shape:
            raise StructuralError(
                f"score map {score_map.shape} vs mask {mask.shape}"
            )
        _validate_binary(mask)
        labeled, n_regions = ndimage.label(mask, structure=EIGHT_CONNECTED)
        for region in range(1, n_regions + 1):
            component_scores.append(np.sort(score_map[labeled == region], kind="mergesort"))
        negatives.append(score_map[mask == 0])
        all_scores.append(score_map.ravel())
    if not component_scores:
        raise InputError("PRO needs at least one anomalous region")
    negative_scores = np.sort(np.concatenate(negatives), kind="mergesort")
    if negative_scores.size == 0:
        raise InputError("PRO needs at least one normal pixel for the FPR axis")

    thresholds = np.unique(np.concatenate(all_scores))[::-1]
    recalls = np.zeros(thresholds.size, dtype=np.float64)
    for comp in component_scores:
        recalls += _counts_at_thresholds(comp, thresholds) / comp.size
    recalls /= len(component_scores)
    fprs = _counts_at_thresholds(negative_scores, thresholds) / negative_scores.size
    return curve_area(fprs, recalls, fpr_cap)


def curve_area(xs: np.ndarray, ys: np.ndarray, cap: float) -> float:
    """Integrate a piecewise-linear curve (anchored at the origin) over
    x in [0, cap], normalized by cap."""
    xs = np.concatenate([[0.0], xs])
    ys = np.concatenate([[0.0], ys])
    area = 0.0
    for i in range(1, xs.size):
        x0, x1 = xs[i - 1], xs[i]
        y0, y1 = ys[i - 1], ys[i]
        lo, hi = max(x0, 0.0), min(x1, cap)
        if hi <= lo or x1 == x0:
            continue
        y_lo = y0 + (y1 - y0) * (lo - x0) / (x1 - x0)
        y_hi = y0 + (y1 - y0) * (hi - x0) / (x1 - x0)
        area += 0.5 * (y_lo + y_hi) * (hi - lo)
    return float(area / cap)


# --- aggregation ------------------------------------------------------------


@dataclass
class MetricRow:
    category: str
    seed: int
    image_auroc: float
    image_aupr: float
    pixel_auroc: float | None = None
    pixel_pro: float | None = None

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass
class MetricStat:
    mean: float
    std: float | None  # sample std over seeds; None for a single seed
    n: int


@dataclass
class CategorySummary:
    category: str
    stats: dict[str, MetricStat]


@dataclass
class MetricReport:
    rows: list[MetricRow]
    categories: list[CategorySummary]
    dataset_mean: dict[str, float | None]


def aggregate(rows: list[MetricRow]) -> MetricReport:
    """Per-category mean +- sample std over seeds, plus the unweighted
    dataset mean over categories."""
    categories: list[CategorySummary] = []
    for category in sorted({row.category for row in rows}):
        stats: dict[str, MetricStat] = {}
        members = [row for row in rows if row.category == category]
        for metric in METRIC_FIELDS:
            values = [row.value(metric) for row in members if row.value(metric) is not None]
            if not values:
                continue
            arr = np.asarray(values, dtype=np.float64)
            std = float(arr.std(ddof=1)) if arr.size >= 2 else None
            stats[metric] = MetricStat(mean=float(arr.mean()), std=std, n=arr.size)
        categories.append(CategorySummary(category=category, stats=stats))
    dataset_mean: dict[str, float | None] = {}
    for metric in METRIC_FIELDS:
        means = [c.stats[metric].mean for c in categories if metric in c.stats]
        dataset_mean[metric] = float(np.mean(means)) if means else None
    return MetricReport(rows=rows, categories=categories, dataset_mean=dataset_mean)


def report_csv(report: MetricReport) -> str:
    """Raw per-(category, seed) rows as CSV, metrics as fractions."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["category", "seed", *METRIC_FIELDS])
    for row in report.rows:
        writer.writerow(
            [row.category, row.seed]
            + ["" if row.value(m) is None else f"{row.value(m):.6f}" for m in METRIC_FIELDS]
        )
    return buffer.getvalue()


def report_table(report: MetricReport) -> str:
    """Human-readable summary: category rows as percent 'mean +- std',
    closing with the dataset mean row."""

    def cell(stat: MetricStat | None) -> str:
        if stat is None:
            return "-"
        if stat.std is None:
            return f"{100 * stat.mean:.1f}"
        return f"{100 * stat.mean:.1f} +- {100 * stat.std:.1f}"

    widths = [max(12, *(len(c.category) for c in report.categories), len("category"))]
    header = ["category", *METRIC_FIELDS]
    lines = []
    fmt = "{:<" + str(widths[0]) + "}" + "".join("{:>16}" for _ in METRIC_FIELDS)
    lines.append(fmt.format(*header))
    for summary in report.categories:
        lines.append(
            fmt.format(
                summary.category,
                *[cell(summary.stats.get(metric)) for metric in METRIC_FIELDS],
            )
        )
    lines.append(
        fmt.format(
            "mean",
            *[
                "-" if report.dataset_mean[m] is None else f"{100 * report.dataset_mean[m]:.1f}"
                for m in METRIC_FIELDS
            ],
        )
    )
    return "\n".join(lines) + "\n"
