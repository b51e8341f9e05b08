"""Segmentation and classification metrics: DSC, HD95 and ROC AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

UNDEFINED = "undefined"


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity ``2|A∩B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dsc: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background voxel or on the array edge."""
    mask = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=None) -> float | None:
    """95th percentile of the pooled nearest-surface distances in both directions.

    Returns ``None`` (undefined) when either mask is empty.
    """
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"hd95: shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    sp = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    if sp.shape != (a.ndim,):
        raise ValueError(f"spacing needs {a.ndim} entries, got {sp.shape}")
    pa = np.argwhere(surface(a)) * sp
    pb = np.argwhere(surface(b)) * sp
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def auc(scores, labels) -> float | None:
    """Mann-Whitney ROC AUC, ties counted as one half; ``None`` when one class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"auc: scores {s.shape} and labels {y.shape} must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassResult:
    case: str
    class_id: int
    dsc: float | None = None
    hd95: float | None = None
    auc: float | None = None


@dataclass
class MetricReport:
    """Per-(case, class) rows plus flag-aware averages."""

    rows: list[ClassResult] = field(default_factory=list)

    def _values(self, attr: str, class_id: int | None = None) -> list[float]:
        return [
            getattr(r, attr)
            for r in self.rows
            if getattr(r, attr) is not None and (class_id is None or r.class_id == class_id)
        ]

    def class_ids(self) -> list[int]:
        return sorted({r.class_id for r in self.rows})

    def mean(self, attr: str, class_id: int | None = None) -> float | None:
        vals = self._values(attr, class_id)
        return float(np.mean(vals)) if vals else None

    def counts(self, attr: str) -> tuple[int, int]:
        """``(evaluated, skipped)`` for one metric."""
        ev = len(self._values(attr))
        return ev, len(self.rows) - ev

    @property
    def mean_dsc(self) -> float | None:
        return self.mean("dsc")

    @property
    def mean_hd95(self) -> float | None:
        return self.mean("hd95")

    @property
    def mauc(self) -> float | None:
        return self.mean("auc")

    def extend(self, other: "MetricReport") -> None:
        self.rows.extend(other.rows)

    def to_csv(self) -> str:
        return report_csv(self)


CSV_COLUMNS = ("case", "class_id", "dsc", "hd95", "auc")


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    return repr(float(v))


def report_csv(report: MetricReport) -> str:
    """Rows ``case,class_id,dsc,hd95,auc``; then per-class ``mean`` rows and a ``mean,all`` row.

    Undefined values are written as ``undefined``; columns that do not apply to
    the report's task are left empty.
    """
    seg = any(r.dsc is not None for r in report.rows)
    metrics = ("dsc", "hd95") if seg else ("auc",)

    def cells(get):
        return [_fmt(get(c)) if c in metrics else "" for c in ("dsc", "hd95", "auc")]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r.case, r.class_id] + cells(lambda c: getattr(r, c)))
    for k in report.class_ids():
        w.writerow(["mean", k] + cells(lambda c: report.mean(c, k)))
    w.writerow(["mean", "all"] + cells(lambda c: report.mean(c)))
    return buf.getvalue()


def evaluate_segmentation(pred_labels, gt_labels, class_ids, spacing=None, case: str = "0") -> MetricReport:
    """Binarise both label maps per class and score DSC / HD95."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    report = MetricReport()
    for k in class_ids:
        a, b = pred == k, gt == k
        report.rows.append(ClassResult(case, int(k), dsc=dsc(a, b), hd95=hd95(a, b, spacing)))
    return report


def evaluate_classification(scores: np.ndarray, labels: np.ndarray, case: str = "all") -> MetricReport:
    """Per-label AUC over ``[n, L]`` score/label matrices."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching [n, L] arrays")
    report = MetricReport()
    for k in range(scores.shape[1]):
        report.rows.append(ClassResult(case, k, auc=auc(scores[:, k], labels[:, k])))
    return report

