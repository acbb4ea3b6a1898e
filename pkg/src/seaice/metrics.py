"""Confusion matrices and the F1 / IoU metric families.

Rows of a confusion matrix are the actual class, columns the predicted class
(0 water, 1 ice). Per-class scores with a zero denominator are reported as 0
and listed in :attr:`MetricsReport.undefined` rather than propagated as NaN.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

CLASS_LABELS = ("water", "ice")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, n_classes: int = 2) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return merge(self, other)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"

    def to_list(self) -> list:
        return self.counts.tolist()


def confusion_matrix(pred, labels, valid, n_classes: int = 2) -> ConfusionMatrix:
    """Count valid pixels by (actual, predicted) class."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    valid = np.asarray(valid, dtype=bool)
    if not (pred.shape == labels.shape == valid.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, labels {labels.shape}, valid {valid.shape}")
    if valid.any():
        if labels[valid].max() >= n_classes or pred[valid].max() >= n_classes:
            raise ValueError(f"class index out of range for {n_classes} classes at a valid pixel")
    counts = kernels.confusion_counts(
        np.ascontiguousarray(labels, dtype=np.int64),
        np.ascontiguousarray(pred, dtype=np.int64),
        np.ascontiguousarray(valid),
        n_classes,
    )
    return ConfusionMatrix(counts)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.n_classes != b.n_classes:
        raise ValueError(f"cannot merge {a.n_classes}-class and {b.n_classes}-class matrices")
    return ConfusionMatrix(a.counts + b.counts)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out, den == 0


def _require_nonempty(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ValueError("metrics are undefined for an empty confusion matrix")


def f1_family(cm: ConfusionMatrix) -> dict:
    """Per-class precision/recall/F1 plus macro and support-weighted F1."""
    _require_nonempty(cm)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    precision, p_undef = _safe_div(tp, c.sum(axis=0))
    recall, r_undef = _safe_div(tp, c.sum(axis=1))
    f1, f_undef = _safe_div(2 * precision * recall, precision + recall)
    support = c.sum(axis=1)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_f1": float(f1.mean()),
        "weighted_f1": float((f1 * support).sum() / support.sum()),
        "support": support.astype(np.int64),
        "undefined": {"precision": p_undef, "recall": r_undef, "f1": f_undef},
    }


def iou_family(cm: ConfusionMatrix) -> dict:
    """Per-class IoU plus micro (pooled), macro and support-weighted IoU."""
    _require_nonempty(cm)
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    iou, undef = _safe_div(tp, tp + fp + fn)
    support = c.sum(axis=1)
    micro = tp.sum() / (tp.sum() + fp.sum() + fn.sum())
    return {
        "iou": iou,
        "micro_iou": float(micro),
        "macro_iou": float(iou.mean()),
        "weighted_iou": float((iou * support).sum() / support.sum()),
        "undefined": undef,
    }


@dataclass(frozen=True, eq=False)
class RowRates:
    """Row-normalized confusion rates; rows with no actual pixels are NaN and ``defined`` False."""

    rates: np.ndarray
    defined: np.ndarray


def row_normalize(cm: ConfusionMatrix) -> RowRates:
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1)
    defined = rows > 0
    rates = np.full_like(c, np.nan)
    rates[defined] = c[defined] / rows[defined, None]
    return RowRates(rates, defined)


@dataclass
class MetricsReport:
    confusion: list
    support: list
    precision: list
    recall: list
    f1: list
    iou: list
    macro_f1: float
    weighted_f1: float
    micro_iou: float
    macro_iou: float
    weighted_iou: float
    undefined: list = field(default_factory=list)

    @property
    def average_f1(self) -> float:
        # the "Average F1" column of the comparison table is the support-weighted F1
        return self.weighted_f1

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "MetricsReport":
        return cls(**obj)


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    f = f1_family(cm)
    i = iou_family(cm)
    undefined = []
    for name, flags in (*f["undefined"].items(), ("iou", i["undefined"])):
        for k in np.flatnonzero(flags):
            cls_name = CLASS_LABELS[k] if k < len(CLASS_LABELS) else str(k)
            undefined.append(f"{name}[{cls_name}]")
    return MetricsReport(
        confusion=cm.to_list(),
        support=f["support"].tolist(),
        precision=f["precision"].tolist(),
        recall=f["recall"].tolist(),
        f1=f["f1"].tolist(),
        iou=i["iou"].tolist(),
        macro_f1=f["macro_f1"],
        weighted_f1=f["weighted_f1"],
        micro_iou=i["micro_iou"],
        macro_iou=i["macro_iou"],
        weighted_iou=i["weighted_iou"],
        undefined=undefined,
    )


def mean_reports(reports: list[MetricsReport]) -> dict:
    """Arithmetic mean of every scalar and per-class metric over runs."""
    if not reports:
        raise ValueError("no reports to average")
    keys = ("precision", "recall", "f1", "iou")
    scalars = ("macro_f1", "weighted_f1", "micro_iou", "macro_iou", "weighted_iou")
    out = {k: np.mean([getattr(r, k) for r in reports], axis=0).tolist() for k in keys}
    out.update({k: float(np.mean([getattr(r, k) for r in reports])) for k in scalars})
    out["runs"] = len(reports)
    return out


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    lines = ["actual\\predicted," + ",".join(CLASS_LABELS[: cm.n_classes])]
    for k, row in enumerate(cm.counts):
        lines.append(f"{CLASS_LABELS[k]}," + ",".join(str(int(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
