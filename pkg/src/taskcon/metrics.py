"""Binary classification metrics for imbalanced tasks.

The positive class is label 1 (high grade / invasion present). Metrics that
are undefined for the given input (for example sensitivity when no positive
is present) are reported as NaN and named in ``MetricReport.undefined``;
they are never silently replaced by zero.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Column order of the comparison tables.
METRIC_NAMES = (
    "sensitivity",
    "specificity",
    "accuracy",
    "g_means",
    "balanced_accuracy",
    "mcc",
    "auprc",
    "auc",
)
METRIC_LABELS = {
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "accuracy": "Accuracy",
    "g_means": "G-Means",
    "balanced_accuracy": "Balanced Accuracy",
    "mcc": "MCC",
    "auprc": "AUPRC",
    "auc": "AUC",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    sensitivity: float = math.nan
    specificity: float = math.nan
    accuracy: float = math.nan
    g_means: float = math.nan
    balanced_accuracy: float = math.nan
    mcc: float = math.nan
    auprc: float = math.nan
    auc: float = math.nan
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    threshold: float = 0.5
    undefined: tuple[str, ...] = ()

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        d = {m: (None if math.isnan(v) else v) for m, v in self.values().items()}
        d.update(
            tp=self.counts.tp, fp=self.counts.fp, tn=self.counts.tn, fn=self.counts.fn,
            threshold=self.threshold, undefined=list(self.undefined),
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        vals = {m: (math.nan if d.get(m) is None else float(d[m])) for m in METRIC_NAMES}
        counts = ConfusionCounts(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))
        return cls(**vals, counts=counts, threshold=float(d.get("threshold", 0.5)),
                   undefined=tuple(d.get("undefined", ())))

    def csv_row(self) -> list[str]:
        return ["" if math.isnan(v) else f"{v:.6f}" for v in self.values().values()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([METRIC_LABELS[m] for m in METRIC_NAMES])
        w.writerow(self.csv_row())
        return buf.getvalue()


def _check_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size == 0:
        raise ValueError("cannot evaluate an empty set of scores")
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion_counts(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _check_inputs(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def threshold_metrics(counts: ConfusionCounts) -> tuple[dict[str, float], tuple[str, ...]]:
    """The six operating-point metrics plus the names of undefined ones.

    MCC is 0 when any marginal is empty; it is then also flagged undefined.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    n = counts.n
    if n == 0:
        raise ValueError("no samples in confusion counts")
    undefined = []
    sens = tp / (tp + fn) if tp + fn else math.nan
    spec = tn / (tn + fp) if tn + fp else math.nan
    if math.isnan(sens):
        undefined.append("sensitivity")
    if math.isnan(spec):
        undefined.append("specificity")
    gm = math.sqrt(sens * spec)
    ba = (sens + spec) / 2
    if math.isnan(gm):
        undefined += ["g_means", "balanced_accuracy"]
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        mcc = 0.0
        undefined.append("mcc")
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(denom)
    out = {
        "sensitivity": sens,
        "specificity": spec,
        "accuracy": (tp + tn) / n,
        "g_means": gm,
        "balanced_accuracy": ba,
        "mcc": mcc,
    }
    return out, tuple(undefined)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted as one half.

    Uses midranks of the pooled scores; returns NaN if only one class is
    present.
    """
    s, y = _check_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # midrank for each run of tied scores (1-based ranks)
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision).

    Sweeps the distinct scores from high to low and sums
    ``(recall_k - recall_{k-1}) * precision_k``; no interpolation.
    """
    s, y = _check_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="mergesort")
    s_desc, y_desc = s[order], y[order]
    tp_cum = np.cumsum(y_desc)
    # last index of each tied block = one threshold
    last = np.concatenate((np.flatnonzero(np.diff(s_desc)), [s.size - 1]))
    tp = tp_cum[last].astype(np.float64)
    predicted = (last + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / n_pos
    d_recall = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(d_recall * precision))


def evaluate_task(scores, labels, threshold: float = 0.5) -> MetricReport:
    """All eight metrics for one task from positive-class probabilities."""
    counts = confusion_counts(scores, labels, threshold)
    vals, undefined = threshold_metrics(counts)
    undefined = list(undefined)
    vals["auc"] = auc(scores, labels)
    vals["auprc"] = auprc(scores, labels)
    for m in ("auc", "auprc"):
        if math.isnan(vals[m]):
            undefined.append(m)
    return MetricReport(**vals, counts=counts, threshold=threshold, undefined=tuple(undefined))
