"""Binary-classification metrics: confusion counts, the five summary scores,
ROC-AUC, and report rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError, ParameterError

REPORT_COLUMNS = ("Precision", "Recall", "F1 Score", "Accuracy", "AUC Score")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    model: str
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    accuracy: float
    auc: float | None = None
    # names of metrics whose denominator was zero and were reported as 0
    degenerate_flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "tn": self.counts.tn,
            "fn": self.counts.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "degenerate_flags": list(self.degenerate_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        counts = ConfusionCounts(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))
        return cls(
            model=str(d["model"]),
            counts=counts,
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            f1=float(d["f1"]),
            accuracy=float(d["accuracy"]),
            auc=None if d.get("auc") is None else float(d["auc"]),
            degenerate_flags=list(d.get("degenerate_flags", [])),
        )


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold scores (>= threshold means positive) against 0/1 labels."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ParameterError(
            f"confusion: {scores.shape[0]} scores vs {labels.shape[0]} labels"
        )
    if scores.size == 0:
        raise ParameterError("confusion needs at least one sample")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def summarize(
    counts: ConfusionCounts, model: str = "model", auc: float | None = None
) -> MetricsReport:
    """Derive precision, recall, F1, and accuracy from confusion counts.

    A zero denominator yields a 0 score with the metric's name recorded in
    ``degenerate_flags`` instead of a NaN.
    """
    if counts.total <= 0:
        raise ParameterError("summarize needs a nonzero sample count")
    degenerate: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp, "precision")
    recall = ratio(counts.tp, counts.tp + counts.fn, "recall")
    if precision + recall == 0.0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    accuracy = (counts.tp + counts.tn) / counts.total
    return MetricsReport(
        model=model,
        counts=counts,
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=accuracy,
        auc=auc,
        degenerate_flags=degenerate,
    )


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve, tie-aware.

    Computed through average ranks over tie groups (O(n log n)), which equals
    the Mann-Whitney statistic: (concordant pairs + 0.5 * tied pairs) / (P*N).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ParameterError(
            f"auc_roc: {scores.shape[0]} scores vs {labels.shape[0]} labels"
        )
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"ROC-AUC undefined: {n_pos} positive and {n_neg} negative samples"
        )

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based average rank shared by the whole tie group
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[pos].sum())
    return (rank_sum_pos - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg)


def report_from_scores(scores, labels, model: str, threshold: float = 0.5,
                       include_auc: bool = True) -> MetricsReport:
    """Full report straight from prediction scores.

    With ``include_auc`` the AUC is computed from the raw scores; a
    single-class label set leaves it None and flags "auc" as degenerate.
    Hard-label models pass ``include_auc=False`` (AUC stays None, unflagged).
    """
    counts = confusion(scores, labels, threshold)
    auc = None
    auc_degenerate = False
    if include_auc:
        try:
            auc = auc_roc(scores, labels)
        except MetricUndefinedError:
            auc_degenerate = True
    report = summarize(counts, model=model, auc=auc)
    if auc_degenerate:
        report.degenerate_flags.append("auc")
    return report


def render_report(reports: list[MetricsReport]) -> tuple[str, str]:
    """Render reports as (markdown table, JSON document).

    Markdown values are rounded to 3 decimals and a missing AUC (hard-label
    models) shows as "-"; the JSON document keeps full precision with a null
    AUC.
    """
    if not reports:
        raise ParameterError("render_report needs at least one report")
    lines = ["| Models | " + " | ".join(REPORT_COLUMNS) + " |"]
    lines.append("|" + " --- |" * (len(REPORT_COLUMNS) + 1))
    for r in reports:
        cells = [r.model]
        for v in (r.precision, r.recall, r.f1, r.accuracy):
            cells.append(f"{v:.3f}")
        cells.append("-" if r.auc is None else f"{r.auc:.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    markdown = "\n".join(lines) + "\n"
    doc = json.dumps([r.to_dict() for r in reports], indent=2)
    return markdown, doc
