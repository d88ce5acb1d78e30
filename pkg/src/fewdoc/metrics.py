"""Evaluation: span decoding, micro precision/recall/F1, AUROC, ROC export.

Spans are maximal runs of identical non-background unmasked labels; a
predicted span counts as a true positive only when an identical
(class, start, end) span exists in the same document's ground truth.
Precision/recall/F1 are micro-averaged over all documents of all tasks.

The in-task/background separation of a scorer is summarized per task by
AUROC computed as the Mann-Whitney statistic of the in-task scores (higher
score = more in-task), ties counted half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SingleClass
from .corpus import MASKED_LABEL, O_LABEL
from .ioutil import atomic_write_text


@dataclass(frozen=True)
class EntitySpan:
    doc_id: str
    entity_class: int
    start: int
    end: int  # inclusive


@dataclass
class MetricsReport:
    precision: float
    recall: float
    micro_f1: float
    true_spans: int
    pred_spans: int
    matched_spans: int
    n_tasks: int
    per_task_auroc: list[float] = field(default_factory=list)
    mean_auroc: float | None = None
    pooled_auroc: float | None = None
    skipped_auroc_tasks: int = 0

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "micro_f1": self.micro_f1,
            "counts": {
                "true_spans": self.true_spans,
                "pred_spans": self.pred_spans,
                "matched_spans": self.matched_spans,
            },
            "n_tasks": self.n_tasks,
            "per_task_auroc": self.per_task_auroc,
            "mean_auroc": self.mean_auroc,
            "pooled_auroc": self.pooled_auroc,
            "skipped_auroc_tasks": self.skipped_auroc_tasks,
        }


def decode_spans(labels, doc_id: str = "") -> list[EntitySpan]:
    """Maximal runs of identical non-background labels; masks break runs."""
    spans: list[EntitySpan] = []
    run_start = -1
    run_label = O_LABEL
    labels = list(labels)
    for i, label in enumerate(labels):
        if label == run_label and label >= 0:
            continue
        if run_label >= 0:
            spans.append(EntitySpan(doc_id, int(run_label), run_start, i - 1))
        run_start, run_label = i, label
    if run_label >= 0:
        spans.append(EntitySpan(doc_id, int(run_label), run_start, len(labels) - 1))
    return spans


def spans_to_labels(spans: list[EntitySpan], length: int) -> list[int]:
    """Expand spans over a background sequence (inverse of decode_spans)."""
    labels = [O_LABEL] * length
    for span in spans:
        for i in range(span.start, span.end + 1):
            labels[i] = span.entity_class
    return labels


def micro_prf1(
    predictions: list[list[EntitySpan]],
    ground_truth: list[list[EntitySpan]],
) -> MetricsReport:
    """Exact-match micro precision/recall/F1 over per-task span lists."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must align per task")
    tp = n_pred = n_true = 0
    for pred, true in zip(predictions, ground_truth):
        pred_set = {(s.doc_id, s.entity_class, s.start, s.end) for s in pred}
        true_set = {(s.doc_id, s.entity_class, s.start, s.end) for s in true}
        tp += len(pred_set & true_set)
        n_pred += len(pred_set)
        n_true += len(true_set)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        micro_f1=f1,
        true_spans=n_true,
        pred_spans=n_pred,
        matched_spans=tp,
        n_tasks=len(predictions),
    )


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.all() or not labels.any():
        raise SingleClass("need both in-task and background tokens for AUROC")


def auroc(scores, itd_labels) -> float:
    """P(random in-task token outscores random background token), ties half.

    Computed from average ranks, which matches the quadratic pairwise count
    exactly (rank sums and half-ties are exact in float64).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(itd_labels, dtype=bool)
    _check_two_classes(labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = ranks[labels].sum()
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # (fpr, tpr), sorted
    task_id: str = ""

    def area(self) -> float:
        pts = np.asarray(self.points)
        return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def roc_points(scores, itd_labels, task_id: str = "") -> RocCurve:
    """ROC points at every distinct threshold, from (0,0) to (1,1).

    The trapezoidal area under the returned polyline equals `auroc` (ties
    produce diagonal segments).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(itd_labels, dtype=bool)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # Keep only the last index of each tied score block.
    distinct = np.flatnonzero(np.diff(sorted_scores, append=np.nan) != 0)
    points = [(0.0, 0.0)]
    points.extend(
        (float(fp[i]) / n_neg, float(tp[i]) / n_pos) for i in distinct
    )
    return RocCurve(points, task_id)


def save_roc_csv(curve: RocCurve, path: str) -> None:
    lines = ["fpr,tpr"]
    lines.extend(f"{fpr!r},{tpr!r}" for fpr, tpr in curve.points)
    atomic_write_text(path, "\n".join(lines) + "\n")


def attach_auroc(report: MetricsReport, per_task_scores: list[tuple[np.ndarray, np.ndarray]]) -> MetricsReport:
    """Fill the AUROC fields from per-task (scores, itd_labels) pairs.

    Tasks with a single class among scored tokens are skipped in the mean
    and counted; a pooled AUROC over all tokens is reported alongside.
    """
    per_task = []
    skipped = 0
    pooled_scores, pooled_labels = [], []
    for scores, labels in per_task_scores:
        pooled_scores.append(np.asarray(scores, dtype=np.float64))
        pooled_labels.append(np.asarray(labels, dtype=bool))
        try:
            per_task.append(auroc(scores, labels))
        except SingleClass:
            skipped += 1
    report.per_task_auroc = per_task
    report.skipped_auroc_tasks = skipped
    report.mean_auroc = float(np.mean(per_task)) if per_task else None
    if pooled_scores:
        try:
            report.pooled_auroc = auroc(
                np.concatenate(pooled_scores), np.concatenate(pooled_labels)
            )
        except SingleClass:
            report.pooled_auroc = None
    return report


def dump_embeddings(path: str, records: list[dict]) -> None:
    """One JSON line per unmasked token: vector, labels, score, position."""
    lines = []
    for rec in records:
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def embedding_record(
    doc_id: str,
    token_index: int,
    vector: np.ndarray,
    true_label: int,
    pred_label: int,
    itd_score: float | None,
) -> dict:
    return {
        "doc_id": doc_id,
        "token": token_index,
        "vector": [float(x) for x in vector],
        "true_label": int(true_label),
        "pred_label": int(pred_label),
        "itd_score": None if itd_score is None else float(itd_score),
    }
