"""Task-level contrastive loss over query tokens and prototypes.

Every unmasked in-task query token is an anchor. Its positive set holds the
other query tokens of the same class plus that class's prototype; the
candidate set holds every unmasked support/query embedding except the
anchor itself, plus all class prototypes. With dot-product similarity the
per-anchor objective is

    (1/|A+|) * sum_{v in A+} [ logsumexp_{u in A} (h.u) - h.v ]

summed over anchors, which is non-negative because A+ is a subset of A.

Gradients are exact and returned both for the token embeddings and for the
prototypes; `total_embedding_gradients` additionally pushes the prototype
gradient back onto the support tokens that average into it.
"""

from __future__ import annotations

import numpy as np

from ..encoder import EmbeddingBatch
from ..errors import NonFinite
from ..sampler import Task
from .prototypes import TaskStatistics, compute_prototypes
from .taskview import TaskView


def contrastive_core(
    matrix: np.ndarray,
    labels: np.ndarray,
    is_support: np.ndarray,
    prototypes: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and exact gradients on stacked unmasked rows plus prototypes.

    Anchors with an empty positive set contribute nothing (possible only
    when a class has no prototype row, e.g. prototypes disabled upstream).
    Returns (loss, d_matrix, d_prototypes).
    """
    if not np.all(np.isfinite(matrix)) or not np.all(np.isfinite(prototypes)):
        raise NonFinite("contrastive loss received non-finite embeddings")
    m, d = matrix.shape
    n_protos = prototypes.shape[0]
    z = np.vstack([matrix, prototypes]) if n_protos else matrix.copy()

    anchor_rows = np.flatnonzero(~is_support & (labels >= 0))
    if len(anchor_rows) == 0:
        raise ValueError("task has no unmasked in-task query token")

    n_anchors = len(anchor_rows)
    positives = np.zeros((n_anchors, z.shape[0]), dtype=bool)
    query_itd = ~is_support & (labels >= 0)
    for i, row in enumerate(anchor_rows):
        y = labels[row]
        positives[i, :m] = query_itd & (labels == y)
        positives[i, row] = False
        if y < n_protos:
            positives[i, m + y] = True
    pos_counts = positives.sum(axis=1)
    valid = pos_counts > 0
    anchor_rows = anchor_rows[valid]
    positives = positives[valid]
    pos_counts = pos_counts[valid]
    if len(anchor_rows) == 0:
        return 0.0, np.zeros_like(matrix), np.zeros_like(prototypes)

    h_a = matrix[anchor_rows]
    logits = h_a @ z.T
    masked = logits.copy()
    masked[np.arange(len(anchor_rows)), anchor_rows] = -np.inf

    shift = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - shift)
    denom = expd.sum(axis=1, keepdims=True)
    lse = (shift + np.log(denom))[:, 0]
    weights = positives / pos_counts[:, None]
    loss = float(lse.sum() - (weights * logits).sum())

    p = expd / denom
    diff = p - weights
    d_all = np.zeros_like(z)
    np.add.at(d_all, anchor_rows, diff @ z)  # anchor role
    d_all += diff.T @ h_a  # candidate role
    return loss, d_all[:m], d_all[m:]


def meta_contrastive_loss(
    embeddings, stats: TaskStatistics, task: Task
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Loss plus gradients w.r.t. per-document embeddings and prototypes."""
    view = embeddings if isinstance(embeddings, TaskView) else TaskView(task, embeddings)
    loss, d_matrix, d_protos = contrastive_core(
        view.matrix, view.labels, view.is_support, stats.prototypes
    )
    per_doc = view.scatter_to_docs(np.arange(len(view.refs)), d_matrix)
    return loss, per_doc, d_protos


def total_embedding_gradients(
    task: Task, embeddings, stats: TaskStatistics | None = None
) -> tuple[float, list[np.ndarray]]:
    """Loss and full embedding gradient, prototype terms chained back.

    Each class prototype is the mean of its support rows, so those rows
    each receive d_prototype / count on top of their direct term.
    """
    view = embeddings if isinstance(embeddings, TaskView) else TaskView(task, embeddings)
    if stats is None:
        stats = compute_prototypes(view, task)
    loss, d_matrix, d_protos = contrastive_core(
        view.matrix, view.labels, view.is_support, stats.prototypes
    )
    for c in range(task.n_way):
        rows = view.support_class_rows(c)
        d_matrix[rows] += d_protos[c] / len(rows)
    per_doc = view.scatter_to_docs(np.arange(len(view.refs)), d_matrix)
    return loss, per_doc
