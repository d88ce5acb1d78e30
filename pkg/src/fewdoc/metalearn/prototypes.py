"""Per-task statistics: prototypes, covariances, background detection.

A task's embedding space is summarized by the mean embedding of each
target class over unmasked support tokens (prototypes), an optional mean
of the background support tokens, and per-class covariances used for a
minimum-Mahalanobis background score r(h). A token is declared background
when r(h) >= R, where R is calibrated from the support in-task scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from ..corpus import O_LABEL
from ..encoder import EmbeddingBatch
from ..errors import (
    EmptyClass,
    MissingOtdPrototype,
    NonPsd,
    NoOtdTokens,
)
from ..sampler import Task
from .taskview import TaskView


@dataclass
class TaskStatistics:
    """Prototype/covariance summary of one task's support embeddings."""

    n_way: int
    prototypes: np.ndarray  # [N, d]
    class_counts: np.ndarray  # [N] unmasked support tokens per class
    otd_prototype: np.ndarray | None = None
    covariances: np.ndarray | None = None  # [N, d, d], ridge included
    chol_factors: np.ndarray | None = None  # lower Cholesky of covariances
    threshold: float | None = None
    # Index sets as (global doc, token) pairs; support docs come first.
    class_token_refs: tuple[tuple[tuple[int, int], ...], ...] = ()
    otd_train_refs: tuple[tuple[int, int], ...] = ()
    val_itd_refs: tuple[tuple[int, int], ...] = ()
    train_all_refs: tuple[tuple[int, int], ...] = ()
    all_refs: tuple[tuple[int, int], ...] = ()


def _view(task: Task, embeddings: list[EmbeddingBatch]) -> TaskView:
    return embeddings if isinstance(embeddings, TaskView) else TaskView(task, embeddings)


def compute_prototypes(embeddings, task: Task) -> TaskStatistics:
    """Mean embedding per target class over unmasked support tokens."""
    view = _view(task, embeddings)
    d = view.matrix.shape[1]
    prototypes = np.zeros((task.n_way, d))
    counts = np.zeros(task.n_way, dtype=np.int64)
    class_refs = []
    for c in range(task.n_way):
        rows = view.support_class_rows(c)
        if len(rows) == 0:
            raise EmptyClass(f"class {c} has no unmasked support token")
        prototypes[c] = view.matrix[rows].mean(axis=0)
        counts[c] = len(rows)
        class_refs.append(tuple(view.refs_of(rows)))
    return TaskStatistics(
        n_way=task.n_way,
        prototypes=prototypes,
        class_counts=counts,
        class_token_refs=tuple(class_refs),
        otd_train_refs=tuple(view.refs_of(view.support_otd_rows())),
        val_itd_refs=tuple(view.refs_of(view.query_itd_rows())),
        train_all_refs=tuple(view.refs_of(view.support_rows())),
        all_refs=tuple(view.refs),
    )


def compute_otd_prototype(embeddings, task: Task) -> np.ndarray:
    """Mean embedding of the unmasked background support tokens."""
    view = _view(task, embeddings)
    rows = view.support_otd_rows()
    if len(rows) == 0:
        raise NoOtdTokens("support set has no unmasked background token")
    return view.matrix[rows].mean(axis=0)


def protonet_classify(
    h: np.ndarray, stats: TaskStatistics, include_otd: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over negative squared distances to the prototypes.

    Returns (probabilities, labels). Columns are class 0..N-1, plus a
    final background column when `include_otd`; ties resolve to the lowest
    column, and without the background prototype every token is forced
    into some entity class.
    """
    if include_otd and stats.otd_prototype is None:
        raise MissingOtdPrototype("background prototype was not computed")
    centers = stats.prototypes
    if include_otd:
        centers = np.vstack([centers, stats.otd_prototype])
    h2 = np.atleast_2d(h)
    sq = ((h2[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = -sq
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    choice = probs.argmax(axis=1)
    labels = np.where(choice >= stats.n_way, O_LABEL, choice)
    if np.ndim(h) == 1:
        return probs[0], labels[0]
    return probs, labels


def fit_covariance(embeddings, stats: TaskStatistics, task: Task, ridge: float | None = None) -> TaskStatistics:
    """Count-normalized per-class covariances with a ridge for definiteness.

    With ridge None, each class uses 1e-6 * trace(cov)/d (floored at 1e-9
    so single-token classes stay invertible).
    """
    view = _view(task, embeddings)
    d = view.matrix.shape[1]
    covariances = np.zeros((task.n_way, d, d))
    chols = np.zeros_like(covariances)
    for c in range(task.n_way):
        rows = view.support_class_rows(c)
        if len(rows) == 0:
            raise EmptyClass(f"class {c} has no unmasked support token")
        centered = view.matrix[rows] - stats.prototypes[c]
        cov = centered.T @ centered / len(rows)
        eps = ridge if ridge is not None else max(1e-6 * np.trace(cov) / d, 1e-9)
        cov = cov + eps * np.eye(d)
        try:
            chols[c] = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonPsd(f"class {c} covariance is not positive definite") from exc
        covariances[c] = cov
    return replace(stats, covariances=covariances, chol_factors=chols)


def mahalanobis_score(h: np.ndarray, stats: TaskStatistics) -> np.ndarray | float:
    """Minimum squared Mahalanobis distance over the task's classes.

    Solved through the cached Cholesky factors; no covariance is ever
    inverted explicitly.
    """
    if stats.chol_factors is None:
        raise NonPsd("covariances not fitted; call fit_covariance first")
    h2 = np.atleast_2d(h)
    scores = np.empty((h2.shape[0], stats.n_way))
    for c in range(stats.n_way):
        diff = (h2 - stats.prototypes[c]).T
        z = solve_triangular(stats.chol_factors[c], diff, lower=True)
        scores[:, c] = (z * z).sum(axis=0)
    r = scores.min(axis=1)
    return r if np.ndim(h) == 2 else float(r[0])


def calibrate_threshold(
    support_itd: np.ndarray,
    stats: TaskStatistics,
    quantile: float = 1.0,
    margin: float = 1.5,
) -> float:
    """Quantile of the support in-task scores, widened by `margin`."""
    scores = np.atleast_1d(mahalanobis_score(support_itd, stats))
    return float(np.quantile(scores, quantile) * margin)


def nn_classify(
    query_h: np.ndarray, support_h: np.ndarray, support_labels: np.ndarray
) -> np.ndarray:
    """Label of the support token with the largest inner product.

    Support rows must be in (document, token) order; argmax takes the
    first maximum, so ties resolve to the lowest index.
    """
    sims = np.atleast_2d(query_h) @ support_h.T
    picks = sims.argmax(axis=1)
    out = support_labels[picks]
    return out if np.ndim(query_h) == 2 else int(out[0])


def otd_detect_and_classify(
    query_h: np.ndarray,
    support_h: np.ndarray,
    support_labels: np.ndarray,
    stats: TaskStatistics,
) -> tuple[np.ndarray, np.ndarray]:
    """Background-gated nearest-neighbour labelling of query tokens.

    A token scoring r(h) >= threshold (boundary inclusive) is labelled
    background; anything else takes its nearest support token's label.
    Also returns -r(h) as the per-token in-task score.
    """
    if stats.threshold is None:
        raise NonPsd("threshold not calibrated")
    r = np.atleast_1d(mahalanobis_score(query_h, stats))
    nn = nn_classify(query_h, support_h, support_labels)
    labels = np.where(r >= stats.threshold, O_LABEL, nn)
    return labels, -r


def compute_task_statistics(
    task: Task,
    embeddings,
    include_otd: bool = False,
    with_covariance: bool = False,
    ridge: float | None = None,
    quantile: float = 1.0,
    margin: float = 1.5,
) -> TaskStatistics:
    """Prototype pipeline in one call; used by the evaluation drivers."""
    view = _view(task, embeddings)
    stats = compute_prototypes(view, task)
    if include_otd:
        stats = replace(stats, otd_prototype=compute_otd_prototype(view, task))
    if with_covariance:
        stats = fit_covariance(view, stats, task, ridge)
        itd_rows = np.flatnonzero(view.is_support & (view.labels >= 0))
        stats = replace(
            stats,
            threshold=calibrate_threshold(view.matrix[itd_rows], stats, quantile, margin),
        )
    return stats
