"""Meta-updates for the metric-based learners.

Both steps encode a batch of tasks, differentiate a task-level loss back
through the prototypes into the encoder, average the per-task gradients
and apply one optimizer update to the encoder parameters.

* `contrastproto_meta_step` uses the task contrastive loss.
* `protonet_meta_step` uses episodic cross-entropy over softmax of negative
  squared prototype distances (optionally with a background prototype),
  which is how the vanilla baselines are trained.
"""

from __future__ import annotations

import numpy as np

from ..encoder import EncoderParams, backward as encoder_backward
from ..errors import NonFiniteLoss
from ..sampler import Task
from .contrastive import total_embedding_gradients
from .prototypes import compute_otd_prototype, compute_prototypes
from .taskview import TaskView, encode_task


def _encoder_grad_from_per_doc(enc: EncoderParams, task: Task, per_doc) -> np.ndarray:
    grad = np.zeros_like(enc.flat)
    for doc, upstream in zip(task.documents, per_doc):
        grad += encoder_backward(enc, doc, upstream)
    return grad


def contrastproto_meta_step(enc: EncoderParams, tasks: list[Task], optimizer):
    """One optimizer update of the encoder from a batch of task losses."""
    batch_grad = np.zeros_like(enc.flat)
    losses = []
    for task in tasks:
        view = TaskView(task, encode_task(enc, task))
        loss, per_doc = total_embedding_gradients(task, view)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"contrastive loss is {loss}")
        losses.append(loss)
        batch_grad += _encoder_grad_from_per_doc(enc, task, per_doc)
    batch_grad /= len(tasks)
    new_enc = enc.with_flat(optimizer.step(enc.flat, batch_grad))
    return new_enc, losses


def prototype_xent_gradients(task: Task, view: TaskView, include_otd: bool):
    """Episodic cross-entropy loss and its total embedding gradient.

    Anchors are the unmasked query tokens: only the in-task ones without a
    background prototype (they are the only tokens with a target column),
    all of them with one. Prototype gradients are pushed back onto the
    averaged support rows.
    """
    stats = compute_prototypes(view, task)
    centers = stats.prototypes
    otd_rows = None
    if include_otd:
        centers = np.vstack([centers, compute_otd_prototype(view, task)])
        anchor_rows = view.query_rows()
        targets = np.where(
            view.labels[anchor_rows] >= 0, view.labels[anchor_rows], task.n_way
        )
        otd_rows = view.support_otd_rows()
    else:
        anchor_rows = view.query_itd_rows()
        targets = view.labels[anchor_rows]
    if len(anchor_rows) == 0:
        raise ValueError("task has no query anchor tokens")

    h_a = view.matrix[anchor_rows]
    sq = ((h_a[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = -sq
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    n_a = len(anchor_rows)
    loss = float(-np.log(p[np.arange(n_a), targets]).sum() / n_a)

    dlogits = p.copy()
    dlogits[np.arange(n_a), targets] -= 1.0
    dlogits /= n_a
    row_sums = dlogits.sum(axis=1)
    d_anchor = -2.0 * (row_sums[:, None] * h_a - dlogits @ centers)
    d_centers = 2.0 * (dlogits.T @ h_a - dlogits.sum(axis=0)[:, None] * centers)

    d_matrix = np.zeros_like(view.matrix)
    np.add.at(d_matrix, anchor_rows, d_anchor)
    for c in range(task.n_way):
        rows = view.support_class_rows(c)
        d_matrix[rows] += d_centers[c] / len(rows)
    if include_otd:
        d_matrix[otd_rows] += d_centers[task.n_way] / len(otd_rows)
    return loss, view.scatter_to_docs(np.arange(len(view.refs)), d_matrix)


def protonet_meta_step(enc: EncoderParams, tasks: list[Task], optimizer, include_otd: bool):
    batch_grad = np.zeros_like(enc.flat)
    losses = []
    for task in tasks:
        view = TaskView(task, encode_task(enc, task))
        loss, per_doc = prototype_xent_gradients(task, view, include_otd)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"prototype cross-entropy is {loss}")
        losses.append(loss)
        batch_grad += _encoder_grad_from_per_doc(enc, task, per_doc)
    batch_grad /= len(tasks)
    new_enc = enc.with_flat(optimizer.step(enc.flat, batch_grad))
    return new_enc, losses
