"""Index bookkeeping for a task's embedding space.

All statistics, losses and classifiers operate on *unmasked* tokens only.
A TaskView stacks the per-document embeddings once and records, for every
unmasked token, its global (document, token) coordinates and converted
label, plus the standard index sets: per-class support tokens, background
support tokens, in-task query tokens, all support tokens, all tokens.
Documents are indexed globally with support docs first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import MASKED_LABEL, O_LABEL
from ..encoder import EmbeddingBatch, EncoderParams, encode_document
from ..sampler import Task


def encode_task(params: EncoderParams, task: Task) -> list[EmbeddingBatch]:
    """Embeddings for every task document, support first."""
    return [encode_document(params, doc) for doc in task.documents]


@dataclass
class TokenRef:
    doc: int  # global doc index (support first)
    token: int


class TaskView:
    """Stacked unmasked embeddings plus the task's index sets."""

    def __init__(self, task: Task, embeddings: list[EmbeddingBatch]):
        if len(embeddings) != len(task.documents):
            raise ValueError(
                f"{len(embeddings)} embedding batches for {len(task.documents)} documents"
            )
        self.task = task
        self.n_way = task.n_way
        self.n_support_docs = len(task.support)
        self.doc_lengths = [len(d) for d in task.documents]

        refs: list[tuple[int, int]] = []
        labels: list[int] = []
        rows: list[np.ndarray] = []
        for di, (doc, batch) in enumerate(zip(task.documents, embeddings)):
            lab = doc.label_array
            for ti in range(len(doc)):
                if lab[ti] == MASKED_LABEL:
                    continue
                refs.append((di, ti))
                labels.append(int(lab[ti]))
                rows.append(batch.vectors[ti])
        self.refs = refs
        self.labels = np.array(labels, dtype=np.int64)
        self.matrix = np.vstack(rows) if rows else np.zeros((0, 0))
        self.is_support = np.array(
            [di < self.n_support_docs for di, _ in refs], dtype=bool
        )

    # -- index sets (positions into self.matrix) ------------------------

    def support_class_rows(self, rel_class: int) -> np.ndarray:
        return np.flatnonzero(self.is_support & (self.labels == rel_class))

    def support_otd_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_support & (self.labels == O_LABEL))

    def support_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_support)

    def query_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_support)

    def query_itd_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_support & (self.labels >= 0))

    def refs_of(self, rows: np.ndarray) -> list[tuple[int, int]]:
        return [self.refs[int(r)] for r in rows]

    def scatter_to_docs(self, rows: np.ndarray, grads: np.ndarray) -> list[np.ndarray]:
        """Spread per-row gradients into zero-padded per-document [L, d] arrays."""
        d = grads.shape[1]
        out = [np.zeros((length, d)) for length in self.doc_lengths]
        for row, g in zip(rows, grads):
            di, ti = self.refs[int(row)]
            out[di][ti] += g
        return out
