"""Simulated multi-worker adaptation within one task.

Workers are logical: a task's documents are partitioned across W shards,
each shard adapts locally, and results are aggregated in fixed worker
order, so sequential and concurrent execution are bit-identical.

Two aggregation families:

* gradient-based — every worker takes one local full-batch SGD step per
  inner step; parameters are averaged across non-empty shards after each
  step and redistributed.
* metric-based — workers contribute per-class embedding sums and counts;
  global prototypes, centered scatter sums, and the calibration scores are
  assembled from those, which reproduces the centralized statistics up to
  float associativity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import Document, O_LABEL
from .encoder import EncoderParams, encode_document, param_average
from .errors import NonPsd
from .metalearn.decoders import DecoderParams, InnerLoopConfig, sgd_step, stack_labeled_tokens, token_loss
from .metalearn.prototypes import TaskStatistics
from .sampler import Task


@dataclass(frozen=True)
class WorkerShard:
    worker_id: int
    support: tuple[Document, ...]
    query: tuple[Document, ...]


@dataclass(frozen=True)
class FederatedConfig:
    n_workers: int
    aggregate_every: int = 1  # inner steps between parameter averages

    def __post_init__(self) -> None:
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.aggregate_every < 1:
            raise ValueError("aggregate_every must be >= 1")


def partition_task(task: Task, n_workers: int, seed: int) -> list[WorkerShard]:
    """Round-robin document assignment after a seeded shuffle.

    Within each shard documents keep their original order, so the W=1
    shard is exactly the task and full-batch arithmetic matches the
    single-machine path bit for bit.
    """
    rng = np.random.default_rng(seed)

    def assign(docs: tuple[Document, ...]) -> list[list[Document]]:
        order = rng.permutation(len(docs))
        shards: list[list[int]] = [[] for _ in range(n_workers)]
        for slot, doc_idx in enumerate(order):
            shards[slot % n_workers].append(int(doc_idx))
        return [[docs[i] for i in sorted(shard)] for shard in shards]

    support_shards = assign(task.support)
    query_shards = assign(task.query)
    return [
        WorkerShard(w, tuple(support_shards[w]), tuple(query_shards[w]))
        for w in range(n_workers)
    ]


def federated_inner_loop(
    enc: EncoderParams,
    dec: DecoderParams,
    shards: list[WorkerShard],
    cfg: InnerLoopConfig,
    adapt_encoder: bool,
    n_way: int,
    fed: FederatedConfig,
    use_query: bool = False,
):
    """Gradient-based local adaptation with periodic parameter averaging."""
    worker_docs = [
        (s.support + s.query if use_query else s.support) for s in shards
    ]
    active = [w for w, docs in enumerate(worker_docs) if len(docs)]
    if not active:
        raise ValueError("every shard is empty")
    features = None
    if not adapt_encoder:
        # Frozen encoder: features stay valid for the whole loop.
        features = {
            w: [encode_document(enc, d).vectors for d in worker_docs[w]] for w in active
        }
    cur = {w: (enc, dec) for w in active}
    losses = []
    since_agg = 0
    for step in range(cfg.steps):
        step_losses = []
        for w in active:
            e, d = cur[w]
            e2, d2, loss = sgd_step(
                e, d, worker_docs[w], n_way, cfg.loss, cfg.lr, adapt_encoder,
                features[w] if features is not None else None,
            )
            cur[w] = (e2, d2)
            step_losses.append(loss)
        losses.append(step_losses)
        since_agg += 1
        if since_agg >= fed.aggregate_every or step == cfg.steps - 1:
            dec_avg = param_average([cur[w][1] for w in active])
            enc_avg = param_average([cur[w][0] for w in active]) if adapt_encoder else enc
            cur = {w: (enc_avg, dec_avg) for w in active}
            since_agg = 0
    final_enc, final_dec = cur[active[0]]
    return final_enc, final_dec, losses


def federated_task_statistics(
    task: Task,
    shards: list[WorkerShard],
    enc: EncoderParams,
    ridge: float | None = None,
    quantile: float = 1.0,
    margin: float = 1.5,
    include_otd: bool = False,
) -> TaskStatistics:
    """Metric-based aggregation: exact global prototypes and covariances.

    Round one collects per-class sums/counts from each worker (global
    means); round two collects scatter sums around the broadcast means and
    the local calibration scores.
    """
    n_way = task.n_way
    per_worker: list[dict] = []
    d = enc.arch.d_out
    for shard in shards:
        rows: dict[int, list[np.ndarray]] = {c: [] for c in range(n_way)}
        otd_rows: list[np.ndarray] = []
        for doc in shard.support:
            vec = encode_document(enc, doc).vectors
            lab = doc.label_array
            for ti in range(len(doc)):
                if lab[ti] >= 0:
                    rows[int(lab[ti])].append(vec[ti])
                elif lab[ti] == O_LABEL:
                    otd_rows.append(vec[ti])
        per_worker.append({"rows": rows, "otd": otd_rows})

    prototypes = np.zeros((n_way, d))
    counts = np.zeros(n_way, dtype=np.int64)
    for c in range(n_way):
        total = np.zeros(d)
        n = 0
        for w in per_worker:
            if w["rows"][c]:
                total += np.sum(w["rows"][c], axis=0)
                n += len(w["rows"][c])
        if n == 0:
            raise NonPsd(f"class {c} absent from every shard")
        prototypes[c] = total / n
        counts[c] = n

    otd_counts = sum(len(w["otd"]) for w in per_worker)
    otd_prototype = None
    if include_otd and otd_counts:
        otd_prototype = (
            np.sum([np.sum(w["otd"], axis=0) for w in per_worker if w["otd"]], axis=0)
            / otd_counts
        )

    covariances = np.zeros((n_way, d, d))
    chols = np.zeros_like(covariances)
    for c in range(n_way):
        scatter = np.zeros((d, d))
        for w in per_worker:
            for row in w["rows"][c]:
                centered = row - prototypes[c]
                scatter += np.outer(centered, centered)
        cov = scatter / counts[c]
        eps = ridge if ridge is not None else max(1e-6 * np.trace(cov) / d, 1e-9)
        cov = cov + eps * np.eye(d)
        try:
            chols[c] = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonPsd(f"class {c} covariance is not positive definite") from exc
        covariances[c] = cov

    stats = TaskStatistics(
        n_way=n_way,
        prototypes=prototypes,
        class_counts=counts,
        otd_prototype=otd_prototype,
        covariances=covariances,
        chol_factors=chols,
    )
    from .metalearn.prototypes import mahalanobis_score

    scores = []
    for shard in shards:
        for doc in shard.support:
            vec = encode_document(enc, doc).vectors
            lab = doc.label_array
            itd = vec[lab >= 0]
            if len(itd):
                scores.append(np.atleast_1d(mahalanobis_score(itd, stats)))
    all_scores = np.concatenate(scores)
    return replace(stats, threshold=float(np.quantile(all_scores, quantile) * margin))


def federated_adapt(
    enc: EncoderParams,
    dec: DecoderParams | None,
    task: Task,
    fed: FederatedConfig,
    cfg: InnerLoopConfig | None = None,
    adapt_encoder: bool = False,
    seed: int = 0,
    metric: bool = False,
    **stat_kwargs,
):
    """Partition the task and run one of the two adaptation families."""
    shards = partition_task(task, fed.n_workers, seed)
    if metric:
        return federated_task_statistics(task, shards, enc, **stat_kwargs)
    if cfg is None or dec is None:
        raise ValueError("gradient-based adaptation needs a decoder and a config")
    return federated_inner_loop(
        enc, dec, shards, cfg, adapt_encoder, task.n_way, fed
    )


def federated_validate(
    enc: EncoderParams,
    dec: DecoderParams,
    shards: list[WorkerShard],
    n_way: int,
    mode: str,
    token_weighted: bool = True,
) -> float:
    """Combine per-worker query losses; empty query shards are skipped.

    Token-count weighting makes the result equal the whole-set loss; the
    plain per-worker mean is available for protocol fidelity.
    """
    losses, weights = [], []
    for shard in shards:
        if not shard.query:
            continue
        feats = [encode_document(enc, d).vectors for d in shard.query]
        h, classes, _ = stack_labeled_tokens(shard.query, feats)
        if h.shape[0] == 0:
            continue
        losses.append(token_loss(dec, h, classes, n_way, mode))
        weights.append(h.shape[0])
    if not losses:
        raise ValueError("no worker has query tokens")
    if token_weighted:
        return float(np.dot(losses, weights) / np.sum(weights))
    return float(np.mean(losses))
