"""Episode construction: class splits and soft-shot task sampling.

A task asks for N target entity types and a support/query document pair in
which every target type has between K and floor(rho*K) unmasked occurrences
(K_q and floor(rho*K_q) on the query side). Documents are drawn greedily:
always extend the class with the fewest collected occurrences, remove each
drawn document from every candidate list, and mask surplus occurrences of a
type once its budget is exceeded. There is no backtracking; an exhausted
candidate list aborts the draw and the dataset sampler retries with a fresh
class set.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .corpus import (
    Corpus,
    Document,
    EntityOccurrence,
    MASKED_LABEL,
    O_LABEL,
    count_occurrences,
    document_to_json,
    extract_occurrences,
)
from .errors import ClassPoolTooSmall, DatasetInfeasible, SchemaError, TaskInfeasible
from .ioutil import atomic_write_text
from .seeding import derive_seed

logger = logging.getLogger(__name__)

TASK_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint base/novel partition of the class catalog."""

    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    gamma: float
    u_threshold: int

    def pool(self, phase: str) -> tuple[int, ...]:
        return self.base_classes if phase == "train" else self.novel_classes


@dataclass(frozen=True)
class TaskSpec:
    """Shape of one episode draw."""

    n_way: int
    k_shot: int
    k_query: int
    rho: float
    seed: int
    phase: str = "train"
    max_docs: int = 32  # hard cap per set, guards pathological corpora

    def __post_init__(self) -> None:
        if self.n_way < 1 or self.k_shot < 1 or self.k_query < 1:
            raise ValueError("n_way, k_shot and k_query must all be >= 1")
        if self.rho <= 1.0:
            raise ValueError(f"rho must exceed 1, got {self.rho}")
        if self.phase not in ("train", "test"):
            raise ValueError(f"phase must be 'train' or 'test', got {self.phase!r}")
        if self.max_docs < 1:
            raise ValueError("max_docs must be >= 1")

    @property
    def support_cap(self) -> int:
        return int(np.floor(self.rho * self.k_shot))

    @property
    def query_cap(self) -> int:
        return int(np.floor(self.rho * self.k_query))


@dataclass(frozen=True)
class Task:
    """One episode: target classes, support/query documents, provenance.

    Document labels are converted: relative ids 0..N-1 for target types in
    `target_classes` order, ``O_LABEL`` for background and out-of-task
    types, ``MASKED_LABEL`` for surplus occurrences. `provenance` maps each
    relative id back to its original catalog index.
    """

    target_classes: tuple[int, ...]
    support: tuple[Document, ...]
    query: tuple[Document, ...]
    provenance: dict[int, int]

    @property
    def n_way(self) -> int:
        return len(self.target_classes)

    @cached_property
    def documents(self) -> tuple[Document, ...]:
        """All documents, support first; global doc indices refer to this order."""
        return self.support + self.query

    @cached_property
    def masks(self) -> tuple[tuple[bool, ...], ...]:
        """Per-document exclusion masks (True = masked), support then query."""
        return tuple(
            tuple(lab == MASKED_LABEL for lab in doc.labels) for doc in self.documents
        )


@dataclass(frozen=True)
class EpisodeDataset:
    tasks: tuple[Task, ...]
    spec: TaskSpec
    split: ClassSplit


def split_classes(corpus: Corpus, gamma: float, u_threshold: int, seed: int) -> ClassSplit:
    """Split the catalog into base (train) and novel (test) classes.

    Any class occurring in fewer than `u_threshold` documents is forced
    novel; the remaining novel slots (up to round(gamma * n_classes)) are
    filled by seeded uniform sampling. If forced classes alone exceed the
    target, all of them are kept and a warning is logged.
    """
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")
    doc_freq = {c: nd for c, (_, nd) in count_occurrences(corpus).items()}
    forced = sorted(c for c in range(corpus.n_classes) if doc_freq[c] < u_threshold)
    n_novel = round(gamma * corpus.n_classes)
    if len(forced) > n_novel:
        logger.warning(
            "forced low-frequency classes (%d) exceed the novel target (%d); "
            "keeping all forced classes",
            len(forced),
            n_novel,
        )
        novel = set(forced)
    else:
        rng = np.random.default_rng(seed)
        eligible = sorted(set(range(corpus.n_classes)) - set(forced))
        picked = rng.choice(len(eligible), size=n_novel - len(forced), replace=False)
        novel = set(forced) | {eligible[i] for i in picked}
    base = tuple(sorted(set(range(corpus.n_classes)) - novel))
    return ClassSplit(base, tuple(sorted(novel)), gamma, u_threshold)


def build_candidate_index(corpus: Corpus, classes: set[int] | tuple[int, ...]) -> dict[int, list[str]]:
    """Per class, the doc_ids of documents containing at least one occurrence."""
    index: dict[int, list[str]] = {int(c): [] for c in classes}
    wanted = set(int(c) for c in classes)
    for doc in corpus.documents:
        present = {occ.entity_type for occ in extract_occurrences(doc)} & wanted
        for c in sorted(present):
            index[c].append(doc.doc_id)
    return index


def _doc_occurrences_by_type(doc: Document, classes: tuple[int, ...]) -> dict[int, list[EntityOccurrence]]:
    by_type: dict[int, list[EntityOccurrence]] = {c: [] for c in classes}
    for occ in extract_occurrences(doc):
        if occ.entity_type in by_type:
            by_type[occ.entity_type].append(occ)
    return by_type


def _sample_doc_set(
    corpus: Corpus,
    target_classes: tuple[int, ...],
    candidates: dict[int, list[str]],
    k: int,
    cap: int,
    max_docs: int,
    rng: np.random.Generator,
) -> list[tuple[Document, np.ndarray]]:
    """One greedy sampling loop; returns (document, working labels) pairs.

    Working labels start as the original labels with surplus occurrences
    already set to ``MASKED_LABEL``. The caller runs this once for support
    and once for query: candidate lists are shared, so support documents
    are never revisited by the query loop.
    """
    counts = {c: 0 for c in target_classes}
    selected: list[tuple[Document, np.ndarray]] = []
    while min(counts.values()) < k:
        if len(selected) >= max_docs:
            raise TaskInfeasible(
                f"document cap {max_docs} reached with counts {counts}"
            )
        # Least-covered class; ties broken by lowest catalog index.
        short = min(counts.values())
        chosen_cls = min(c for c in target_classes if counts[c] == short)
        pool = candidates[chosen_cls]
        if not pool:
            raise TaskInfeasible(
                f"no remaining candidate documents for class {chosen_cls}"
            )
        doc = corpus.documents[corpus.doc_index[pool[int(rng.integers(len(pool)))]]]
        for c in target_classes:
            try:
                candidates[c].remove(doc.doc_id)
            except ValueError:
                pass
        labels = doc.label_array.copy()
        by_type = _doc_occurrences_by_type(doc, target_classes)
        for c in target_classes:
            occs = by_type[c]
            if not occs:
                continue
            counts[c] += len(occs)
            surplus = counts[c] - cap
            if surplus > 0:
                # Mask the latest-added occurrences, last-in-reading-order
                # first; earlier documents are never revisited.
                for occ in occs[len(occs) - surplus :]:
                    labels[occ.start : occ.end + 1] = MASKED_LABEL
                counts[c] = cap
        selected.append((doc, labels))
    return selected


def convert_labels(task: Task) -> Task:
    """Relabel documents into the task-relative scheme.

    Target types map to 0..N-1 in `target_classes` order, everything else
    becomes background; masked tokens are preserved. The provenance map
    records the inverse mapping.
    """
    mapping = {orig: rel for rel, orig in enumerate(task.target_classes)}

    def convert(doc: Document) -> Document:
        new_labels = tuple(
            MASKED_LABEL
            if lab == MASKED_LABEL
            else mapping.get(lab, O_LABEL)
            for lab in doc.labels
        )
        return replace(doc, labels=new_labels)

    return Task(
        target_classes=task.target_classes,
        support=tuple(convert(d) for d in task.support),
        query=tuple(convert(d) for d in task.query),
        provenance={rel: orig for orig, rel in mapping.items()},
    )


def restore_labels(task: Task) -> Task:
    """Inverse of convert_labels on unmasked tokens (background stays O)."""
    def restore(doc: Document) -> Document:
        new_labels = tuple(
            task.provenance.get(lab, lab) if lab >= 0 else lab for lab in doc.labels
        )
        return replace(doc, labels=new_labels)

    return Task(
        target_classes=task.target_classes,
        support=tuple(restore(d) for d in task.support),
        query=tuple(restore(d) for d in task.query),
        provenance=dict(task.provenance),
    )


def xdr_sample_task(corpus: Corpus, split: ClassSplit, spec: TaskSpec) -> Task:
    """Draw one task by cross-document rejection sampling.

    Picks N target classes from the phase pool, then fills the support set
    and the query set with the greedy least-covered-class loop. Surplus
    occurrences are masked so every target class ends with between K and
    floor(rho*K) unmasked support occurrences (K_q bounds on query).
    """
    rng = np.random.default_rng(spec.seed)
    pool = split.pool(spec.phase)
    if len(pool) < spec.n_way:
        raise ClassPoolTooSmall(
            f"{spec.phase} pool has {len(pool)} classes, need {spec.n_way}"
        )
    picked = rng.choice(len(pool), size=spec.n_way, replace=False)
    target_classes = tuple(int(pool[i]) for i in picked)

    candidates = build_candidate_index(corpus, target_classes)
    support = _sample_doc_set(
        corpus, target_classes, candidates, spec.k_shot, spec.support_cap,
        spec.max_docs, rng,
    )
    query = _sample_doc_set(
        corpus, target_classes, candidates, spec.k_query, spec.query_cap,
        spec.max_docs, rng,
    )

    def with_labels(pairs: list[tuple[Document, np.ndarray]]) -> tuple[Document, ...]:
        return tuple(
            replace(doc, labels=tuple(int(v) for v in labels)) for doc, labels in pairs
        )

    raw = Task(
        target_classes=target_classes,
        support=with_labels(support),
        query=with_labels(query),
        provenance={},
    )
    return convert_labels(raw)


def sample_meta_dataset(
    corpus: Corpus,
    split: ClassSplit,
    spec: TaskSpec,
    n_tasks: int,
    retry_budget: int = 64,
) -> EpisodeDataset:
    """Sample `n_tasks` tasks, retrying infeasible draws with fresh seeds."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    tasks = []
    for i in range(n_tasks):
        base_seed = spec.seed + i
        task = None
        for attempt in range(retry_budget):
            attempt_seed = base_seed if attempt == 0 else derive_seed(
                base_seed, "task-retry", attempt
            )
            try:
                task = xdr_sample_task(corpus, split, replace(spec, seed=attempt_seed))
                break
            except TaskInfeasible:
                continue
        if task is None:
            raise DatasetInfeasible(
                f"task {i}: no feasible draw within {retry_budget} attempts"
            )
        tasks.append(task)
    return EpisodeDataset(tuple(tasks), spec, split)


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------
#
# Task files carry converted labels with both background and masked tokens
# stored as -1; the explicit `mask` arrays (support docs first, then query
# docs) disambiguate the two on load.


def task_to_json(task: Task) -> dict:
    def doc_json(doc: Document) -> dict:
        obj = document_to_json(doc)
        obj["labels"] = [(-1 if lab < 0 else lab) for lab in doc.labels]
        return obj

    return {
        "schema": TASK_SCHEMA_VERSION,
        "target_classes": list(task.target_classes),
        "support": [doc_json(d) for d in task.support],
        "query": [doc_json(d) for d in task.query],
        "mask": [list(m) for m in task.masks],
        "provenance": {str(rel): orig for rel, orig in task.provenance.items()},
    }


def task_from_json(obj: dict) -> Task:
    try:
        target_classes = tuple(int(c) for c in obj["target_classes"])
        n_way = len(target_classes)
        masks = obj["mask"]
        provenance = {int(k): int(v) for k, v in obj["provenance"].items()}

        def doc_from(doc_obj: dict, mask: list[bool]) -> Document:
            from .corpus import TokenFeatures

            tokens = tuple(
                TokenFeatures(int(t["token_id"]), i, tuple(float(c) for c in t["bbox"]))
                for i, t in enumerate(doc_obj["tokens"])
            )
            labels = []
            for i, lab in enumerate(doc_obj["labels"]):
                if mask[i]:
                    labels.append(MASKED_LABEL)
                elif lab == -1:
                    labels.append(O_LABEL)
                elif 0 <= lab < n_way:
                    labels.append(int(lab))
                else:
                    raise SchemaError(f"converted label {lab} outside 0..{n_way - 1}")
            return Document(
                doc_obj["doc_id"], doc_obj.get("domain_tag", ""), tokens, tuple(labels)
            )

        support_docs = obj["support"]
        query_docs = obj["query"]
        if len(masks) != len(support_docs) + len(query_docs):
            raise SchemaError("mask array count does not match document count")
        support = tuple(
            doc_from(d, masks[i]) for i, d in enumerate(support_docs)
        )
        query = tuple(
            doc_from(d, masks[len(support_docs) + i]) for i, d in enumerate(query_docs)
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed task object: {exc}") from exc
    return Task(target_classes, support, query, provenance)


def save_episode_dataset(dataset: EpisodeDataset, out_dir: str) -> str:
    """Write per-task JSON files plus a manifest; returns the manifest path."""
    tasks_dir = os.path.join(out_dir, "tasks")
    os.makedirs(tasks_dir, exist_ok=True)
    rel_paths = []
    for i, task in enumerate(dataset.tasks):
        rel = os.path.join("tasks", f"task_{i:05d}.json")
        atomic_write_text(
            os.path.join(out_dir, rel), json.dumps(task_to_json(task)) + "\n"
        )
        rel_paths.append(rel)
    manifest = {
        "schema": TASK_SCHEMA_VERSION,
        "spec": {
            "n_way": dataset.spec.n_way,
            "k_shot": dataset.spec.k_shot,
            "k_query": dataset.spec.k_query,
            "rho": dataset.spec.rho,
            "seed": dataset.spec.seed,
            "phase": dataset.spec.phase,
            "max_docs": dataset.spec.max_docs,
        },
        "split": {
            "base_classes": list(dataset.split.base_classes),
            "novel_classes": list(dataset.split.novel_classes),
            "gamma": dataset.split.gamma,
            "u_threshold": dataset.split.u_threshold,
        },
        "tasks": rel_paths,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    atomic_write_text(manifest_path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest_path


def load_episode_dataset(manifest_path: str) -> EpisodeDataset:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    spec = TaskSpec(**manifest["spec"])
    split_obj = manifest["split"]
    split = ClassSplit(
        tuple(split_obj["base_classes"]),
        tuple(split_obj["novel_classes"]),
        split_obj["gamma"],
        split_obj["u_threshold"],
    )
    tasks = []
    for rel in manifest["tasks"]:
        with open(os.path.join(base, rel), "r", encoding="utf-8") as fh:
            tasks.append(task_from_json(json.load(fh)))
    return EpisodeDataset(tuple(tasks), spec, split)
