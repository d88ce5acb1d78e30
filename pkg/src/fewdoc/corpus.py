"""Token-labeled document corpora.

Data model for visually rich documents (token id, 1d sequence position and a
normalized bounding box per token), JSON ingestion/serialization, a seeded
synthetic generator, and entity-occurrence extraction.

Labels are plain integers. A non-negative value indexes the corpus class
catalog; ``O_LABEL`` marks background; ``MASKED_LABEL`` appears only inside
sampled episodes and marks tokens excluded from losses, statistics and
metrics. On disk background is stored as ``-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyCorpus, InfeasibleConfig, ParseError, SchemaError

O_LABEL = -1
MASKED_LABEL = -2

CORPUS_SCHEMA_VERSION = 1

# Synthetic vocabulary layout: background tokens first, then a contiguous
# id range per class so token identity carries class signal.
BACKGROUND_VOCAB = 64
TOKENS_PER_CLASS = 16
_GRID_ROW_WIDTH = 12


@dataclass(frozen=True)
class TokenFeatures:
    """One token's multimodal features: vocabulary id, 1d position, 2d box."""

    token_id: int
    pos_1d: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.token_id < 0:
            raise SchemaError(f"token_id must be non-negative, got {self.token_id}")
        if self.pos_1d < 0:
            raise SchemaError(f"pos_1d must be non-negative, got {self.pos_1d}")
        if len(self.bbox) != 4:
            raise SchemaError(f"bbox must have 4 coordinates, got {len(self.bbox)}")
        x0, y0, x1, y1 = self.bbox
        if not all(0.0 <= c <= 1.0 for c in self.bbox):
            raise SchemaError(f"bbox coordinates must lie in [0,1], got {self.bbox}")
        if x0 > x1 or y0 > y1:
            raise SchemaError(f"bbox must satisfy x0<=x1 and y0<=y1, got {self.bbox}")


@dataclass(frozen=True)
class Document:
    """An ordered token sequence with one label per token.

    In a raw corpus, labels are catalog indices or ``O_LABEL``. Inside a
    sampled episode the same type carries converted labels (relative ids,
    ``O_LABEL``, or ``MASKED_LABEL``).
    """

    doc_id: str
    domain_tag: str
    tokens: tuple[TokenFeatures, ...]
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) == 0:
            raise SchemaError(f"document {self.doc_id!r} has no tokens")
        if len(self.tokens) != len(self.labels):
            raise SchemaError(
                f"document {self.doc_id!r}: {len(self.tokens)} tokens but "
                f"{len(self.labels)} labels"
            )
        for i, tok in enumerate(self.tokens):
            if tok.pos_1d != i:
                raise SchemaError(
                    f"document {self.doc_id!r}: token {i} has pos_1d {tok.pos_1d}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def token_id_array(self) -> np.ndarray:
        return np.array([t.token_id for t in self.tokens], dtype=np.int64)

    @cached_property
    def bbox_array(self) -> np.ndarray:
        return np.array([t.bbox for t in self.tokens], dtype=np.float64)

    @cached_property
    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.int64)


@dataclass(frozen=True)
class Corpus:
    """Immutable document collection plus the global entity-type catalog."""

    documents: tuple[Document, ...]
    class_catalog: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.documents:
            raise EmptyCorpus("corpus has no documents")
        if not self.class_catalog:
            raise SchemaError("class catalog is empty")
        seen: set[str] = set()
        n = len(self.class_catalog)
        for doc in self.documents:
            if doc.doc_id in seen:
                raise SchemaError(f"duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            for label in doc.labels:
                if label != O_LABEL and not (0 <= label < n):
                    raise SchemaError(
                        f"document {doc.doc_id!r}: label {label} outside catalog "
                        f"of size {n}"
                    )

    @cached_property
    def doc_index(self) -> dict[str, int]:
        return {d.doc_id: i for i, d in enumerate(self.documents)}

    @property
    def n_classes(self) -> int:
        return len(self.class_catalog)


@dataclass(frozen=True)
class EntityOccurrence:
    """A maximal contiguous run of tokens sharing one entity label."""

    doc_id: str
    entity_type: int
    start: int
    end: int  # inclusive


def extract_occurrences(doc: Document) -> list[EntityOccurrence]:
    """Maximal runs of identical non-background labels, in start order.

    Background and masked labels break runs and never form occurrences.
    """
    occurrences: list[EntityOccurrence] = []
    run_start = -1
    run_label = O_LABEL
    labels = doc.labels
    for i, label in enumerate(labels):
        if label == run_label and label >= 0:
            continue
        if run_label >= 0:
            occurrences.append(EntityOccurrence(doc.doc_id, run_label, run_start, i - 1))
        run_start, run_label = i, label
    if run_label >= 0:
        occurrences.append(
            EntityOccurrence(doc.doc_id, run_label, run_start, len(labels) - 1)
        )
    return occurrences


def count_occurrences(corpus: Corpus) -> dict[int, tuple[int, int]]:
    """Per entity type: (total occurrences, number of documents containing it)."""
    counts = {c: [0, 0] for c in range(corpus.n_classes)}
    for doc in corpus.documents:
        present: set[int] = set()
        for occ in extract_occurrences(doc):
            counts[occ.entity_type][0] += 1
            present.add(occ.entity_type)
        for c in present:
            counts[c][1] += 1
    return {c: (n_occ, n_docs) for c, (n_occ, n_docs) in counts.items()}


# ----------------------------------------------------------------------
# JSON corpus format
# ----------------------------------------------------------------------
#
# {"class_catalog": [str], "documents": [{"doc_id": str, "domain_tag": str,
#   "tokens": [{"token_id": int, "bbox": [x0,y0,x1,y1]}], "labels": [int]}]}
#
# Background labels are -1 on disk; pos_1d is implicit (token order).


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def _document_from_json(obj: object, n_classes: int, max_seq_len: int) -> Document:
    _require(isinstance(obj, dict), "document entry must be an object")
    assert isinstance(obj, dict)
    for key in ("doc_id", "tokens", "labels"):
        _require(key in obj, f"document missing field {key!r}")
    doc_id = obj["doc_id"]
    _require(isinstance(doc_id, str), "doc_id must be a string")
    domain_tag = obj.get("domain_tag", "")
    _require(isinstance(domain_tag, str), "domain_tag must be a string")
    raw_tokens = obj["tokens"]
    raw_labels = obj["labels"]
    _require(isinstance(raw_tokens, list), f"{doc_id}: tokens must be a list")
    _require(isinstance(raw_labels, list), f"{doc_id}: labels must be a list")
    _require(
        len(raw_tokens) <= max_seq_len,
        f"{doc_id}: length {len(raw_tokens)} exceeds max sequence length {max_seq_len}",
    )
    tokens = []
    for i, tok in enumerate(raw_tokens):
        _require(isinstance(tok, dict), f"{doc_id}: token {i} must be an object")
        _require("token_id" in tok and "bbox" in tok, f"{doc_id}: token {i} incomplete")
        token_id = tok["token_id"]
        bbox = tok["bbox"]
        _require(isinstance(token_id, int), f"{doc_id}: token {i} id must be an int")
        _require(
            isinstance(bbox, list) and len(bbox) == 4,
            f"{doc_id}: token {i} bbox must be a 4-list",
        )
        tokens.append(TokenFeatures(token_id, i, tuple(float(c) for c in bbox)))
    labels = []
    for i, label in enumerate(raw_labels):
        _require(
            isinstance(label, int) and (label == -1 or 0 <= label < n_classes),
            f"{doc_id}: label {label} at position {i} outside catalog of size {n_classes}",
        )
        labels.append(O_LABEL if label == -1 else label)
    return Document(doc_id, domain_tag, tuple(tokens), tuple(labels))


def load_corpus(path: str, max_seq_len: int = 4096) -> Corpus:
    """Load and validate a corpus JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    _require(isinstance(data, dict), "top level must be an object")
    _require("class_catalog" in data, "missing field 'class_catalog'")
    _require("documents" in data, "missing field 'documents'")
    catalog = data["class_catalog"]
    _require(
        isinstance(catalog, list) and all(isinstance(c, str) for c in catalog),
        "class_catalog must be a list of strings",
    )
    raw_docs = data["documents"]
    _require(isinstance(raw_docs, list), "documents must be a list")
    if not raw_docs:
        raise EmptyCorpus(f"{path}: corpus has no documents")
    docs = tuple(
        _document_from_json(obj, len(catalog), max_seq_len) for obj in raw_docs
    )
    return Corpus(docs, tuple(catalog))


def document_to_json(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "domain_tag": doc.domain_tag,
        "tokens": [
            {"token_id": t.token_id, "bbox": [float(c) for c in t.bbox]}
            for t in doc.tokens
        ],
        "labels": [(-1 if lab == O_LABEL else lab) for lab in doc.labels],
    }


def corpus_to_json(corpus: Corpus) -> dict:
    return {
        "class_catalog": list(corpus.class_catalog),
        "documents": [document_to_json(d) for d in corpus.documents],
    }


def save_corpus(corpus: Corpus, path: str) -> None:
    from .ioutil import atomic_write_text

    atomic_write_text(path, json.dumps(corpus_to_json(corpus)) + "\n")


# ----------------------------------------------------------------------
# Synthetic corpus generation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Seeded generator settings for a hermetic token-labeled corpus.

    Entity occurrences are planted as contiguous runs of 1-3 tokens with at
    least one background token between consecutive runs. Class identity is
    carried by both the token-id range and a per-class vertical band in the
    bounding boxes, so classes are geometrically learnable; `feature_noise`
    is the standard deviation of Gaussian jitter on the band placement.
    """

    n_classes: int
    n_documents: int
    doc_length_range: tuple[int, int] = (40, 80)
    occurrences_per_doc_range: tuple[int, int] = (2, 6)
    class_frequency_skew: float = 0.0
    feature_noise: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_documents < 1:
            raise ValueError("n_documents must be >= 1")
        lo, hi = self.doc_length_range
        if not (1 <= lo <= hi):
            raise ValueError(f"empty doc_length_range {self.doc_length_range}")
        olo, ohi = self.occurrences_per_doc_range
        if not (0 <= olo <= ohi):
            raise ValueError(
                f"empty occurrences_per_doc_range {self.occurrences_per_doc_range}"
            )
        if self.class_frequency_skew < 0:
            raise ValueError("class_frequency_skew must be >= 0")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")

    @property
    def vocab_size(self) -> int:
        return BACKGROUND_VOCAB + TOKENS_PER_CLASS * self.n_classes


def synthetic_vocab_size(n_classes: int) -> int:
    return BACKGROUND_VOCAB + TOKENS_PER_CLASS * n_classes


def _grid_boxes(length: int, y_jitter: np.ndarray, labels: np.ndarray,
                n_classes: int) -> np.ndarray:
    """Left-to-right, top-to-bottom grid; entity tokens move to class bands."""
    cols = np.arange(length) % _GRID_ROW_WIDTH
    rows = np.arange(length) // _GRID_ROW_WIDTH
    n_rows = max(int(rows[-1]) + 1, 1)
    x0 = cols / _GRID_ROW_WIDTH
    x1 = x0 + 0.9 / _GRID_ROW_WIDTH
    height = 0.8 / max(n_classes, n_rows)
    y0 = rows / n_rows
    entity = labels >= 0
    band_center = (labels.clip(min=0) + 0.5) / n_classes
    y0 = np.where(entity, band_center - height / 2 + y_jitter, y0)
    y0 = np.clip(y0, 0.0, 1.0 - height)
    y1 = y0 + height
    return np.stack([x0, y0, x1, y1], axis=1)


def generate_synthetic_corpus(cfg: SyntheticConfig) -> Corpus:
    """Deterministically generate a corpus from `cfg` (pure in the seed)."""
    min_len = cfg.doc_length_range[0]
    max_occ = cfg.occurrences_per_doc_range[1]
    # Each occurrence needs >= 1 token and a separating background token.
    if max_occ > 0 and 2 * max_occ - 1 > min_len:
        raise InfeasibleConfig(
            f"up to {max_occ} separated occurrences cannot fit in a document "
            f"of length {min_len}"
        )
    rng = np.random.default_rng(cfg.seed)
    weights = np.arange(1, cfg.n_classes + 1, dtype=np.float64) ** (
        -cfg.class_frequency_skew
    )
    weights /= weights.sum()

    documents = []
    for di in range(cfg.n_documents):
        length = int(rng.integers(cfg.doc_length_range[0], cfg.doc_length_range[1] + 1))
        n_occ = int(
            rng.integers(
                cfg.occurrences_per_doc_range[0], cfg.occurrences_per_doc_range[1] + 1
            )
        )
        classes = rng.choice(cfg.n_classes, size=n_occ, p=weights)
        lengths = rng.integers(1, 4, size=n_occ)
        # Shrink the longest runs until runs plus separators fit.
        while n_occ > 0 and lengths.sum() + (n_occ - 1) > length:
            lengths[int(np.argmax(lengths))] -= 1

        labels = np.full(length, O_LABEL, dtype=np.int64)
        token_ids = rng.integers(0, BACKGROUND_VOCAB, size=length)
        if n_occ > 0:
            spare = length - int(lengths.sum()) - (n_occ - 1)
            extra = rng.multinomial(spare, np.full(n_occ + 1, 1.0 / (n_occ + 1)))
            pos = 0
            for k in range(n_occ):
                pos += int(extra[k]) + (1 if k > 0 else 0)
                run = int(lengths[k])
                cls = int(classes[k])
                lo = BACKGROUND_VOCAB + cls * TOKENS_PER_CLASS
                labels[pos : pos + run] = cls
                token_ids[pos : pos + run] = rng.integers(lo, lo + TOKENS_PER_CLASS, size=run)
                pos += run

        y_jitter = rng.normal(0.0, cfg.feature_noise, size=length)
        boxes = _grid_boxes(length, y_jitter, labels, cfg.n_classes)
        tokens = tuple(
            TokenFeatures(int(token_ids[i]), i, tuple(float(c) for c in boxes[i]))
            for i in range(length)
        )
        documents.append(
            Document(f"syn-{di:05d}", "synthetic", tokens, tuple(int(v) for v in labels))
        )

    catalog = tuple(f"class_{c:02d}" for c in range(cfg.n_classes))
    return Corpus(tuple(documents), catalog)
