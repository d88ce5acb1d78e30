"""Classification heads over token embeddings and the inner-loop optimizer.

Two decoding modes share one parameter store:

* ``cross_entropy`` — a plain softmax over N+1 classes (background first,
  then the task's N relative classes).
* ``hierarchical`` — a binary background-vs-entity head gating a softmax
  entity head: P(O) = sigmoid(z1), P(e) = (1 - P(O)) * softmax(z2)_e, so
  the output is an exact probability simplex and 1 - P(O) doubles as an
  in-task score.

The parameter store is sized for up to `n_max` entity classes; a task of N
classes uses the leading N columns. Losses are means over unmasked tokens
and their closed-form gradients are returned alongside, which keeps the
inner loop a plain full-batch SGD that federated simulation and the
unrolled meta-gradient path can both reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import Document, MASKED_LABEL, O_LABEL
from ..encoder import EncoderParams, backward as encoder_backward, encode_document
from ..errors import InvalidArch, LayoutMismatch, NonFiniteLoss

CROSS_ENTROPY = "cross_entropy"
HIERARCHICAL = "hierarchical"


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int = 15
    lr: float = 0.015
    loss: str = CROSS_ENTROPY

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.loss not in (CROSS_ENTROPY, HIERARCHICAL):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class DecoderArch:
    d: int
    n_max: int

    def __post_init__(self) -> None:
        if self.d < 1 or self.n_max < 1:
            raise InvalidArch(f"d and n_max must be >= 1, got {self}")

    def to_json(self) -> dict:
        return {"d": self.d, "n_max": self.n_max}


def _decoder_layout(arch: DecoderArch) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("w1", (arch.d, 1)),
        ("b1", (1,)),
        ("w2", (arch.d, arch.n_max)),
        ("b2", (arch.n_max,)),
        ("wp", (arch.d, arch.n_max + 1)),
        ("bp", (arch.n_max + 1,)),
    ]


class DecoderParams:
    """Binary + entity heads (hierarchical) and a plain head, in one flat buffer."""

    def __init__(self, arch: DecoderArch, flat: np.ndarray | None = None):
        self.arch = arch
        layout = _decoder_layout(arch)
        total = sum(int(np.prod(shape)) for _, shape in layout)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise LayoutMismatch(
                f"flat vector has length {flat.shape}, layout needs {total}"
            )
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            self.views[name] = self.flat[offset : offset + size].reshape(shape)
            offset += size

    @property
    def size(self) -> int:
        return self.flat.shape[0]

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.arch, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "DecoderParams":
        return DecoderParams(self.arch, flat)


def init_decoder(arch: DecoderArch, seed: int) -> DecoderParams:
    """Seeded uniform +-1/sqrt(d) init for every head."""
    rng = np.random.default_rng(seed)
    params = DecoderParams(arch)
    bound = 1.0 / np.sqrt(arch.d)
    params.flat[...] = rng.uniform(-bound, bound, size=params.size)
    return params


# ----------------------------------------------------------------------
# Forward probabilities
# ----------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def hc_forward(h: np.ndarray, dec: DecoderParams, n_way: int) -> np.ndarray:
    """Hierarchical probabilities over (O, class 0, ..., class N-1)."""
    if n_way > dec.arch.n_max:
        raise LayoutMismatch(f"n_way {n_way} exceeds decoder capacity {dec.arch.n_max}")
    h2 = np.atleast_2d(np.asarray(h, dtype=np.float64))
    z1 = h2 @ dec.views["w1"] + dec.views["b1"]
    p_o = 1.0 / (1.0 + np.exp(-z1))
    ent = _softmax(h2 @ dec.views["w2"][:, :n_way] + dec.views["b2"][:n_way])
    out = np.concatenate([p_o, (1.0 - p_o) * ent], axis=1)
    return out if np.ndim(h) == 2 else out[0]


def plain_forward(h: np.ndarray, dec: DecoderParams, n_way: int) -> np.ndarray:
    """Flat softmax probabilities over (O, class 0, ..., class N-1)."""
    if n_way > dec.arch.n_max:
        raise LayoutMismatch(f"n_way {n_way} exceeds decoder capacity {dec.arch.n_max}")
    h2 = np.atleast_2d(np.asarray(h, dtype=np.float64))
    out = _softmax(h2 @ dec.views["wp"][:, : n_way + 1] + dec.views["bp"][: n_way + 1])
    return out if np.ndim(h) == 2 else out[0]


# ----------------------------------------------------------------------
# Token losses with closed-form gradients
# ----------------------------------------------------------------------
#
# `classes` encodes the target as 0 for background O and 1+rel for entity
# tokens, matching the plain head's column order.


def stack_labeled_tokens(
    docs: tuple[Document, ...] | list[Document],
    features: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Stack unmasked token embeddings with their shifted class targets."""
    rows, classes, refs = [], [], []
    for di, (doc, feat) in enumerate(zip(docs, features)):
        lab = doc.label_array
        for ti in range(len(doc)):
            if lab[ti] == MASKED_LABEL:
                continue
            rows.append(feat[ti])
            classes.append(0 if lab[ti] == O_LABEL else int(lab[ti]) + 1)
            refs.append((di, ti))
    return np.vstack(rows), np.array(classes, dtype=np.int64), refs


def _plain_loss_grads(dec, h, classes, n_way):
    w = dec.views["wp"][:, : n_way + 1]
    b = dec.views["bp"][: n_way + 1]
    logits = h @ w + b
    lse = np.logaddexp.reduce(logits, axis=1)
    n = h.shape[0]
    loss = float((lse - logits[np.arange(n), classes]).sum() / n)
    dlogits = _softmax(logits)
    dlogits[np.arange(n), classes] -= 1.0
    dlogits /= n
    grads = DecoderParams(dec.arch)
    grads.views["wp"][:, : n_way + 1] = h.T @ dlogits
    grads.views["bp"][: n_way + 1] = dlogits.sum(axis=0)
    dh = dlogits @ w.T
    return loss, grads.flat, dh


def _hier_loss_grads(dec, h, classes, n_way):
    w1, b1 = dec.views["w1"], dec.views["b1"]
    w2 = dec.views["w2"][:, :n_way]
    b2 = dec.views["b2"][:n_way]
    n = h.shape[0]
    z1 = (h @ w1 + b1)[:, 0]
    s = 1.0 / (1.0 + np.exp(-z1))
    is_o = classes == 0
    # -log sigma(z1) for O tokens, -log(1 - sigma(z1)) - log softmax(z2)_e
    # for entity tokens; softplus keeps both branches stable.
    loss_terms = np.where(is_o, np.logaddexp(0.0, -z1), np.logaddexp(0.0, z1))
    z2 = h @ w2 + b2
    lse2 = np.logaddexp.reduce(z2, axis=1)
    ent_rows = np.flatnonzero(~is_o)
    ent_targets = classes[ent_rows] - 1
    loss = float(
        (loss_terms.sum() + (lse2[ent_rows] - z2[ent_rows, ent_targets]).sum()) / n
    )
    dz1 = (s - (~is_o).astype(np.float64)) / n
    dz2 = np.zeros_like(z2)
    if len(ent_rows):
        soft = _softmax(z2[ent_rows])
        soft[np.arange(len(ent_rows)), ent_targets] -= 1.0
        dz2[ent_rows] = soft / n
    grads = DecoderParams(dec.arch)
    grads.views["w1"][:, 0] = h.T @ dz1
    grads.views["b1"][0] = dz1.sum()
    grads.views["w2"][:, :n_way] = h.T @ dz2
    grads.views["b2"][:n_way] = dz2.sum(axis=0)
    dh = dz1[:, None] @ w1.T + dz2 @ w2.T
    return loss, grads.flat, dh


def token_loss_and_grads(dec, h, classes, n_way, mode):
    """(loss, decoder flat gradient, gradient w.r.t. h) for one token batch."""
    if mode == CROSS_ENTROPY:
        return _plain_loss_grads(dec, h, classes, n_way)
    if mode == HIERARCHICAL:
        return _hier_loss_grads(dec, h, classes, n_way)
    raise ValueError(f"unknown loss mode {mode!r}")


def token_loss(dec, h, classes, n_way, mode) -> float:
    loss, _, _ = token_loss_and_grads(dec, h, classes, n_way, mode)
    return loss


def task_token_loss(
    enc: EncoderParams,
    dec: DecoderParams,
    docs,
    n_way: int,
    mode: str,
) -> float:
    """Mean token loss over the unmasked tokens of `docs` under (enc, dec)."""
    features = [encode_document(enc, d).vectors for d in docs]
    h, classes, _ = stack_labeled_tokens(docs, features)
    return token_loss(dec, h, classes, n_way, mode)


# ----------------------------------------------------------------------
# Inner-loop SGD
# ----------------------------------------------------------------------


def sgd_step(
    enc: EncoderParams,
    dec: DecoderParams,
    docs,
    n_way: int,
    mode: str,
    lr: float,
    adapt_encoder: bool,
    features: list[np.ndarray] | None = None,
):
    """One full-batch SGD step; gradients of both parts are taken jointly.

    When the encoder is frozen, pass precomputed `features` to reuse them.
    Returns (enc', dec', loss); with adapt_encoder False, enc' is `enc`
    itself, untouched.
    """
    if features is None:
        features = [encode_document(enc, d).vectors for d in docs]
    h, classes, refs = stack_labeled_tokens(docs, features)
    loss, dec_grad, dh = token_loss_and_grads(dec, h, classes, n_way, mode)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"inner-loop loss is {loss}")
    new_dec = dec.with_flat(dec.flat - lr * dec_grad)
    if not adapt_encoder:
        return enc, new_dec, loss
    per_doc = [np.zeros((len(d), enc.arch.d_out)) for d in docs]
    for (di, ti), g in zip(refs, dh):
        per_doc[di][ti] += g
    enc_grad = np.zeros_like(enc.flat)
    for doc, upstream in zip(docs, per_doc):
        enc_grad += encoder_backward(enc, doc, upstream)
    new_enc = enc.with_flat(enc.flat - lr * enc_grad)
    return new_enc, new_dec, loss


def inner_loop_sgd(
    enc: EncoderParams,
    dec: DecoderParams,
    docs,
    cfg: InnerLoopConfig,
    adapt_encoder: bool,
    n_way: int,
):
    """Full-batch SGD for `cfg.steps` steps on the token loss over `docs`.

    With adapt_encoder False the encoder features are computed once and
    reused; the returned encoder is the input object, bit for bit.
    """
    features = None
    if not adapt_encoder:
        features = [encode_document(enc, d).vectors for d in docs]
    losses = []
    cur_enc, cur_dec = enc, dec
    for _ in range(cfg.steps):
        cur_enc, cur_dec, loss = sgd_step(
            cur_enc, cur_dec, docs, n_way, cfg.loss, cfg.lr, adapt_encoder, features
        )
        losses.append(loss)
    return cur_enc, cur_dec, losses


def decoder_predict(dec: DecoderParams, h: np.ndarray, n_way: int, mode: str):
    """Per-token labels (O_LABEL or relative id) and in-task scores 1 - P(O)."""
    probs = plain_forward(h, dec, n_way) if mode == CROSS_ENTROPY else hc_forward(h, dec, n_way)
    choice = probs.argmax(axis=1)
    labels = np.where(choice == 0, O_LABEL, choice - 1)
    return labels, 1.0 - probs[:, 0]
