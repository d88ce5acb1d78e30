"""Compact multimodal sequence encoder with exact hand-written gradients.

Each token's embedding starts as

    token_table[token_id] + sinusoid(pos_1d) + bbox @ box_projection

and is refined by a stack of dense layers (tanh between layers, linear
last). After the first layer a symmetric window mean over neighbouring
tokens is mixed in, so embeddings depend on document context. Everything
runs in float64, and `backward` returns the exact reverse-mode gradient of
<upstream, output> with respect to the flat parameter vector.

Parameters live in one contiguous float64 buffer; the named weight arrays
are views into it, so flat arithmetic (axpy, averaging, optimizer updates)
and structured access never go out of sync.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Document
from .errors import InvalidArch, LayoutMismatch, ShapeMismatch, TokenOutOfVocab
from .ioutil import atomic_write_bytes

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderArch:
    """Shape of the encoder: vocabulary, input width, layer sizes, window."""

    vocab_size: int
    d_in: int
    layer_sizes: tuple[int, ...]
    window: int = 4

    def __post_init__(self) -> None:
        if self.vocab_size < 1 or self.d_in < 1:
            raise InvalidArch(f"vocab_size and d_in must be >= 1, got {self}")
        if len(self.layer_sizes) == 0:
            raise InvalidArch("encoder needs at least one mixing layer")
        if any(s < 1 for s in self.layer_sizes):
            raise InvalidArch(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.window < 0:
            raise InvalidArch("window must be >= 0")

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_in": self.d_in,
            "layer_sizes": list(self.layer_sizes),
            "window": self.window,
        }

    @staticmethod
    def from_json(obj: dict) -> "EncoderArch":
        return EncoderArch(
            obj["vocab_size"], obj["d_in"], tuple(obj["layer_sizes"]), obj["window"]
        )


def _encoder_layout(arch: EncoderArch) -> list[tuple[str, tuple[int, ...]]]:
    layout = [
        ("token_embedding", (arch.vocab_size, arch.d_in)),
        ("pos2d_projection", (4, arch.d_in)),
    ]
    prev = arch.d_in
    for i, size in enumerate(arch.layer_sizes):
        layout.append((f"w{i}", (prev, size)))
        layout.append((f"b{i}", (size,)))
        prev = size
    return layout


class EncoderParams:
    """Flat float64 parameter buffer plus named views into it."""

    def __init__(self, arch: EncoderArch, flat: np.ndarray | None = None):
        self.arch = arch
        self._layout = _encoder_layout(arch)
        total = sum(int(np.prod(shape)) for _, shape in self._layout)
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
        for name, shape in self._layout:
            size = int(np.prod(shape))
            self.views[name] = self.flat[offset : offset + size].reshape(shape)
            offset += size

    @property
    def token_embedding(self) -> np.ndarray:
        return self.views["token_embedding"]

    @property
    def pos2d_projection(self) -> np.ndarray:
        return self.views["pos2d_projection"]

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.views[f"w{i}"], self.views[f"b{i}"]

    @property
    def size(self) -> int:
        return self.flat.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "EncoderParams":
        return EncoderParams(self.arch, flat)


def init_params(arch: EncoderArch, seed: int) -> EncoderParams:
    """Seeded init: every component uniform in +-1/sqrt(fan_in).

    The embedding table and the box projection feed directly into width
    `d_in`, so they use that width as their scale; dense layers use their
    input width.
    """
    rng = np.random.default_rng(seed)
    params = EncoderParams(arch)
    fan_in = {"token_embedding": arch.d_in, "pos2d_projection": 4}
    prev = arch.d_in
    for i in range(arch.depth):
        fan_in[f"w{i}"] = prev
        fan_in[f"b{i}"] = prev
        prev = arch.layer_sizes[i]
    for name, _ in _encoder_layout(arch):
        bound = 1.0 / np.sqrt(fan_in[name])
        view = params.views[name]
        view[...] = rng.uniform(-bound, bound, size=view.shape)
    return params


def sinusoid_features(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional features, one row per position."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * (2 * np.arange(half) / dim))
    angles = positions * freqs[None, :]
    out = np.zeros((length, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)[:, : out[:, 0::2].shape[1]]
    out[:, 1::2] = np.cos(angles)[:, : out[:, 1::2].shape[1]]
    return out


def _window_counts(length: int, w: int) -> np.ndarray:
    idx = np.arange(length)
    lo = np.maximum(idx - w, 0)
    hi = np.minimum(idx + w + 1, length)
    return (hi - lo).astype(np.float64)


def _window_sum(x: np.ndarray, w: int) -> np.ndarray:
    cs = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    idx = np.arange(x.shape[0])
    lo = np.maximum(idx - w, 0)
    hi = np.minimum(idx + w + 1, x.shape[0])
    return cs[hi] - cs[lo]


def window_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Mean over the symmetric +-w token window (truncated at edges)."""
    if w == 0:
        return x.copy()
    return _window_sum(x, w) / _window_counts(x.shape[0], w)[:, None]


def _window_mean_backward(grad: np.ndarray, w: int) -> np.ndarray:
    # Window membership is symmetric, so the adjoint is a window sum of the
    # count-normalized upstream.
    if w == 0:
        return grad.copy()
    return _window_sum(grad / _window_counts(grad.shape[0], w)[:, None], w)


@dataclass
class EmbeddingBatch:
    """Per-document token embeddings; row l corresponds to token l."""

    doc_id: str
    vectors: np.ndarray  # [L, d_out]


def _forward(params: EncoderParams, doc: Document, keep_cache: bool):
    arch = params.arch
    token_ids = doc.token_id_array
    if token_ids.max(initial=0) >= arch.vocab_size:
        raise TokenOutOfVocab(
            f"document {doc.doc_id!r} has token id {int(token_ids.max())} "
            f">= vocab size {arch.vocab_size}"
        )
    x0 = (
        params.token_embedding[token_ids]
        + sinusoid_features(len(doc), arch.d_in)
        + doc.bbox_array @ params.pos2d_projection
    )
    cache = {"x0": x0} if keep_cache else None
    z = x0
    for i in range(arch.depth):
        w, b = params.layer(i)
        inp = z
        z = inp @ w + b
        if keep_cache:
            cache[f"in{i}"] = inp
        if i < arch.depth - 1:
            z = np.tanh(z)
            if keep_cache:
                cache[f"act{i}"] = z
        if i == 0:
            pre_mix = z
            z = window_mean(z, arch.window)
            if keep_cache:
                cache["pre_mix"] = pre_mix
    return z, cache


def encode_document(params: EncoderParams, doc: Document) -> EmbeddingBatch:
    """Embed every token of `doc`; masked tokens still contribute context."""
    out, _ = _forward(params, doc, keep_cache=False)
    return EmbeddingBatch(doc.doc_id, out)


def backward(params: EncoderParams, doc: Document, upstream: np.ndarray) -> np.ndarray:
    """Exact gradient of <upstream, encode(doc)> w.r.t. the flat parameters."""
    arch = params.arch
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(doc), arch.d_out):
        raise ShapeMismatch(
            f"upstream has shape {upstream.shape}, expected {(len(doc), arch.d_out)}"
        )
    _, cache = _forward(params, doc, keep_cache=True)
    grads = EncoderParams(arch)  # zero-initialized buffer with the same views

    g = upstream
    for i in reversed(range(arch.depth)):
        w, _ = params.layer(i)
        if i == 0:
            g = _window_mean_backward(g, arch.window)
        if i < arch.depth - 1:
            act = cache[f"act{i}"]
            g = g * (1.0 - act * act)
        gw, gb = grads.layer(i)
        gw += cache[f"in{i}"].T @ g
        gb += g.sum(axis=0)
        g = g @ w.T
    np.add.at(grads.token_embedding, doc.token_id_array, g)
    grads.pos2d_projection += doc.bbox_array.T @ g
    return grads.flat


def _flat_of(x) -> np.ndarray:
    return x.flat if hasattr(x, "flat") and not isinstance(x, np.ndarray) else np.asarray(x)


def param_axpy(a: float, x, y):
    """Elementwise y + a*x over flat views; returns params shaped like `y`."""
    xf, yf = _flat_of(x), _flat_of(y)
    if xf.shape != yf.shape:
        raise LayoutMismatch(f"operand lengths differ: {xf.shape} vs {yf.shape}")
    out = yf + a * xf
    return y.with_flat(out) if hasattr(y, "with_flat") else out


def param_average(items: list):
    """Elementwise mean of layout-compatible parameter stores."""
    if not items:
        raise LayoutMismatch("cannot average an empty list")
    flats = [_flat_of(item) for item in items]
    first = flats[0]
    for f in flats[1:]:
        if f.shape != first.shape:
            raise LayoutMismatch(f"operand lengths differ: {f.shape} vs {first.shape}")
    mean = np.sum(flats, axis=0) / len(flats)
    head = items[0]
    return head.with_flat(mean) if hasattr(head, "with_flat") else mean


# ----------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float64.
# ----------------------------------------------------------------------


def save_checkpoint(path: str, encoder: EncoderParams, decoder=None, meta: dict | None = None) -> None:
    header = {
        "format": "fewdoc-checkpoint",
        "version": CHECKPOINT_VERSION,
        "encoder": encoder.arch.to_json(),
        "decoder": decoder.arch.to_json() if decoder is not None else None,
        "meta": meta or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    payload += encoder.flat.astype("<f8").tobytes()
    if decoder is not None:
        payload += decoder.flat.astype("<f8").tobytes()
    atomic_write_bytes(path, payload)


def load_checkpoint(path: str):
    """Returns (encoder, decoder_or_None, meta)."""
    from .metalearn.decoders import DecoderArch, DecoderParams

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    if header.get("format") != "fewdoc-checkpoint":
        raise LayoutMismatch(f"{path}: not a fewdoc checkpoint")
    arch = EncoderArch.from_json(header["encoder"])
    enc_len = EncoderParams(arch).size
    values = np.frombuffer(raw, dtype="<f8")
    encoder = EncoderParams(arch, values[:enc_len].astype(np.float64))
    decoder = None
    if header["decoder"] is not None:
        dec_arch = DecoderArch(**header["decoder"])
        decoder = DecoderParams(dec_arch, values[enc_len:].astype(np.float64))
    return encoder, decoder, header.get("meta", {})
