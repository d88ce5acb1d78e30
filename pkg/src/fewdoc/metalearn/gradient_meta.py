"""Gradient-based meta-updates.

`anil_meta_step` freezes the encoder inside the inner loop, adapts only
the decoder by full-batch SGD on the support loss, and differentiates the
query loss exactly through the whole unrolled trajectory: the inner-loop
gradient is written in closed form with tape primitives, so reverse mode
covers the second-order terms without approximation. Encoder parameters
receive gradients through the reused features.

`reptile_meta_step` fully adapts encoder and decoder on each task and
treats the negated average parameter displacement as the meta-gradient.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..encoder import EncoderParams, backward as encoder_backward, encode_document
from ..errors import NonFiniteLoss
from ..sampler import Task
from .decoders import (
    CROSS_ENTROPY,
    DecoderParams,
    InnerLoopConfig,
    inner_loop_sgd,
    stack_labeled_tokens,
)


def _onehot(classes: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(classes), width))
    out[np.arange(len(classes)), classes] = 1.0
    return out


def _unrolled_plain(v_hs, v_hq, dec: DecoderParams, cls_s, cls_q, n_way, cfg):
    ns, nq = cls_s.shape[0], cls_q.shape[0]
    y_s = _onehot(cls_s, n_way + 1)
    y_q = _onehot(cls_q, n_way + 1)
    v_w = ad.Var(dec.views["wp"][:, : n_way + 1].copy())
    v_b = ad.Var(dec.views["bp"][: n_way + 1].copy())
    for _ in range(cfg.steps):
        logits = ad.add(ad.matmul(v_hs, v_w), v_b)
        probs = ad.exp(ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True)))
        diff = ad.sub(probs, y_s)
        g_w = ad.scale(ad.matmul(ad.transpose(v_hs), diff), 1.0 / ns)
        g_b = ad.scale(ad.vsum(diff, axis=0), 1.0 / ns)
        v_w = ad.sub(v_w, ad.scale(g_w, cfg.lr))
        v_b = ad.sub(v_b, ad.scale(g_b, cfg.lr))
    logits_q = ad.add(ad.matmul(v_hq, v_w), v_b)
    lse = ad.logsumexp(logits_q, axis=1)
    picked = ad.vsum(ad.mul(logits_q, y_q), axis=1)
    loss = ad.scale(ad.vsum(ad.sub(lse, picked)), 1.0 / nq)
    return loss, {"wp": v_w, "bp": v_b}


def _unrolled_hier(v_hs, v_hq, dec: DecoderParams, cls_s, cls_q, n_way, cfg):
    ns, nq = cls_s.shape[0], cls_q.shape[0]
    ent_s = (cls_s > 0).astype(np.float64)[:, None]
    y2_s = _onehot(np.maximum(cls_s - 1, 0), n_way) * ent_s
    v_w1 = ad.Var(dec.views["w1"].copy())
    v_b1 = ad.Var(dec.views["b1"].copy())
    v_w2 = ad.Var(dec.views["w2"][:, :n_way].copy())
    v_b2 = ad.Var(dec.views["b2"][:n_way].copy())
    for _ in range(cfg.steps):
        z1 = ad.add(ad.matmul(v_hs, v_w1), v_b1)
        dz1 = ad.scale(ad.sub(ad.sigmoid(z1), ent_s), 1.0 / ns)
        z2 = ad.add(ad.matmul(v_hs, v_w2), v_b2)
        p2 = ad.exp(ad.sub(z2, ad.logsumexp(z2, axis=1, keepdims=True)))
        dz2 = ad.scale(ad.mul(ad.sub(p2, y2_s), ent_s), 1.0 / ns)
        g_w1 = ad.matmul(ad.transpose(v_hs), dz1)
        g_b1 = ad.vsum(dz1, axis=0)
        g_w2 = ad.matmul(ad.transpose(v_hs), dz2)
        g_b2 = ad.vsum(dz2, axis=0)
        v_w1 = ad.sub(v_w1, ad.scale(g_w1, cfg.lr))
        v_b1 = ad.sub(v_b1, ad.scale(g_b1, cfg.lr))
        v_w2 = ad.sub(v_w2, ad.scale(g_w2, cfg.lr))
        v_b2 = ad.sub(v_b2, ad.scale(g_b2, cfg.lr))
    ent_q = (cls_q > 0).astype(np.float64)[:, None]
    bg_q = 1.0 - ent_q
    y2_q = _onehot(np.maximum(cls_q - 1, 0), n_way) * ent_q
    z1q = ad.add(ad.matmul(v_hq, v_w1), v_b1)
    z2q = ad.add(ad.matmul(v_hq, v_w2), v_b2)
    bg_term = ad.mul(ad.softplus(ad.neg(z1q)), bg_q)
    gate_term = ad.mul(ad.softplus(z1q), ent_q)
    ent_term = ad.mul(
        ad.sub(
            ad.logsumexp(z2q, axis=1, keepdims=True),
            ad.vsum(ad.mul(z2q, y2_q), axis=1, keepdims=True),
        ),
        ent_q,
    )
    loss = ad.scale(
        ad.vsum(ad.add(ad.add(bg_term, gate_term), ent_term)), 1.0 / nq
    )
    return loss, {"w1": v_w1, "b1": v_b1, "w2": v_w2, "b2": v_b2}


def anil_task_gradients(
    enc: EncoderParams, dec: DecoderParams, task: Task, cfg: InnerLoopConfig
):
    """Exact meta-gradient of one task's post-adaptation query loss.

    Returns (query loss, encoder flat grad, decoder flat grad).
    """
    support_feats = [encode_document(enc, d).vectors for d in task.support]
    query_feats = [encode_document(enc, d).vectors for d in task.query]
    h_s, cls_s, refs_s = stack_labeled_tokens(task.support, support_feats)
    h_q, cls_q, refs_q = stack_labeled_tokens(task.query, query_feats)
    v_hs, v_hq = ad.Var(h_s), ad.Var(h_q)

    n_way = task.n_way
    if cfg.loss == CROSS_ENTROPY:
        loss_var, leaves = _unrolled_plain(v_hs, v_hq, dec, cls_s, cls_q, n_way, cfg)
    else:
        loss_var, leaves = _unrolled_hier(v_hs, v_hq, dec, cls_s, cls_q, n_way, cfg)
    loss = float(loss_var.value)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"post-adaptation query loss is {loss}")
    ad.backward(loss_var)

    dec_grad = DecoderParams(dec.arch)
    if cfg.loss == CROSS_ENTROPY:
        dec_grad.views["wp"][:, : n_way + 1] = leaves["wp"].grad
        dec_grad.views["bp"][: n_way + 1] = leaves["bp"].grad
    else:
        dec_grad.views["w1"][...] = leaves["w1"].grad
        dec_grad.views["b1"][...] = leaves["b1"].grad
        dec_grad.views["w2"][:, :n_way] = leaves["w2"].grad
        dec_grad.views["b2"][:n_way] = leaves["b2"].grad

    enc_grad = np.zeros_like(enc.flat)
    d_out = enc.arch.d_out
    per_doc = [np.zeros((len(d), d_out)) for d in task.documents]
    for (di, ti), g in zip(refs_s, v_hs.grad):
        per_doc[di][ti] += g
    offset = len(task.support)
    for (di, ti), g in zip(refs_q, v_hq.grad):
        per_doc[offset + di][ti] += g
    for doc, upstream in zip(task.documents, per_doc):
        enc_grad += encoder_backward(enc, doc, upstream)
    return loss, enc_grad, dec_grad.flat


def anil_meta_step(
    enc: EncoderParams,
    dec: DecoderParams,
    tasks: list[Task],
    cfg: InnerLoopConfig,
    optimizer,
):
    """Average the exact per-task meta-gradients and apply one update."""
    enc_grad = np.zeros_like(enc.flat)
    dec_grad = np.zeros_like(dec.flat)
    losses = []
    for task in tasks:
        loss, g_enc, g_dec = anil_task_gradients(enc, dec, task, cfg)
        losses.append(loss)
        enc_grad += g_enc
        dec_grad += g_dec
    joint = np.concatenate([enc.flat, dec.flat])
    grad = np.concatenate([enc_grad, dec_grad]) / len(tasks)
    updated = optimizer.step(joint, grad)
    return (
        enc.with_flat(updated[: enc.size]),
        dec.with_flat(updated[enc.size :]),
        losses,
    )


def reptile_meta_step(
    enc: EncoderParams,
    dec: DecoderParams,
    tasks: list[Task],
    cfg: InnerLoopConfig,
    optimizer,
    use_query: bool = True,
    adapt_fn=None,
):
    """Meta-update toward the average fully-adapted parameters.

    Each task is adapted (encoder and decoder) on its support set, plus
    the query set during meta-training where its labels are available.
    The negated mean displacement is handed to the optimizer as the
    gradient. `adapt_fn` overrides the inner adaptation (used by the
    multi-worker simulation).
    """
    delta_enc = np.zeros_like(enc.flat)
    delta_dec = np.zeros_like(dec.flat)
    losses = []
    for task in tasks:
        docs = task.documents if use_query else task.support
        if adapt_fn is not None:
            a_enc, a_dec, task_losses = adapt_fn(enc, dec, docs, cfg, task.n_way)
        else:
            a_enc, a_dec, task_losses = inner_loop_sgd(
                enc, dec, docs, cfg, adapt_encoder=True, n_way=task.n_way
            )
        losses.append(task_losses[-1] if task_losses else float("nan"))
        delta_enc += a_enc.flat - enc.flat
        delta_dec += a_dec.flat - dec.flat
    joint = np.concatenate([enc.flat, dec.flat])
    grad = -np.concatenate([delta_enc, delta_dec]) / len(tasks)
    updated = optimizer.step(joint, grad)
    return (
        enc.with_flat(updated[: enc.size]),
        dec.with_flat(updated[enc.size :]),
        losses,
    )
