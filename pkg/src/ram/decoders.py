"""Question-answering and rehearsal/anticipation decoders.

Both are pre-norm transformer decoders applied for a fixed number of hops
with the same weights every hop: self-attention over the token states,
cross-attention into the memory slots, then a feed-forward sublayer. The
QA head pools the question states and projects them through the tied
embedding rows of the answer classes; the masked-token head projects
selected rows through the full embedding table; the direction head reads
the CLS row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import cross_attention_block, ffn_block, self_attention_block
from .tensor import Tensor, linear, matmul_nt, mean_rows, take_rows
from .memory import AttentionParams, init_attention

__all__ = [
    "DecoderParams",
    "init_decoder",
    "decode",
    "qa_decode",
    "ra_decode",
    "predict_answer",
    "masked_token_logits",
    "direction_logit",
]


@dataclass
class DecoderParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    norm_self_gain: Tensor
    norm_self_bias: Tensor
    norm_cross_gain: Tensor
    norm_cross_bias: Tensor
    norm_ffn_gain: Tensor
    norm_ffn_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    hops: int
    heads: int


def init_decoder(d_model: int, hops: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, ffn_mult: int = 4) -> DecoderParams:
    if d_model % heads:
        raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
    inner = ffn_mult * d_model

    def w(fan_in, *shape):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape).astype(dtype),
                      requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return DecoderParams(
        self_attn=init_attention(d_model, rng, dtype),
        cross_attn=init_attention(d_model, rng, dtype),
        norm_self_gain=ones(d_model),
        norm_self_bias=zeros(d_model),
        norm_cross_gain=ones(d_model),
        norm_cross_bias=zeros(d_model),
        norm_ffn_gain=ones(d_model),
        norm_ffn_bias=zeros(d_model),
        ffn_w1=w(d_model, d_model, inner),
        ffn_b1=zeros(inner),
        ffn_w2=w(inner, inner, d_model),
        ffn_b2=zeros(d_model),
        hops=hops,
        heads=heads,
    )


def decode(params: DecoderParams, tokens: Tensor, memory: Tensor,
           return_attention: bool = False):
    """Run the tied-weight decoder for `params.hops` hops.

    Each hop applies pre-normalized residual sublayers; hop l+1 consumes
    hop l's output. With attention weights requested, returns the list of
    cross-attention weights (heads, tokens, slots), one entry per hop.
    """
    if tokens.shape[0] == 0:
        raise ValueError("decoder input must be non-empty")
    if tokens.shape[1] != memory.shape[1]:
        raise ValueError(f"token dim {tokens.shape} does not match memory {memory.shape}")
    sa, ca = params.self_attn, params.cross_attn
    h = tokens
    hop_weights = []
    for _ in range(params.hops):
        h, _ = self_attention_block(
            h, sa.wq, sa.wk, sa.wv, sa.wo, params.heads,
            gain=params.norm_self_gain, bias=params.norm_self_bias, residual=True,
        )
        h, weights = cross_attention_block(
            h, memory, ca.wq, ca.wk, ca.wv, ca.wo, params.heads,
            gain=params.norm_cross_gain, bias=params.norm_cross_bias, residual=True,
        )
        hop_weights.append(weights)
        h = ffn_block(
            h, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2,
            gain=params.norm_ffn_gain, bias=params.norm_ffn_bias, residual=True,
        )
    if return_attention:
        return h, hop_weights
    return h


def qa_decode(params: DecoderParams, question: Tensor, memory: Tensor,
              return_attention: bool = False):
    """Contextualize question states against the final memory."""
    return decode(params, question, memory, return_attention)


def ra_decode(params: DecoderParams, sample: Tensor, memory: Tensor,
              return_attention: bool = False):
    """Decode a masked, CLS-prefixed segment against the current memory.

    Rehearsal and anticipation share this decoder; the direction only
    affects the loss label, never the computation.
    """
    return decode(params, sample, memory, return_attention)


def predict_answer(h_q: Tensor, embeddings: Tensor, answer_token_ids) -> Tensor:
    """Pool the question rows and score them against the answer-class rows.

    The classifier weight IS the embedding matrix (tied); class c scores
    dot(pooled, embeddings[answer_token_ids[c]]).
    """
    if h_q.shape[0] == 0:
        raise ValueError("cannot pool an empty question")
    pooled = mean_rows(h_q)
    class_rows = take_rows(embeddings, np.asarray(answer_token_ids, dtype=np.intp))
    return matmul_nt(pooled, class_rows)


def masked_token_logits(h: Tensor, positions, embeddings: Tensor) -> Tensor:
    """Project the rows at the masked positions onto the full vocabulary."""
    idx = np.asarray(positions, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("no masked positions to score")
    rows = take_rows(h, idx)
    return matmul_nt(rows, embeddings)


def direction_logit(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Past/future logit from the CLS row (position 0)."""
    cls_row = take_rows(h, np.array([0], dtype=np.intp))
    return linear(cls_row, w, b)
