"""Fixed-capacity slot memory: attention fusion plus gated updates.

One step folds a segment into the K x d slot matrix: slots self-attend,
cross-attend into the segment tokens (queries from memory, keys/values
from tokens) under one joint residual, then two independent gate sets
blend old state with the fused candidate and with its feed-forward
projection. The shifted gate biases favor retention at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import cross_attention_block, ffn_block, gate_block, self_attention_block
from .tensor import Tensor, add

__all__ = [
    "AttentionParams",
    "GateParams",
    "MemoryParams",
    "init_attention",
    "init_gate",
    "init_memory_params",
    "fuse",
    "gate",
    "memory_step",
    "init_memory",
]


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class GateParams:
    wz: Tensor
    bz: Tensor
    wi: Tensor
    bi: Tensor
    wf: Tensor
    bf: Tensor


@dataclass
class MemoryParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    gate_fuse: GateParams  # blends old state with the fused candidate
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    gate_ffn: GateParams  # untied second gate set around the FFN
    initial: Tensor  # learnable step-0 state, (slots, d_model)
    heads: int


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std."""
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_attention(d_model: int, rng: np.random.Generator, dtype=np.float32,
                   init_std: float | None = None) -> AttentionParams:
    """Projection matrices at std 1/sqrt(d_model) unless overridden."""
    std = init_std if init_std is not None else 1.0 / math.sqrt(d_model)

    def proj():
        return Tensor(rng.normal(0.0, std, (d_model, d_model)).astype(dtype), requires_grad=True)

    return AttentionParams(wq=proj(), wk=proj(), wv=proj(), wo=proj())


def init_gate(d_model: int, rng: np.random.Generator, dtype=np.float32,
              gate_std: float = 0.1) -> GateParams:
    def w():
        return Tensor(truncated_normal(rng, (d_model, d_model), gate_std, dtype), requires_grad=True)

    def b():
        return Tensor(truncated_normal(rng, (d_model,), gate_std, dtype), requires_grad=True)

    return GateParams(wz=w(), bz=b(), wi=w(), bi=b(), wf=w(), bf=b())


def init_memory_params(d_model: int, slots: int, heads: int, rng: np.random.Generator,
                       dtype=np.float32, ffn_mult: int = 4,
                       initial_std: float = 1.0) -> MemoryParams:
    """Attention/FFN weights at 1/sqrt(fan_in); unit-scale initial slots.

    The memory module has no normalization layers, so the initial state
    must sit at the working scale the gates expect; tiny slots starve the
    read path (verified empirically on the synthetic corpus).
    """
    if d_model % heads:
        raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
    inner = ffn_mult * d_model

    def w(fan_in, *shape):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape).astype(dtype),
                      requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return MemoryParams(
        self_attn=init_attention(d_model, rng, dtype),
        cross_attn=init_attention(d_model, rng, dtype),
        gate_fuse=init_gate(d_model, rng, dtype),
        ffn_w1=w(d_model, d_model, inner),
        ffn_b1=zeros(inner),
        ffn_w2=w(inner, inner, d_model),
        ffn_b2=zeros(d_model),
        gate_ffn=init_gate(d_model, rng, dtype),
        initial=Tensor(rng.normal(0.0, initial_std, (slots, d_model)).astype(dtype),
                       requires_grad=True),
        heads=heads,
    )


def init_memory(params: MemoryParams) -> Tensor:
    """The learnable initial state is itself the step-0 memory."""
    return params.initial


def fuse(params: MemoryParams, memory: Tensor, segment: Tensor,
         return_attention: bool = False):
    """Merge segment tokens into memory: residual around self + cross attention.

    Cross-attention queries come from the self-attended slots; keys and
    values come from the segment, so each slot's weight row spans the N
    tokens. Returns the fused state, plus the cross-attention weights
    (heads, slots, tokens) when requested.
    """
    if segment.shape[0] == 0:
        raise ValueError("cannot fuse an empty segment")
    if segment.shape[1] != memory.shape[1]:
        raise ValueError(f"segment dim {segment.shape} does not match memory {memory.shape}")
    sa = params.self_attn
    slots, _ = self_attention_block(memory, sa.wq, sa.wk, sa.wv, sa.wo, params.heads)
    ca = params.cross_attn
    merged, weights = cross_attention_block(slots, segment, ca.wq, ca.wk, ca.wv, ca.wo, params.heads)
    fused = add(memory, merged)
    if return_attention:
        return fused, weights
    return fused


def gate(m_prev: Tensor, source: Tensor, params: GateParams) -> Tensor:
    """Gated blend: tanh candidate and input gate against a forget gate.

    The input gate carries a fixed -1 shift and the forget gate a +1 shift,
    biasing the blend toward retaining `m_prev` at initialization.
    """
    return gate_block(m_prev, source, params.wz, params.bz, params.wi, params.bi,
                      params.wf, params.bf)


def memory_step(params: MemoryParams, memory: Tensor, segment: Tensor,
                return_attention: bool = False):
    """One streaming update: fuse, gate, then a gated feed-forward projection."""
    if return_attention:
        fused, weights = fuse(params, memory, segment, return_attention=True)
    else:
        fused = fuse(params, memory, segment)
        weights = None
    gated = gate(memory, fused, params.gate_fuse)
    projected = ffn_block(gated, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2)
    out = gate(gated, projected, params.gate_ffn)
    if return_attention:
        return out, weights
    return out
