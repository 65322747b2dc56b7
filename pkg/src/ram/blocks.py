"""Fused model sublayers: one graph node per attention/gate/FFN block.

These compute exactly what the corresponding chains of primitive ops
compute (the test suite pins the equivalence), but collapse each sublayer
into a single node with a hand-derived backward, which keeps the
per-example graphs small enough for CPU training.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .tensor import Tensor, _node, _softmax

__all__ = [
    "self_attention_block",
    "cross_attention_block",
    "gate_block",
    "ffn_block",
    "embed_sequence",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(1e-5))
    xhat = centered * inv
    return xhat * gain + bias, xhat, inv


def _norm_backward(dxn: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    dgain = (dxn * xhat).sum(axis=0)
    dbias = dxn.sum(axis=0)
    dxhat = dxn * gain
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) * inv
    return dx, dgain, dbias


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, h, d // h).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, m, dk = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dk)


def _attention_core(q, k, v, h, inv_scale):
    qh, kh, vh = _heads(q, h), _heads(k, h), _heads(v, h)
    weights = _softmax(qh @ kh.transpose(0, 2, 1) * q.dtype.type(inv_scale))
    return _merge(weights @ vh), weights, qh, kh, vh


def _attention_core_backward(gm, weights, qh, kh, vh, h, inv_scale):
    gh = _heads(gm, h)
    dv = weights.transpose(0, 2, 1) @ gh
    dw = gh @ vh.transpose(0, 2, 1)
    ds = (dw - (dw * weights).sum(axis=-1, keepdims=True)) * weights * inv_scale
    return _merge(ds @ kh), _merge(ds.transpose(0, 2, 1) @ qh), _merge(dv)


def self_attention_block(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int, gain: Tensor | None = None, bias: Tensor | None = None,
                         residual: bool = False) -> tuple[Tensor, np.ndarray]:
    """[pre-norm ->] self-attention -> output projection [-> +x].

    Returns the output tensor and the attention weights (heads, m, m).
    """
    xv = x.values
    d = xv.shape[1]
    inv_scale = 1.0 / math.sqrt(d // heads)
    if gain is not None:
        xn, xhat, inv = _norm_forward(xv, gain.values, bias.values)
    else:
        xn = xv
    q, k, v = xn @ wq.values, xn @ wk.values, xn @ wv.values
    merged, weights, qh, kh, vh = _attention_core(q, k, v, heads, inv_scale)
    out = merged @ wo.values
    if residual:
        out += xv

    def bwd(g):
        dmerged = g @ wo.values.T
        dwo = merged.T @ g
        dq, dk, dv = _attention_core_backward(dmerged, weights, qh, kh, vh, heads, inv_scale)
        dxn = dq @ wq.values.T + dk @ wk.values.T + dv @ wv.values.T
        dwq, dwk, dwv = xn.T @ dq, xn.T @ dk, xn.T @ dv
        if gain is not None:
            dx, dgain, dbias = _norm_backward(dxn, xhat, inv, gain.values)
            if residual:
                dx = dx + g
            return dx, dwq, dwk, dwv, dwo, dgain, dbias
        dx = dxn + g if residual else dxn
        return dx, dwq, dwk, dwv, dwo

    parents = (x, wq, wk, wv, wo) if gain is None else (x, wq, wk, wv, wo, gain, bias)
    return _node(out, parents, "self_attention_block", bwd), weights


def cross_attention_block(x_q: Tensor, x_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                          wo: Tensor, heads: int, gain: Tensor | None = None,
                          bias: Tensor | None = None,
                          residual: bool = False) -> tuple[Tensor, np.ndarray]:
    """[pre-norm on queries ->] cross-attention -> projection [-> +x_q].

    Keys/values come from `x_kv` unnormalized. Returns the output and the
    attention weights (heads, n_q, n_kv); every weight row sums to 1.
    """
    if x_kv.shape[0] == 0:
        raise ValueError("cross-attention needs at least one key/value row")
    if x_q.shape[1] != x_kv.shape[1]:
        raise ValueError(f"query dim {x_q.shape} does not match key/value dim {x_kv.shape}")
    xv = x_q.values
    d = xv.shape[1]
    inv_scale = 1.0 / math.sqrt(d // heads)
    if gain is not None:
        xn, xhat, inv = _norm_forward(xv, gain.values, bias.values)
    else:
        xn = xv
    q = xn @ wq.values
    k, v = x_kv.values @ wk.values, x_kv.values @ wv.values
    merged, weights, qh, kh, vh = _attention_core(q, k, v, heads, inv_scale)
    out = merged @ wo.values
    if residual:
        out += xv

    def bwd(g):
        dmerged = g @ wo.values.T
        dwo = merged.T @ g
        dq, dk, dv = _attention_core_backward(dmerged, weights, qh, kh, vh, heads, inv_scale)
        dxn = dq @ wq.values.T
        dkv = dk @ wk.values.T + dv @ wv.values.T
        dwq = xn.T @ dq
        dwk, dwv = x_kv.values.T @ dk, x_kv.values.T @ dv
        if gain is not None:
            dx, dgain, dbias = _norm_backward(dxn, xhat, inv, gain.values)
            if residual:
                dx = dx + g
            return dx, dkv, dwq, dwk, dwv, dwo, dgain, dbias
        dx = dxn + g if residual else dxn
        return dx, dkv, dwq, dwk, dwv, dwo

    parents = (x_q, x_kv, wq, wk, wv, wo) if gain is None \
        else (x_q, x_kv, wq, wk, wv, wo, gain, bias)
    return _node(out, parents, "cross_attention_block", bwd), weights


def gate_block(prev: Tensor, src: Tensor, wz: Tensor, bz: Tensor, wi: Tensor, bi: Tensor,
               wf: Tensor, bf: Tensor) -> Tensor:
    """Gated state blend with fixed -1 input-gate and +1 forget-gate shifts.

    out = prev * sigmoid(src@wf + bf + 1) + tanh(src@wz + bz) * sigmoid(src@wi + bi - 1)
    """
    sv, pv = src.values, prev.values
    one = sv.dtype.type(1.0)
    z = np.tanh(sv @ wz.values + bz.values)
    i = expit(sv @ wi.values + bi.values - one)
    f = expit(sv @ wf.values + bf.values + one)
    out = pv * f + z * i

    def bwd(g):
        dzpre = (g * i) * (1.0 - z * z)
        dipre = (g * z) * (i * (1.0 - i))
        dfpre = (g * pv) * (f * (1.0 - f))
        dsrc = dzpre @ wz.values.T + dipre @ wi.values.T + dfpre @ wf.values.T
        return (
            g * f,
            dsrc,
            sv.T @ dzpre,
            dzpre.sum(axis=0),
            sv.T @ dipre,
            dipre.sum(axis=0),
            sv.T @ dfpre,
            dfpre.sum(axis=0),
        )

    return _node(out, (prev, src, wz, bz, wi, bi, wf, bf), "gate_block", bwd)


def ffn_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
              gain: Tensor | None = None, bias: Tensor | None = None,
              residual: bool = False) -> Tensor:
    """[pre-norm ->] linear -> GELU -> linear [-> +x]."""
    xv = x.values
    if gain is not None:
        xn, xhat, inv = _norm_forward(xv, gain.values, bias.values)
    else:
        xn = xv
    h1 = xn @ w1.values + b1.values
    cdf = 0.5 * (1.0 + erf(h1 * h1.dtype.type(_INV_SQRT2)))
    a = h1 * cdf
    out = a @ w2.values + b2.values
    if residual:
        out += xv

    def bwd(g):
        da = g @ w2.values.T
        dw2 = a.T @ g
        db2 = g.sum(axis=0)
        pdf = np.exp(-0.5 * h1 * h1) * h1.dtype.type(_INV_SQRT2PI)
        dh1 = da * (cdf + h1 * pdf)
        dxn = dh1 @ w1.values.T
        dw1 = xn.T @ dh1
        db1 = dh1.sum(axis=0)
        if gain is not None:
            dx, dgain, dbias = _norm_backward(dxn, xhat, inv, gain.values)
            if residual:
                dx = dx + g
            return dx, dw1, db1, dw2, db2, dgain, dbias
        dx = dxn + g if residual else dxn
        return dx, dw1, db1, dw2, db2

    parents = (x, w1, b1, w2, b2) if gain is None else (x, w1, b1, w2, b2, gain, bias)
    return _node(out, parents, "ffn_block", bwd)


def embed_sequence(table: Tensor, positions: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] + positions[:len(ids)] as a single gather node."""
    idx = np.asarray(ids, dtype=np.intp)
    n = idx.size
    out = table.values[idx] + positions.values[:n]

    def bwd(g):
        dt = np.zeros_like(table.values)
        np.add.at(dt, idx, g)
        dp = np.zeros_like(positions.values)
        dp[:n] = g
        return dt, dp

    return _node(out, (table, positions), "embed_sequence", bwd)
