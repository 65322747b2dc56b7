"""Full trainable model: encoder, slot memory, both decoders, direction head."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .config import ModelConfig
from .decoders import DecoderParams, init_decoder
from .encoder import EncoderParams, init_encoder
from .memory import AttentionParams, GateParams, MemoryParams, init_memory_params
from .tensor import Tensor

__all__ = ["ModelParams", "init_model", "param_store", "load_state", "parameter_count"]


@dataclass
class ModelParams:
    encoder: EncoderParams
    memory: MemoryParams
    qa_decoder: DecoderParams
    ra_decoder: DecoderParams
    direction_w: Tensor  # (d_model, 1)
    direction_b: Tensor  # (1,)


def init_model(config: ModelConfig, vocab_size: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters, deterministic for a given config seed."""
    rng = np.random.default_rng(config.seed)
    encoder = init_encoder(vocab_size, config.n_positions, config.d_model, rng, dtype)
    memory = init_memory_params(config.d_model, config.slots, config.heads, rng, dtype)
    qa_decoder = init_decoder(config.d_model, config.hops, config.heads, rng, dtype)
    ra_decoder = init_decoder(config.d_model, config.hops, config.heads, rng, dtype)
    direction_w = Tensor(
        rng.normal(0.0, 1.0 / config.d_model ** 0.5, (config.d_model, 1)).astype(dtype),
        requires_grad=True,
    )
    direction_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return ModelParams(encoder, memory, qa_decoder, ra_decoder, direction_w, direction_b)


def _attention_entries(prefix: str, p: AttentionParams):
    yield f"{prefix}.wq", p.wq
    yield f"{prefix}.wk", p.wk
    yield f"{prefix}.wv", p.wv
    yield f"{prefix}.wo", p.wo


def _gate_entries(prefix: str, p: GateParams):
    for f in fields(GateParams):
        yield f"{prefix}.{f.name}", getattr(p, f.name)


def _decoder_entries(prefix: str, p: DecoderParams):
    yield from _attention_entries(f"{prefix}.self_attn", p.self_attn)
    yield from _attention_entries(f"{prefix}.cross_attn", p.cross_attn)
    for name in (
        "norm_self_gain", "norm_self_bias", "norm_cross_gain", "norm_cross_bias",
        "norm_ffn_gain", "norm_ffn_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    ):
        yield f"{prefix}.{name}", getattr(p, name)


def param_store(model: ModelParams) -> "OrderedDict[str, Tensor]":
    """Stable name -> tensor map used by the optimizer and checkpoints.

    Tied tensors appear exactly once; the embedding entry backs the input
    encoding and both output projections.
    """
    entries = OrderedDict()
    entries["encoder.embeddings"] = model.encoder.embeddings
    entries["encoder.positions"] = model.encoder.positions
    m = model.memory
    entries.update(_attention_entries("memory.self_attn", m.self_attn))
    entries.update(_attention_entries("memory.cross_attn", m.cross_attn))
    entries.update(_gate_entries("memory.gate_fuse", m.gate_fuse))
    entries["memory.ffn_w1"] = m.ffn_w1
    entries["memory.ffn_b1"] = m.ffn_b1
    entries["memory.ffn_w2"] = m.ffn_w2
    entries["memory.ffn_b2"] = m.ffn_b2
    entries.update(_gate_entries("memory.gate_ffn", m.gate_ffn))
    entries["memory.initial"] = m.initial
    entries.update(_decoder_entries("qa", model.qa_decoder))
    entries.update(_decoder_entries("ra", model.ra_decoder))
    entries["direction.w"] = model.direction_w
    entries["direction.b"] = model.direction_b
    return entries


def load_state(model: ModelParams, state: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into the model tensors, validating shapes."""
    store = param_store(model)
    missing = sorted(set(store) - set(state))
    extra = sorted(set(state) - set(store))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in store.items():
        arr = np.asarray(state[name], dtype=tensor.values.dtype)
        if arr.shape != tensor.values.shape:
            raise ValueError(
                f"checkpoint entry {name!r} has shape {arr.shape}, expected {tensor.values.shape}"
            )
        tensor.values[...] = arr


def parameter_count(model: ModelParams) -> int:
    return sum(t.values.size for t in param_store(model).values())
