"""Token/question embedding: shared embedding table plus learnable positions.

The embedding matrix is the single tensor also used by the answer and
masked-token output heads (weight tying), so it must never be copied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import embed_sequence
from .tensor import Tensor

__all__ = ["EncoderParams", "init_encoder", "embed_segment", "embed_question"]


@dataclass
class EncoderParams:
    embeddings: Tensor  # (vocab, d_model), tied with the output heads
    positions: Tensor  # (n_positions, d_model)


def init_encoder(vocab_size: int, n_positions: int, d_model: int,
                 rng: np.random.Generator, dtype=np.float32,
                 init_std: float | None = None) -> EncoderParams:
    """Embedding and position tables at std 1/sqrt(d_model) by default.

    The memory module carries no normalization, so token content must
    enter at the same scale as the slot state; much smaller embeddings
    measurably stall question-answering learning.
    """
    std = init_std if init_std is not None else 1.0 / d_model ** 0.5

    def init(*shape):
        return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)

    return EncoderParams(embeddings=init(vocab_size, d_model), positions=init(n_positions, d_model))


def embed_segment(params: EncoderParams, ids) -> Tensor:
    """Row n is embedding[ids[n]] + positions[n]; positions restart per segment."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("cannot embed an empty token sequence")
    if idx.size > params.positions.shape[0]:
        raise ValueError(
            f"sequence of {idx.size} tokens exceeds position table of {params.positions.shape[0]}"
        )
    if idx.min() < 0 or idx.max() >= params.embeddings.shape[0]:
        raise ValueError(f"token id out of range for vocabulary of {params.embeddings.shape[0]}")
    return embed_sequence(params.embeddings, params.positions, idx)


def embed_question(params: EncoderParams, ids) -> Tensor:
    """Questions share the segment encoding exactly."""
    return embed_segment(params, ids)
