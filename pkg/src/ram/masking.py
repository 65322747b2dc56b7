"""Coreference-oriented token masking for the rehearsal/anticipation tasks.

A small part-of-speech lexicon marks nouns, pronouns and verbs; those are
the maskable candidates. Selection caps the masked count at 40% of the
segment (floor, minimum one when any candidate exists).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLS_ID, MASK_ID

__all__ = [
    "TAGS",
    "COREF_TAGS",
    "PAST",
    "FUTURE",
    "DIRECTION_LABELS",
    "PosLexicon",
    "MaskedSample",
    "load_lexicon",
    "default_lexicon",
    "select_mask_positions",
    "apply_mask",
]

TAGS = ("NOUN", "PRONOUN", "VERB", "OTHER")
COREF_TAGS = frozenset(("NOUN", "PRONOUN", "VERB"))

PAST = "past"
FUTURE = "future"
DIRECTION_LABELS = {PAST: 0.0, FUTURE: 1.0}


class PosLexicon:
    """Case-insensitive token -> tag map; unknown tokens are OTHER."""

    def __init__(self, mapping: dict[str, str]):
        self._tags: dict[str, str] = {}
        for token, tag in mapping.items():
            if tag not in TAGS:
                raise ValueError(f"unknown tag {tag!r} for token {token!r}")
            self._tags[token.lower()] = tag

    def tag(self, token: str) -> str:
        return self._tags.get(token.lower(), "OTHER")

    def is_maskable(self, token: str) -> bool:
        return self.tag(token) in COREF_TAGS

    def __len__(self) -> int:
        return len(self._tags)


def load_lexicon(path) -> PosLexicon:
    """Read a `token<TAB>tag` file; blank and #-comment lines are skipped."""
    mapping: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}: line {line_no}: expected token<TAB>tag")
        token, tag = parts[0].strip(), parts[1].strip()
        if tag not in TAGS:
            raise ValueError(f"{path}: line {line_no}: unknown tag {tag!r}")
        mapping[token] = tag
    return PosLexicon(mapping)


def default_lexicon() -> PosLexicon:
    """The shipped lexicon covering the bAbI vocabulary."""
    ref = resources.files("ram").joinpath("lexicon/babi.tsv")
    with resources.as_file(ref) as path:
        return load_lexicon(path)


@dataclass(frozen=True)
class MaskedSample:
    """A CLS-prefixed segment with selected tokens replaced by MASK.

    Target positions index into `ids` (so they are shifted by one for the
    CLS slot) and never include position 0.
    """

    ids: tuple[int, ...]
    target_positions: tuple[int, ...]
    target_ids: tuple[int, ...]
    direction: str


def mask_candidates(tokens: Sequence[str], lexicon: PosLexicon, mode: str = "coref") -> list[int]:
    """Positions eligible for masking under the given mode."""
    if mode == "coref":
        return [i for i, tok in enumerate(tokens) if lexicon.is_maskable(tok)]
    if mode == "random":
        return list(range(len(tokens)))
    raise ValueError(f"unknown mask mode {mode!r}")


def sample_positions(candidates: Sequence[int], n_tokens: int, ratio: float,
                     rng: np.random.Generator) -> list[int]:
    """Uniform subset of candidates, capped at max(1, floor(ratio * n_tokens))."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
    if not candidates:
        return []
    count = min(len(candidates), max(1, math.floor(ratio * n_tokens)))
    picks = rng.choice(len(candidates), size=count, replace=False)
    return sorted(candidates[i] for i in picks)


def select_mask_positions(tokens: Sequence[str], lexicon: PosLexicon, ratio: float,
                          rng: np.random.Generator, mode: str = "coref") -> list[int]:
    """Choose which token positions of a segment to mask."""
    return sample_positions(mask_candidates(tokens, lexicon, mode), len(tokens), ratio, rng)


def apply_mask(ids: Sequence[int], positions: Sequence[int], direction: str,
               mask_id: int = MASK_ID, cls_id: int = CLS_ID) -> MaskedSample:
    """Replace the selected ids with MASK and prepend CLS, recording targets."""
    if direction not in DIRECTION_LABELS:
        raise ValueError(f"direction must be one of {sorted(DIRECTION_LABELS)}, got {direction!r}")
    n = len(ids)
    ordered = sorted(set(int(p) for p in positions))
    if ordered and (ordered[0] < 0 or ordered[-1] >= n):
        raise ValueError(f"mask position out of range for segment of {n} tokens: {ordered}")
    masked = [cls_id] + [int(i) for i in ids]
    target_positions = []
    target_ids = []
    for p in ordered:
        target_positions.append(p + 1)
        target_ids.append(masked[p + 1])
        masked[p + 1] = mask_id
    return MaskedSample(
        ids=tuple(masked),
        target_positions=tuple(target_positions),
        target_ids=tuple(target_ids),
        direction=direction,
    )
