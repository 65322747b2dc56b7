"""Streaming training loop: QA loss plus rehearsal/anticipation self-supervision.

Each example streams its segments through the memory one at a time. After
every update the model rehearses a random earlier segment (past label) and
anticipates the upcoming one (future label) as masked-token prediction;
after the last segment the question is decoded against the final memory.
The self-supervised sub-losses are averaged over their contributing steps
and added, unweighted, to the QA cross-entropy.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ModelConfig
from .data import (
    AnswerInventory,
    QAExample,
    Story,
    Vocabulary,
    build_vocab,
    qa_examples,
)
from .decoders import direction_logit, masked_token_logits, predict_answer, qa_decode, ra_decode
from .encoder import embed_question, embed_segment
from .masking import (
    DIRECTION_LABELS,
    FUTURE,
    PAST,
    PosLexicon,
    apply_mask,
    default_lexicon,
    mask_candidates,
    sample_positions,
)
from .memory import init_memory, memory_step
from .model import ModelParams, init_model, param_store
from .optim import AdamState, adam_step, clip_global_norm, init_adam
from .tensor import (
    Graph,
    Tensor,
    add,
    binary_cross_entropy_logit,
    cross_entropy,
    no_grad,
    scale,
)

__all__ = [
    "LossBreakdown",
    "EncodedExample",
    "TrainResult",
    "encode_examples",
    "train_step",
    "train",
    "evaluate_error",
    "mrr",
    "split_validation",
    "example_rng",
]

_VAL_SPLIT_SALT = 7919
_ORDER_SALT = 104729


@dataclass
class LossBreakdown:
    qa: float = 0.0
    rehearsal: float = 0.0
    anticipation: float = 0.0
    binary: float = 0.0
    total: float = 0.0  # value of the optimized objective, not a derived sum

    def as_dict(self) -> dict:
        return {
            "qa": self.qa,
            "rehearsal": self.rehearsal,
            "anticipation": self.anticipation,
            "binary": self.binary,
            "total": self.total,
        }


@dataclass(frozen=True)
class EncodedExample:
    """A QAExample pre-encoded for the model: ids, mask candidates, class."""

    segment_ids: tuple[tuple[int, ...], ...]
    question_ids: tuple[int, ...]
    answer_class: int
    coref_candidates: tuple[tuple[int, ...], ...]
    index: int


def encode_examples(examples: Sequence[QAExample], vocab: Vocabulary,
                    inventory: AnswerInventory, lexicon: PosLexicon,
                    config: ModelConfig) -> list[EncodedExample]:
    """Validate and encode examples; unseen answers get class -1 (never predicted)."""
    out = []
    for i, ex in enumerate(examples):
        if not ex.segments:
            raise ValueError(f"example {i}: a question needs at least one preceding segment")
        for seg in ex.segments:
            if not seg:
                raise ValueError(f"example {i}: empty segment")
            if len(seg) > config.n_max:
                raise ValueError(f"example {i}: segment of {len(seg)} tokens exceeds n_max={config.n_max}")
        if not ex.question:
            raise ValueError(f"example {i}: empty question")
        if len(ex.question) > config.n_positions:
            raise ValueError(f"example {i}: question of {len(ex.question)} tokens exceeds position table")
        answer_class = inventory.class_of(ex.answer) if ex.answer in inventory else -1
        out.append(
            EncodedExample(
                segment_ids=tuple(tuple(int(t) for t in vocab.encode(seg)) for seg in ex.segments),
                question_ids=tuple(int(t) for t in vocab.encode(ex.question)),
                answer_class=answer_class,
                coref_candidates=tuple(
                    tuple(mask_candidates(seg, lexicon, "coref")) for seg in ex.segments
                ),
                index=i,
            )
        )
    return out


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-example generator, independent of batch layout and worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def _mean_loss(parts: list[Tensor]) -> Tensor | None:
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return scale(total, 1.0 / len(parts)) if len(parts) > 1 else total


def _ssm_losses(model: ModelParams, ex: EncodedExample, state, config: ModelConfig,
                rng: np.random.Generator):
    """Stream all segments; collect per-direction token losses and binary losses.

    Returns (final_memory_state, rehearsal_parts, anticipation_parts, binary_parts).
    Rehearsal draws one uniformly random earlier segment per step; anticipation
    masks the upcoming segment. Both decode against the just-updated memory.
    """
    reh: list[Tensor] = []
    ant: list[Tensor] = []
    bins: list[Tensor] = []
    n_segments = len(ex.segment_ids)

    def decode_masked(seg_idx: int, direction: str):
        ids = ex.segment_ids[seg_idx]
        if config.mask_mode == "coref":
            candidates = ex.coref_candidates[seg_idx]
        else:
            candidates = range(len(ids))
        positions = sample_positions(candidates, len(ids), config.mask_ratio, rng)
        if not positions:
            return None
        sample = apply_mask(ids, positions, direction)
        h = ra_decode(model.ra_decoder, embed_segment(model.encoder, sample.ids), state)
        logits = masked_token_logits(h, sample.target_positions, model.encoder.embeddings)
        token_loss = cross_entropy(logits, sample.target_ids)
        binary_loss = None
        if config.use_binary:
            z = direction_logit(h, model.direction_w, model.direction_b)
            binary_loss = binary_cross_entropy_logit(z, DIRECTION_LABELS[direction])
        return token_loss, binary_loss

    for step in range(n_segments):
        segment = embed_segment(model.encoder, ex.segment_ids[step])
        state = memory_step(model.memory, state, segment)
        if config.use_rehearsal and step > 0:
            j = int(rng.integers(0, step))
            decoded = decode_masked(j, PAST)
            if decoded is not None:
                reh.append(decoded[0])
                if decoded[1] is not None:
                    bins.append(decoded[1])
        if config.use_anticipation and step < n_segments - 1:
            decoded = decode_masked(step + 1, FUTURE)
            if decoded is not None:
                ant.append(decoded[0])
                if decoded[1] is not None:
                    bins.append(decoded[1])
    return state, reh, ant, bins


def _as_encoded(story, vocab, inventory, lexicon, config) -> EncodedExample:
    if isinstance(story, EncodedExample):
        return story
    if isinstance(story, QAExample):
        examples = [story]
    elif isinstance(story, Story):
        if not story.questions:
            raise ValueError("story has no questions")
        examples = qa_examples([story])
        if len(examples) != 1:
            raise ValueError(
                f"story has {len(examples)} questions; flatten with qa_examples() and train per question"
            )
    else:
        raise TypeError(f"expected Story or QAExample, got {type(story).__name__}")
    return encode_examples(examples, vocab, inventory, lexicon, config)[0]


def train_step(model: ModelParams, story, vocab: Vocabulary, inventory: AnswerInventory,
               lexicon: PosLexicon, config: ModelConfig,
               rng: np.random.Generator) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss breakdown and per-parameter gradients for one example."""
    ex = _as_encoded(story, vocab, inventory, lexicon, config)
    store = param_store(model)
    return _train_step_encoded(model, store, ex, config, rng, inventory.token_ids)


def _train_step_encoded(model: ModelParams, store: "OrderedDict[str, Tensor]",
                        ex: EncodedExample, config: ModelConfig,
                        rng: np.random.Generator,
                        answer_token_ids: np.ndarray) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    if ex.answer_class < 0:
        raise ValueError("cannot train on an answer outside the inventory")
    state, reh, ant, bins = _ssm_losses(model, ex, init_memory(model.memory), config, rng)
    h_q = qa_decode(model.qa_decoder, embed_question(model.encoder, ex.question_ids), state)
    logits = predict_answer(h_q, model.encoder.embeddings, answer_token_ids)
    qa_loss = cross_entropy(logits, [ex.answer_class])

    total = qa_loss
    breakdown = LossBreakdown(qa=qa_loss.item())
    for attr, parts in (("rehearsal", reh), ("anticipation", ant), ("binary", bins)):
        mean = _mean_loss(parts)
        if mean is not None:
            setattr(breakdown, attr, mean.item())
            total = add(total, mean)
    breakdown.total = total.item()

    tensor_grads = Graph(total).backward()
    grads = {name: tensor_grads[t] for name, t in store.items() if t in tensor_grads}
    return breakdown, grads


def error_rate(predicted, truth) -> float:
    """Percent error: 100 * (1 - correct / total)."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise ValueError("predictions and truth must be equal-length and non-empty")
    return 100.0 * (1.0 - float((predicted == truth).sum()) / predicted.size)


def predict_classes(model: ModelParams, encoded: Sequence[EncodedExample],
                    inventory: AnswerInventory) -> np.ndarray:
    """Arg-max answer class per example, without building gradient graphs."""
    out = np.empty(len(encoded), dtype=np.intp)
    with no_grad():
        for i, ex in enumerate(encoded):
            state = init_memory(model.memory)
            for ids in ex.segment_ids:
                state = memory_step(model.memory, state, embed_segment(model.encoder, ids))
            h_q = qa_decode(model.qa_decoder, embed_question(model.encoder, ex.question_ids), state)
            logits = predict_answer(h_q, model.encoder.embeddings, inventory.token_ids)
            out[i] = int(np.argmax(logits.values[0]))
    return out


def evaluate_error(model: ModelParams, stories, vocab: Vocabulary,
                   inventory: AnswerInventory, config: ModelConfig,
                   lexicon: PosLexicon | None = None) -> float:
    """Percent error rate: 100 * (1 - correct / total), arg-max over classes."""
    examples = stories if (stories and isinstance(stories[0], (QAExample, EncodedExample))) \
        else qa_examples(stories)
    if not examples:
        raise ValueError("no questions to evaluate")
    if isinstance(examples[0], EncodedExample):
        encoded = examples
    else:
        encoded = encode_examples(examples, vocab, inventory, lexicon or default_lexicon(), config)
    predicted = predict_classes(model, encoded, inventory)
    truth = np.array([ex.answer_class for ex in encoded])
    return error_rate(predicted, truth)


def mrr(rankings: Sequence[Sequence[bool]]) -> float:
    """Mean reciprocal rank of the first relevant item per ranked list."""
    if not rankings:
        raise ValueError("mrr needs at least one ranking")
    total = 0.0
    for i, marks in enumerate(rankings):
        rank = next((r for r, hit in enumerate(marks, start=1) if hit), None)
        if rank is None:
            raise ValueError(f"ranking {i} has no relevant item")
        total += 1.0 / rank
    return total / len(rankings)


def split_validation(stories: Sequence[Story], fraction: float,
                     seed: int) -> tuple[list[Story], list[Story], list[int]]:
    """Deterministic held-out split by story; returns the held-out indices."""
    if fraction <= 0.0 or len(stories) < 2:
        return list(stories), [], []
    rng = np.random.default_rng(np.random.SeedSequence([seed, _VAL_SPLIT_SALT]))
    n_val = min(max(1, int(round(fraction * len(stories)))), len(stories) - 1)
    perm = rng.permutation(len(stories))
    val_idx = sorted(int(i) for i in perm[:n_val])
    val_set = set(val_idx)
    train = [s for i, s in enumerate(stories) if i not in val_set]
    val = [stories[i] for i in val_idx]
    return train, val, val_idx


@dataclass
class TrainResult:
    model: ModelParams
    vocab: Vocabulary
    inventory: AnswerInventory
    config: ModelConfig
    history: list[dict] = field(default_factory=list)
    best_val_error: float | None = None
    best_epoch: int | None = None
    val_indices: list[int] = field(default_factory=list)


def train(config: ModelConfig, stories: Sequence[Story], *,
          val_stories: Sequence[Story] | None = None,
          lexicon: PosLexicon | None = None,
          out_dir=None,
          early_stop_error: float | None = None,
          max_seconds: float | None = None,
          log: Callable[[str], None] | None = None,
          metadata: dict | None = None) -> TrainResult:
    """Train from scratch on a story corpus.

    Gradients are summed over each mini-batch of per-example graphs,
    clipped at a global norm, and applied with Adam. When `out_dir` is
    given, every epoch persists `last.ram` plus a `metrics.jsonl` line and
    the best-on-validation checkpoint is kept as `best.ram`.
    """
    if not stories:
        raise ValueError("train needs a non-empty corpus")
    lexicon = lexicon or default_lexicon()

    vocab, inventory = build_vocab(stories)
    if val_stories is None:
        train_stories, val_split, val_idx = split_validation(stories, config.val_fraction, config.seed)
    else:
        train_stories, val_split, val_idx = list(stories), list(val_stories), []

    train_encoded = encode_examples(qa_examples(train_stories), vocab, inventory, lexicon, config)
    val_encoded = encode_examples(qa_examples(val_split), vocab, inventory, lexicon, config) \
        if val_split else []
    if not train_encoded:
        raise ValueError("training stories contain no questions")

    model = init_model(config, len(vocab))
    store = param_store(model)
    adam = init_adam(store, lr=config.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _ORDER_SALT]))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        config.save(out_path / "config.json")
        meta = {
            "vocab": vocab.tokens,
            "answers": inventory.answers,
            "val_story_indices": val_idx,
            "parameters": int(sum(t.values.size for t in store.values())),
        }
        meta.update(metadata or {})
        (out_path / "model.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
        metrics_fh = open(out_path / "metrics.jsonl", "w", encoding="utf-8")
    else:
        metrics_fh = None

    result = TrainResult(model, vocab, inventory, config, val_indices=val_idx)
    pool = None
    if config.workers > 1:
        from .parallel import GradientWorkers

        pool = GradientWorkers(model, store, train_encoded, config,
                               inventory.token_ids, len(vocab))
    started = time.monotonic()
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.monotonic()
            permutation = order_rng.permutation(len(train_encoded))
            sums = np.zeros(5)
            for lo in range(0, len(permutation), config.batch_size):
                batch = permutation[lo : lo + config.batch_size]
                if pool is not None:
                    losses, grads = pool.run_batch(epoch, batch)
                    sums += losses.sum(axis=0)
                else:
                    grads: dict[str, np.ndarray] = {}
                    for idx in batch:
                        ex = train_encoded[idx]
                        breakdown, g = _train_step_encoded(
                            model, store, ex, config,
                            example_rng(config.seed, epoch, ex.index), inventory.token_ids,
                        )
                        sums += (breakdown.qa, breakdown.rehearsal,
                                 breakdown.anticipation, breakdown.binary, breakdown.total)
                        for name, arr in g.items():
                            held = grads.get(name)
                            grads[name] = arr.copy() if held is None else held + arr
                clip_global_norm(grads, config.grad_clip)
                adam_step(store, grads, adam)
            n = len(train_encoded)
            record = {
                "epoch": epoch,
                "qa": sums[0] / n,
                "rehearsal": sums[1] / n,
                "anticipation": sums[2] / n,
                "binary": sums[3] / n,
                "total": sums[4] / n,
                "seed": config.seed,
                "seconds": round(time.monotonic() - epoch_start, 3),
            }
            if val_encoded:
                record["val_error"] = evaluate_error(model, val_encoded, vocab, inventory, config)
            result.history.append(record)
            if log is not None:
                log(_format_epoch(record))
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if out_path is not None:
                save_checkpoint(out_path / "last.ram", store)
            val_error = record.get("val_error")
            if val_error is not None and (
                result.best_val_error is None or val_error < result.best_val_error
            ):
                result.best_val_error = val_error
                result.best_epoch = epoch
                if out_path is not None:
                    save_checkpoint(out_path / "best.ram", store)
            if early_stop_error is not None and val_error is not None and val_error <= early_stop_error:
                break
            if max_seconds is not None and time.monotonic() - started >= max_seconds:
                break
    finally:
        if pool is not None:
            pool.close()
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def _format_epoch(record: dict) -> str:
    msg = (
        f"epoch {record['epoch']:>3}  qa {record['qa']:.4f}  reh {record['rehearsal']:.4f}  "
        f"ant {record['anticipation']:.4f}  bin {record['binary']:.4f}"
    )
    if "val_error" in record:
        msg += f"  val_err {record['val_error']:.2f}%"
    return msg + f"  ({record['seconds']:.1f}s)"
