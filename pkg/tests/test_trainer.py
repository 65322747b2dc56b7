import json

import numpy as np
import pytest

import ram.trainer
from gradcheck import finite_difference_check
from ram.config import ModelConfig
from ram.data import QAExample, Story, Question, build_vocab, generate_task1, qa_examples
from ram.masking import FUTURE, PAST, default_lexicon
from ram.model import init_model, param_store
from ram.optim import adam_step, init_adam
from ram.trainer import (
    LossBreakdown,
    encode_examples,
    error_rate,
    evaluate_error,
    example_rng,
    mrr,
    split_validation,
    train,
    train_step,
)

LEX = default_lexicon()


def tiny_config(**overrides):
    base = dict(d_model=8, slots=3, heads=2, hops=2, epochs=2, batch_size=4, seed=0)
    base.update(overrides)
    return ModelConfig.desk(**base)


@pytest.fixture(scope="module")
def corpus():
    stories = generate_task1(12, seed=4)
    vocab, inventory = build_vocab(stories)
    return stories, vocab, inventory


def example_with_segments(n, corpus):
    # generator questions arrive every three lines, so prefixes are even;
    # odd prefixes are built by trimming and re-answering from the inventory
    stories, _, inventory = corpus
    for ex in qa_examples(stories):
        if len(ex.segments) == n:
            return ex
    for ex in qa_examples(stories):
        if len(ex.segments) > n:
            return QAExample(segments=ex.segments[:n], question=ex.question,
                             answer=inventory.answers[0])
    raise AssertionError(f"no example with {n} segments")


class TestTrainStepSchedule:
    def test_single_segment_story_has_only_qa_loss(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        ex = example_with_segments(2, corpus)
        single = QAExample(segments=ex.segments[:1], question=ex.question,
                           answer=stories[0].segments[0][-2])
        single = QAExample(segments=ex.segments[:1], question=ex.question, answer=single.answer)
        # answer must exist in the inventory; reuse a known one
        single = QAExample(segments=ex.segments[:1], question=ex.question,
                           answer=inventory.answers[0])
        breakdown, _ = train_step(model, single, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
        assert breakdown.rehearsal == 0.0
        assert breakdown.anticipation == 0.0
        assert breakdown.binary == 0.0
        assert breakdown.total == pytest.approx(breakdown.qa)

    def test_two_segment_schedule_enumeration(self, corpus, monkeypatch):
        # independent trace of the rule: anticipation fires only at step 1
        # (masking segment 2), rehearsal only at step 2 (masking segment 1)
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        ex = example_with_segments(2, corpus)
        recorded = []
        original = ram.trainer.apply_mask

        def spy(ids, positions, direction, **kw):
            sample = original(ids, positions, direction, **kw)
            recorded.append((tuple(ids), direction))
            return sample

        monkeypatch.setattr(ram.trainer, "apply_mask", spy)
        train_step(model, ex, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
        seg_ids = [tuple(int(i) for i in vocab.encode(s)) for s in ex.segments]
        assert recorded == [(seg_ids[1], FUTURE), (seg_ids[0], PAST)]

    def test_rehearsal_draws_strictly_earlier_segments(self, corpus, monkeypatch):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        ex = example_with_segments(4, corpus)
        seg_ids = [tuple(int(i) for i in vocab.encode(s)) for s in ex.segments]
        recorded = []
        original = ram.trainer.apply_mask

        def spy(ids, positions, direction, **kw):
            recorded.append((tuple(ids), direction))
            return original(ids, positions, direction, **kw)

        monkeypatch.setattr(ram.trainer, "apply_mask", spy)
        train_step(model, ex, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
        future = [seg_ids.index(ids) for ids, d in recorded if d == FUTURE]
        assert future == [1, 2, 3]  # each step anticipates exactly the next segment
        past_positions = [i for i, (ids, d) in enumerate(recorded) if d == PAST]
        # walk the schedule: at step t (0-based), futures precede pasts of step t+1
        step = 0
        for ids, d in recorded:
            if d == FUTURE:
                step += 1
            else:
                assert seg_ids.index(ids) < step

    def test_random_mask_flag_changes_positions_not_structure(self, corpus):
        stories, vocab, inventory = corpus
        ex = example_with_segments(3, corpus)
        results = {}
        for flag in (False, True):
            cfg = tiny_config(random_mask=flag)
            model = init_model(cfg, len(vocab))
            bd, grads = train_step(model, ex, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
            results[flag] = (bd, set(grads))
        for flag, (bd, names) in results.items():
            assert bd.rehearsal > 0.0
            assert bd.anticipation > 0.0
            assert bd.binary > 0.0
        assert results[False][1] == results[True][1]

    def test_story_without_questions_rejected(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        with pytest.raises(ValueError, match="question"):
            train_step(model, Story(segments=[["mary", "moved", "."]]), vocab, inventory,
                       LEX, cfg, example_rng(0, 1, 0))

    def test_single_question_story_accepted(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        story = Story(
            segments=[list(s) for s in example_with_segments(2, corpus).segments],
            questions=[Question(("where", "is", "mary", "?"), inventory.answers[0],
                                after_segment=2)],
        )
        breakdown, _ = train_step(model, story, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
        assert breakdown.qa > 0.0


class TestAblationNullity:
    @pytest.mark.parametrize("flags,zeroed", [
        (dict(use_rehearsal=False), ["rehearsal"]),
        (dict(use_anticipation=False), ["anticipation"]),
        (dict(use_binary=False), ["binary"]),
        (dict(use_rehearsal=False, use_anticipation=False, use_binary=False),
         ["rehearsal", "anticipation", "binary"]),
    ])
    def test_disabled_terms_are_exactly_zero(self, corpus, flags, zeroed):
        stories, vocab, inventory = corpus
        cfg = tiny_config(**flags)
        model = init_model(cfg, len(vocab))
        ex = example_with_segments(3, corpus)
        breakdown, grads = train_step(model, ex, vocab, inventory, LEX, cfg,
                                      example_rng(0, 1, 0))
        for name in zeroed:
            assert getattr(breakdown, name) == 0.0
        if len(zeroed) == 3:
            # no self-supervision at all: the shared decoder gets no gradients
            assert not any(name.startswith("ra.") for name in grads)
            assert not any(name.startswith("direction.") for name in grads)
            assert breakdown.total == pytest.approx(breakdown.qa)

    def test_binary_only_disabled_keeps_token_losses(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config(use_binary=False)
        model = init_model(cfg, len(vocab))
        ex = example_with_segments(3, corpus)
        breakdown, grads = train_step(model, ex, vocab, inventory, LEX, cfg,
                                      example_rng(0, 1, 0))
        assert breakdown.rehearsal > 0.0
        assert not any(name.startswith("direction.") for name in grads)


class TestLossAdditivity:
    def test_total_equals_sum_of_enabled_components(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        for ex in qa_examples(stories)[:6]:
            bd, _ = train_step(model, ex, vocab, inventory, LEX, cfg, example_rng(0, 1, 0))
            assert bd.total == pytest.approx(
                bd.qa + bd.rehearsal + bd.anticipation + bd.binary, abs=1e-6
            )


class TestEndToEndGradient:
    def test_full_objective_matches_finite_differences(self, corpus):
        # toy scale: d=8, K=3, h=2, 3-segment story, 64-bit
        stories, vocab, inventory = corpus
        cfg = tiny_config(hops=3)
        model = init_model(cfg, len(vocab), dtype=np.float64)
        store = param_store(model)
        ex = example_with_segments(3, corpus)
        encoded = encode_examples([ex], vocab, inventory, LEX, cfg)[0]

        def loss():
            from ram.trainer import _ssm_losses, _mean_loss
            from ram.decoders import qa_decode, predict_answer
            from ram.encoder import embed_question
            from ram.memory import init_memory
            from ram.tensor import add, cross_entropy

            rng = example_rng(0, 1, 0)  # identical masking draws every call
            state, reh, ant, bins = _ssm_losses(model, encoded, init_memory(model.memory),
                                                cfg, rng)
            h = qa_decode(model.qa_decoder, embed_question(model.encoder, encoded.question_ids),
                          state)
            total = cross_entropy(
                predict_answer(h, model.encoder.embeddings, inventory.token_ids),
                [encoded.answer_class],
            )
            for parts in (reh, ant, bins):
                mean = _mean_loss(parts)
                if mean is not None:
                    total = add(total, mean)
            return total

        params = [store["memory.gate_fuse.wz"], store["memory.initial"],
                  store["encoder.embeddings"], store["qa.cross_attn.wv"],
                  store["ra.ffn_w1"], store["direction.w"]]
        assert finite_difference_check(loss, params, max_coords=4) <= 1e-3


class TestTiedEmbeddings:
    def test_identity_holds_after_optimizer_steps(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        store = param_store(model)
        adam = init_adam(store, lr=1e-3)
        ex = example_with_segments(2, corpus)
        for step in range(3):
            _, grads = train_step(model, ex, vocab, inventory, LEX, cfg,
                                  example_rng(0, 1, step))
            adam_step(store, grads, adam)
        # the classifier weight IS the embedding tensor: same object, one entry
        assert store["encoder.embeddings"] is model.encoder.embeddings
        names = [n for n in store if "embedding" in n]
        assert names == ["encoder.embeddings"]


class TestTrainLoop:
    def test_loss_decreases_on_fixed_batch_within_twenty_steps(self, corpus):
        stories, vocab, inventory = corpus
        cfg = tiny_config(d_model=16, slots=4, heads=2)
        model = init_model(cfg, len(vocab))
        store = param_store(model)
        adam = init_adam(store, lr=cfg.lr)
        batch = encode_examples(qa_examples(stories)[:8], vocab, inventory, LEX, cfg)
        from ram.optim import clip_global_norm
        from ram.trainer import _train_step_encoded

        def batch_pass(update):
            grads = {}
            total = 0.0
            for i, enc in enumerate(batch):
                bd, g = _train_step_encoded(model, store, enc, cfg, example_rng(0, 1, i),
                                            inventory.token_ids)
                total += bd.total
                for name, arr in g.items():
                    grads[name] = arr.copy() if name not in grads else grads[name] + arr
            if update:
                clip_global_norm(grads, cfg.grad_clip)
                adam_step(store, grads, adam)
            return total

        first = batch_pass(update=True)
        for _ in range(19):
            last = batch_pass(update=True)
        assert last < first

    def test_same_seed_identical_first_epoch(self, tmp_path, corpus):
        stories, _, _ = corpus
        cfg = tiny_config()
        r1 = train(cfg, stories)
        r2 = train(cfg, stories)
        assert r1.history[0]["total"] == r2.history[0]["total"]
        assert r1.history[0].get("val_error") == r2.history[0].get("val_error")

    def test_metrics_log_and_checkpoints(self, tmp_path, corpus):
        stories, _, _ = corpus
        cfg = tiny_config()
        out = tmp_path / "run"
        result = train(cfg, stories, out_dir=out)
        lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(lines) == cfg.epochs
        for record in lines:
            for key in ("epoch", "qa", "rehearsal", "anticipation", "binary", "val_error", "seed"):
                assert key in record
        assert (out / "last.ram").exists()
        assert (out / "best.ram").exists()
        assert (out / "config.json").exists()
        meta = json.loads((out / "model.json").read_text())
        assert meta["vocab"] and meta["answers"]
        assert result.best_val_error is not None

    def test_saved_checkpoint_reproduces_logged_val_error(self, tmp_path, corpus):
        stories, _, _ = corpus
        cfg = tiny_config()
        out = tmp_path / "run"
        result = train(cfg, stories, out_dir=out)
        from ram.checkpoint import load_checkpoint
        from ram.model import load_state

        reloaded = init_model(cfg, len(result.vocab))
        load_state(reloaded, load_checkpoint(out / "last.ram"))
        val_stories = [stories[i] for i in result.val_indices]
        err = evaluate_error(reloaded, qa_examples(val_stories), result.vocab,
                             result.inventory, cfg)
        assert err == result.history[-1]["val_error"]

    def test_ablated_training_logs_zero_terms(self, corpus):
        stories, _, _ = corpus
        cfg = tiny_config(use_rehearsal=False, use_anticipation=False, use_binary=False,
                          epochs=1)
        result = train(cfg, stories)
        record = result.history[0]
        assert record["rehearsal"] == 0.0
        assert record["anticipation"] == 0.0
        assert record["binary"] == 0.0


class TestSplitValidation:
    def test_deterministic_and_disjoint(self):
        stories = generate_task1(20, seed=0)
        t1, v1, idx1 = split_validation(stories, 0.2, seed=3)
        t2, v2, idx2 = split_validation(stories, 0.2, seed=3)
        assert idx1 == idx2
        assert len(v1) == 4
        assert len(t1) + len(v1) == 20

    def test_zero_fraction(self):
        stories = generate_task1(5, seed=0)
        t, v, idx = split_validation(stories, 0.0, seed=1)
        assert len(t) == 5 and v == [] and idx == []


class TestMetrics:
    def test_error_rate_all_correct(self):
        assert error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_error_rate_one_wrong_of_four(self):
        assert error_rate([1, 2, 3, 4], [1, 2, 3, 0]) == 25.0

    def test_evaluate_error_perfect_on_degenerate_inventory(self, corpus):
        # every question in this corpus shares one answer class after training
        # the classifier cannot be wrong when only one class exists
        stories = [Story(segments=[["mary", "moved", "to", "the", "garden", "."]],
                         questions=[Question(("where", "is", "mary", "?"), "garden",
                                             after_segment=1)])]
        vocab, inventory = build_vocab(stories)
        cfg = tiny_config()
        model = init_model(cfg, len(vocab))
        assert evaluate_error(model, qa_examples(stories), vocab, inventory, cfg) == 0.0

    def test_mrr_rank_one(self):
        assert mrr([[True, False]]) == 1.0

    def test_mrr_rank_two(self):
        assert mrr([[False, True]]) == 0.5

    def test_mrr_two_queries(self):
        assert mrr([[True], [False, False, False, True]]) == pytest.approx(0.625)

    def test_mrr_requires_relevant_item(self):
        with pytest.raises(ValueError, match="no relevant"):
            mrr([[False, False]])

    def test_mrr_empty_rejected(self):
        with pytest.raises(ValueError):
            mrr([])
