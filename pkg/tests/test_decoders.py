import numpy as np
import pytest

import straightline as sl
from gradcheck import finite_difference_check
from ram.decoders import (
    DecoderParams,
    decode,
    direction_logit,
    init_decoder,
    masked_token_logits,
    predict_answer,
    qa_decode,
    ra_decode,
)
from ram.encoder import init_encoder
from ram.memory import init_memory_params, memory_step, init_memory
from ram.tensor import Tensor, cross_entropy, mul, sum_all
from scipy.special import expit, softmax


def dec64(d=4, hops=3, heads=2, seed=0):
    return init_decoder(d, hops, heads, np.random.default_rng(seed), dtype=np.float64)


def rand64(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), dtype=np.float64, requires_grad=grad)


class TestDecode:
    def test_zeroed_output_projections_give_pure_residual(self):
        p = dec64()
        p.self_attn.wo.values[...] = 0.0
        p.cross_attn.wo.values[...] = 0.0
        p.ffn_w2.values[...] = 0.0
        p.ffn_b2.values[...] = 0.0
        rng = np.random.default_rng(1)
        tokens, mem = rand64(rng, 3, 4), rand64(rng, 5, 4)
        np.testing.assert_array_equal(qa_decode(p, tokens, mem).values, tokens.values)

    def test_output_shape_matches_question_for_any_memory_size(self):
        rng = np.random.default_rng(2)
        for slots in (1, 4, 9):
            p = dec64()
            out = qa_decode(p, rand64(rng, 3, 4), rand64(rng, slots, 4))
            assert out.shape == (3, 4)

    def test_single_hop_matches_straightline(self):
        p = dec64(d=8, hops=1, heads=2, seed=4)
        rng = np.random.default_rng(5)
        tokens, mem = rand64(rng, 3, 8), rand64(rng, 4, 8)
        expected = sl.decoder_hop_once(tokens.values, mem.values, sl.decoder_params_dict(p), 2)
        np.testing.assert_allclose(decode(p, tokens, mem).values, expected, atol=1e-9)

    def test_three_hops_match_iterated_straightline(self):
        p = dec64(d=8, hops=3, heads=2, seed=6)
        rng = np.random.default_rng(7)
        tokens, mem = rand64(rng, 2, 8), rand64(rng, 3, 8)
        h = tokens.values
        for _ in range(3):
            h = sl.decoder_hop_once(h, mem.values, sl.decoder_params_dict(p), 2)
        np.testing.assert_allclose(decode(p, tokens, mem).values, h, atol=1e-9)

    def test_empty_input_rejected(self):
        p = dec64()
        with pytest.raises(ValueError):
            decode(p, Tensor(np.zeros((0, 4)), dtype=np.float64),
                   rand64(np.random.default_rng(0), 2, 4))

    def test_hops_share_the_same_parameter_objects(self):
        # tied weights: mutating the single tensor changes every hop
        p = dec64(d=4, hops=3, seed=8)
        rng = np.random.default_rng(9)
        tokens, mem = rand64(rng, 2, 4), rand64(rng, 2, 4)
        base = decode(p, tokens, mem).values.copy()
        p.cross_attn.wo.values[...] += 0.25
        changed = decode(p, tokens, mem).values
        assert not np.allclose(base, changed)
        single = dec64(d=4, hops=1, seed=8)
        # hop count is the only difference between these parameter sets
        assert single.self_attn.wq.values == pytest.approx(p.self_attn.wq.values)

    def test_ra_decode_is_direction_blind(self):
        p = dec64()
        rng = np.random.default_rng(3)
        sample, mem = rand64(rng, 4, 4), rand64(rng, 3, 4)
        a = ra_decode(p, sample, mem).values
        b = ra_decode(p, sample, mem).values
        np.testing.assert_array_equal(a, b)

    def test_cross_attention_weights_per_hop(self):
        p = dec64(d=4, hops=3)
        rng = np.random.default_rng(4)
        out, weights = decode(p, rand64(rng, 3, 4), rand64(rng, 5, 4), return_attention=True)
        assert len(weights) == 3
        for w in weights:
            assert w.shape == (2, 3, 5)
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


class TestPredictAnswer:
    def test_identical_rows_pool_to_any_row(self):
        rng = np.random.default_rng(0)
        row = rng.normal(size=(1, 4))
        h = Tensor(np.repeat(row, 3, axis=0), dtype=np.float64)
        emb = rand64(rng, 6, 4)
        logits = predict_answer(h, emb, [4, 0])
        expected = row @ emb.values[[4, 0]].T
        np.testing.assert_allclose(logits.values, expected, atol=1e-12)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(5, 4))
        emb = rand64(rng, 6, 4)
        a = predict_answer(Tensor(h, dtype=np.float64), emb, [1, 2, 3]).values
        b = predict_answer(Tensor(h[::-1].copy(), dtype=np.float64), emb, [1, 2, 3]).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_two_class_hand_dot_products(self):
        h = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), dtype=np.float64)
        emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), dtype=np.float64)
        logits = predict_answer(h, emb, [0, 2])
        # pooled = [2, 3]; dot with rows (1,0) and (1,1)
        np.testing.assert_allclose(logits.values, [[2.0, 5.0]])

    def test_empty_question_rejected(self):
        with pytest.raises(ValueError):
            predict_answer(Tensor(np.zeros((0, 4)), dtype=np.float64),
                           rand64(np.random.default_rng(0), 5, 4), [0])


class TestMaskedTokenLogits:
    def test_tying_logit_is_dot_with_embedding_row(self):
        rng = np.random.default_rng(2)
        h = rand64(rng, 4, 3)
        emb = rand64(rng, 7, 3)
        logits = masked_token_logits(h, [2], emb)
        for w in range(7):
            assert logits.values[0, w] == pytest.approx(float(h.values[2] @ emb.values[w]))

    def test_zero_row_gives_uniform_softmax(self):
        h = Tensor(np.zeros((3, 4)), dtype=np.float64)
        emb = rand64(np.random.default_rng(3), 5, 4)
        logits = masked_token_logits(h, [1], emb).values
        probs = softmax(logits, axis=-1)
        np.testing.assert_allclose(probs, 0.2, atol=1e-12)

    def test_three_word_vocabulary_oracle(self):
        h = Tensor(np.array([[1.0, -1.0], [0.5, 2.0]]), dtype=np.float64)
        emb = Tensor(np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]]), dtype=np.float64)
        logits = masked_token_logits(h, [0, 1], emb)
        np.testing.assert_allclose(logits.values, [[0.0, 2.0, -3.0], [2.5, 1.0, 6.0]])

    def test_position_out_of_range(self):
        with pytest.raises(ValueError):
            masked_token_logits(rand64(np.random.default_rng(0), 2, 3), [5],
                                rand64(np.random.default_rng(1), 4, 3))

    def test_no_positions_rejected(self):
        with pytest.raises(ValueError):
            masked_token_logits(rand64(np.random.default_rng(0), 2, 3), [],
                                rand64(np.random.default_rng(1), 4, 3))


class TestDirectionLogit:
    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(0)
        h = rand64(rng, 3, 4)
        w = Tensor(np.zeros((4, 1)), dtype=np.float64, requires_grad=True)
        b = Tensor(np.array([0.37]), dtype=np.float64, requires_grad=True)
        assert direction_logit(h, w, b).item() == pytest.approx(0.37)

    def test_depends_only_on_cls_row(self):
        rng = np.random.default_rng(1)
        h1 = rng.normal(size=(3, 4))
        h2 = h1.copy()
        h2[1:] += 100.0  # perturb everything but the CLS row
        w, b = rand64(rng, 4, 1), rand64(rng, 1)
        a = direction_logit(Tensor(h1, dtype=np.float64), w, b).item()
        c = direction_logit(Tensor(h2, dtype=np.float64), w, b).item()
        assert a == pytest.approx(c)

    def test_sigmoid_in_unit_interval(self):
        rng = np.random.default_rng(2)
        z = direction_logit(rand64(rng, 2, 4), rand64(rng, 4, 1), rand64(rng, 1)).item()
        assert 0.0 < expit(z) < 1.0


class TestGradientFlow:
    def test_qa_loss_reaches_memory_parameters_through_final_state(self):
        d, heads = 4, 2
        rng = np.random.default_rng(11)
        mp = init_memory_params(d, 2, heads, rng, dtype=np.float64)
        dp = init_decoder(d, 2, heads, rng, dtype=np.float64)
        enc = init_encoder(9, 6, d, rng, dtype=np.float64)
        segs = [np.array([4, 5, 6]), np.array([7, 8])]

        def loss():
            from ram.encoder import embed_segment

            state = init_memory(mp)
            for ids in segs:
                state = memory_step(mp, state, embed_segment(enc, ids))
            h = decode(dp, embed_segment(enc, [4, 8]), state)
            logits = predict_answer(h, enc.embeddings, [5, 6, 7])
            return cross_entropy(logits, [1])

        checked = [mp.gate_fuse.wz, mp.cross_attn.wv, mp.initial, enc.embeddings]
        assert finite_difference_check(loss, checked, max_coords=6) <= 1e-3
