import math

import numpy as np
import pytest

from lanat import Tensor, check_gradient
from lanat import autodiff as ad
from lanat.ctc import ctc_greedy_decode, ctc_loss
from lanat.losses import LossWeights, composite_loss, contrastive_loss, cross_entropy_tokens
from lanat.model import LaNat, LaNatConfig
from lanat.nn import sinusoidal_pe


def tiny_config(**overrides):
    base = dict(n_a=1, n_b=1, n_c=1, n_d=1, n_e=1, d=8, heads=2, ffn_dim=16,
                m_slots=2, vocab=3, feat_dim=6, conv_channels=2, n_ar_dec=1)
    base.update(overrides)
    return LaNatConfig(**base)


def desk_model(seed=0):
    return LaNat(LaNatConfig(), seed=seed)


class TestConfig:
    def test_counts_validated(self):
        with pytest.raises(ValueError, match="n_c"):
            LaNatConfig(n_c=0)
        with pytest.raises(ValueError, match="tau"):
            LaNatConfig(tau=-1.0)

    def test_round_trip(self):
        cfg = LaNatConfig.base_paper()
        assert LaNatConfig.from_dict(cfg.to_dict()) == cfg
        assert (cfg.n_a, cfg.n_b, cfg.n_c, cfg.n_d, cfg.n_e) == (6, 6, 5, 2, 4)
        assert cfg.d == 256


class TestAcousticEncode:
    def test_length_formula(self):
        model = desk_model()
        frames = np.random.default_rng(0).normal(size=(16, 20))
        h, lp = model.acoustic_encode(frames)
        assert h.shape == (4, 64)
        assert lp.shape == (4, 17)

    def test_posterior_rows_normalized(self):
        model = desk_model()
        frames = np.random.default_rng(1).normal(size=(24, 20))
        _, lp = model.acoustic_encode(frames)
        rows = np.log(np.exp(lp.data).sum(axis=1))
        assert np.abs(rows).max() < 1e-9

    def test_deterministic_without_dropout(self):
        model = desk_model()
        frames = np.random.default_rng(2).normal(size=(20, 20))
        a = model.acoustic_encode(frames)[0].data
        b = model.acoustic_encode(frames)[0].data
        assert np.array_equal(a, b)

    def test_short_input_rejected(self):
        with pytest.raises(ValueError):
            desk_model().acoustic_encode(np.zeros((3, 20)))


class TestTextEmbed:
    def test_position_shift_is_exactly_pe_difference(self):
        model = desk_model()
        out = model.text_embed([5, 5]).data
        pe = sinusoidal_pe(2, 64)
        assert np.allclose(out[0] - out[1], pe[0] - pe[1], atol=1e-12)

    def test_empty_and_out_of_vocab(self):
        model = desk_model()
        with pytest.raises(ValueError, match="empty"):
            model.text_embed([])
        with pytest.raises(ValueError, match="1..16"):
            model.text_embed([0])
        with pytest.raises(ValueError, match="1..16"):
            model.text_embed([17])

    def test_gradient_reaches_only_used_rows(self):
        model = desk_model()
        ad.tsum(model.text_embed([3, 7, 3])).backward()
        grad = model.token_table.grad
        used = np.flatnonzero(np.abs(grad).sum(axis=1) > 0)
        assert used.tolist() == [3, 7]
        # row 3 was looked up twice, row 7 once; same direction, double weight
        assert np.allclose(grad[3], 2 * grad[7], atol=1e-12)


class TestSharedEncode:
    def test_slot_count_independent_of_input_length(self):
        model = desk_model()
        rng = np.random.default_rng(3)
        for x_len in (1, 4, 11):
            h_se, h_com = model.shared_encode(Tensor(rng.normal(size=(x_len, 64))))
            assert h_se.shape == (x_len, 64)
            assert h_com.shape == (8, 64)

    def test_same_parameters_for_both_modalities(self):
        model = desk_model()
        x = Tensor(np.random.default_rng(4).normal(size=(5, 64)))
        a_se, a_com = model.shared_encode(x)
        b_se, b_com = model.shared_encode(x)
        assert np.array_equal(a_se.data, b_se.data)
        assert np.array_equal(a_com.data, b_com.data)


class TestSharedDecode:
    def setup_method(self):
        self.model = desk_model()
        rng = np.random.default_rng(5)
        self.fine = Tensor(rng.normal(size=(6, 64)))
        self.com = Tensor(rng.normal(size=(8, 64)))

    def test_logit_shape(self):
        for n in (1, 3, 9):
            mask = np.ones((n, 14), dtype=bool)
            out = self.model.shared_decode(self.fine, self.com, n, mask)
            assert out.shape == (n, 16)

    def test_all_true_mask_permutation_invariance(self):
        mask = np.ones((4, 14), dtype=bool)
        base = self.model.shared_decode(self.fine, self.com, 4, mask).data
        perm = np.random.default_rng(6).permutation(6)
        shuffled = Tensor(self.fine.data[perm])
        out = self.model.shared_decode(shuffled, self.com, 4, mask).data
        assert np.allclose(base, out, atol=1e-9)

    def test_fully_blocked_context_row_has_no_influence(self):
        mask = np.ones((4, 14), dtype=bool)
        mask[:, 5] = False  # frame 5 hidden from every query
        base = self.model.shared_decode(self.fine, self.com, 4, mask).data
        bumped = self.fine.data.copy()
        bumped[5] += 3.0
        out = self.model.shared_decode(Tensor(bumped), self.com, 4, mask).data
        assert np.array_equal(base, out)
        # and the same bump is visible once the mask allows the row
        mask[:, 5] = True
        seen = self.model.shared_decode(Tensor(bumped), self.com, 4, mask).data
        base_open = self.model.shared_decode(self.fine, self.com, 4, mask).data
        assert not np.array_equal(base_open, seen)

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError, match="mask"):
            self.model.shared_decode(self.fine, self.com, 4,
                                     np.ones((4, 13), dtype=bool))

    def test_trainable_query_table(self):
        model = LaNat(tiny_config(trainable_query_pe=True, query_pe_len=6), seed=1)
        fine = Tensor(np.random.default_rng(7).normal(size=(3, 8)))
        com = Tensor(np.random.default_rng(8).normal(size=(2, 8)))
        out = model.shared_decode(fine, com, 4, np.ones((4, 5), dtype=bool))
        assert out.shape == (4, 3)
        with pytest.raises(ValueError, match="query table"):
            model.shared_decode(fine, com, 7, np.ones((7, 5), dtype=bool))


class TestForwardSpeech:
    def test_logit_rows_match_target_length(self):
        model = desk_model()
        frames = np.random.default_rng(9).normal(size=(40, 20))
        out = model.forward_speech(frames, [1, 2, 3])
        assert out.asr_logits.shape == (3, 16)
        assert out.h_com.shape == (8, 64)

    def test_saturated_lookahead_equals_unmasked_decode(self):
        cfg = LaNatConfig(lookahead=10_000)
        model = LaNat(cfg, seed=2)
        frames = np.random.default_rng(10).normal(size=(40, 20))
        target = [4, 9]
        out = model.forward_speech(frames, target)
        free = model.shared_decode(out.h_se, out.h_com, 2,
                                   np.ones((2, out.h_se.shape[0] + 8), dtype=bool))
        assert np.array_equal(out.asr_logits.data, free.data)

    def test_infeasible_target_rejected(self):
        model = desk_model()
        frames = np.random.default_rng(11).normal(size=(16, 20))  # T = 4
        with pytest.raises(ValueError):
            model.forward_speech(frames, [2, 2, 2, 2])

    def test_gradient_reaches_memory_slots(self):
        model = desk_model()
        frames = np.random.default_rng(12).normal(size=(32, 20))
        out = model.forward_speech(frames, [1, 2])
        total = (ctc_loss(out.ctc_log_probs, [1, 2])
                 + cross_entropy_tokens(out.asr_logits, [0, 1]))
        total.backward()
        assert model.memory.grad is not None
        assert np.abs(model.memory.grad).max() > 0


class TestForwardText:
    def test_reconstruction_shape_and_order_sensitivity(self):
        model = desk_model()
        a = model.forward_text([2, 5, 9]).recon_logits.data
        assert a.shape == (3, 16)
        b = model.forward_text([9, 5, 2]).recon_logits.data
        assert not np.array_equal(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            desk_model().forward_text([])


class TestDecodeNar:
    def test_all_blank_gives_empty(self):
        model = desk_model()
        model.ctc_b.data[0] = 50.0  # slam the posterior onto blank
        frames = np.random.default_rng(13).normal(size=(24, 20))
        assert model.decode_nar(frames) == []

    def test_length_is_collapsed_greedy_length(self):
        model = desk_model(seed=3)
        rng = np.random.default_rng(14)
        for _ in range(5):
            frames = rng.normal(size=(int(rng.integers(16, 60)), 20))
            hyp = model.decode_nar(frames)
            _, lp = model.acoustic_encode(frames)
            assert len(hyp) == len(ctc_greedy_decode(lp))
            assert all(1 <= y <= 16 for y in hyp)

    def test_exactly_one_acoustic_and_one_decoder_pass(self):
        model = desk_model(seed=4)
        rng = np.random.default_rng(15)
        for t_in in (20, 44, 72):
            frames = rng.normal(size=(t_in, 20))
            model.reset_pass_counts()
            hyp = model.decode_nar(frames)
            assert model.pass_counts["acoustic"] == 1
            expected_dec = 1 if hyp else 0
            assert model.pass_counts["decoder"] == expected_dec


class TestArBaseline:
    def test_emits_at_most_max_len(self):
        model = LaNat(tiny_config(), seed=5)
        frames = np.random.default_rng(16).normal(size=(12, 6))
        out = model.decode_ar_baseline(frames, max_len=4)
        assert len(out) <= 4
        assert all(1 <= y <= 3 for y in out)

    def test_eos_bias_stops_immediately(self):
        model = LaNat(tiny_config(), seed=6)
        model.ar_b.data[0] = 50.0
        frames = np.random.default_rng(17).normal(size=(12, 6))
        assert model.decode_ar_baseline(frames, max_len=9) == []

    def test_greedy_prefix_consistency(self):
        model = LaNat(tiny_config(), seed=7)
        frames = np.random.default_rng(18).normal(size=(16, 6))
        short = model.decode_ar_baseline(frames, max_len=2)
        long = model.decode_ar_baseline(frames, max_len=6)
        assert long[:len(short)] == short

    def test_causal_layer_ignores_future_rows(self):
        from lanat.nn import AttentionConfig, ParamStore, additive_mask
        from lanat.model import ArDecoderLayer
        store = ParamStore(np.random.default_rng(19))
        layer = ArDecoderLayer(store, "ar", AttentionConfig(d=8, heads=2, ffn_dim=16))
        rng = np.random.default_rng(20)
        x = rng.normal(size=(4, 8))
        enc = Tensor(rng.normal(size=(5, 8)))
        causal = additive_mask(np.tril(np.ones((4, 4), dtype=bool)))
        base = layer(Tensor(x), enc, causal).data
        bumped = x.copy()
        bumped[3] += 2.0
        out = layer(Tensor(bumped), enc, causal).data
        assert np.array_equal(base[:3], out[:3])
        assert not np.array_equal(base[3], out[3])


class TestFullGradient:
    def test_stage3_composite_on_toy_model(self):
        model = LaNat(tiny_config(), seed=8)
        rng = np.random.default_rng(21)
        frames = rng.normal(size=(12, 6))
        target = [1, 2]
        weights = LossWeights(lam_ctc=0.3, lam_cont=1.0, lam_ce_y=0.3, lam_ce_o=1.0)

        # freeze the fusion mask so finite differences never cross the
        # discrete re-alignment boundary
        with ad.no_grad():
            _, lp0 = model.acoustic_encode(frames)
        mask = model._fusion_mask(lp0, target)

        def total_loss():
            h, lp = model.acoustic_encode(frames)
            h_se, h_com = model.shared_encode(h)
            asr = model.shared_decode(h_se, h_com, len(target), mask)
            text = model.forward_text(target)
            parts = {
                "ctc": ctc_loss(lp, target),
                "cont": contrastive_loss(h_com, text.h_com, model.config.tau),
                "ce_y": cross_entropy_tokens(text.recon_logits, [y - 1 for y in target]),
                "ce_o": cross_entropy_tokens(asr, [y - 1 for y in target]),
            }
            return composite_loss(parts, weights)

        # f ignores its argument: the closure reads the live parameter
        # tensor, which check_gradient perturbs in place
        for name in ("shared.memory", "text.table", "acoustic.ctc_proj.w",
                     "shared.block0.attn.wq", "acoustic.subsample.conv1.w"):
            err = check_gradient(lambda x: total_loss(), model.params[name],
                                 sample=24, rng=np.random.default_rng(22))
            assert err < 1e-4, name
