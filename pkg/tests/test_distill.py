import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpdistill import tensor as T
from wpdistill.corpus import CLS_MASKED, CLS_PAD, CLS_UNMASKED, NO_TARGET, Batch
from wpdistill.distill import (DistillConfig, MaskVector, hard_target_loss, init_projections, inter_loss,
                               kl_rows, layer_pairing, mask_vector, masked_lm_loss, soft_kl, soft_target_loss,
                               word_prediction_loss)
from wpdistill.errors import ConfigError, DegenerateBatchError, DimensionError, LabelError
from wpdistill.model import ForwardTrace, ModelConfig, forward, init
from wpdistill.tensor import Tensor, finite_diff_check

U, M, P = CLS_UNMASKED, CLS_MASKED, CLS_PAD


def np_kl(q, p):
    return float(np.sum(q * (np.log(q) - np.log(p))))


def np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def batch_from_classes(classes):
    classes = np.asarray(classes, dtype=np.int8)
    return Batch(np.zeros(classes.shape, dtype=np.int64), classes, np.full(classes.shape, NO_TARGET))


class TestMaskVector:
    def test_default_policy(self):
        mv = mask_vector(batch_from_classes([[U, M, P]]))
        assert mv.m_p.tolist() == [[1, 1, 0]] and mv.active_count == 2

    def test_without_unmasked(self):
        assert mask_vector(batch_from_classes([[U, M, P]]), include_unmasked=False).m_p.tolist() == [[0, 1, 0]]

    def test_all_pad(self):
        mv = mask_vector(batch_from_classes([[P, P, P]]))
        assert mv.m_p.tolist() == [[0, 0, 0]] and mv.active_count == 0

    def test_no_mask_vector_keeps_everything(self):
        assert mask_vector(batch_from_classes([[U, P]]), use_mask=False).m_p.tolist() == [[1, 1]]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([U, M, P]), min_size=1, max_size=30))
    def test_unmasked_enlarges_active_set(self, classes):
        b = batch_from_classes([classes])
        full, only = mask_vector(b), mask_vector(b, include_unmasked=False)
        assert np.array_equal(full.m_p == 0, b.classes == P)
        if U in classes:
            assert full.active_count > only.active_count
        else:
            assert full.active_count == only.active_count


class TestSoftKL:
    def test_equal_logits_zero(self, rng):
        x = rng.normal(size=(4, 6))
        for tau in (0.5, 1, 15):
            assert abs(soft_kl(Tensor(x), x, tau).item()) < 1e-12

    def test_tau_two_prefactor(self, rng):
        s, t = rng.normal(size=5), rng.normal(size=5)
        assert math.isclose(soft_kl(Tensor(s), t, 2.0).item(), 4 * np_kl(np_softmax(t / 2), np_softmax(s / 2)),
                            rel_tol=1e-12)

    def test_hand_value(self):
        out = soft_kl(Tensor([math.log(1), math.log(3)]), np.array([0.0, 0.0]), 1.0).item()
        oracle = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert math.isclose(out, oracle, rel_tol=1e-12)
        assert abs(out - 0.1438) < 1e-4

    def test_student_reference_direction(self, rng):
        s, t = rng.normal(size=5), rng.normal(size=5)
        out = soft_kl(Tensor(s), t, 3.0, "student_ref").item()
        assert math.isclose(out, 9 * np_kl(np_softmax(s / 3), np_softmax(t / 3)), rel_tol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            soft_kl(Tensor(np.zeros(3)), np.zeros(4), 1.0)

    def test_non_positive_tau(self):
        with pytest.raises(ConfigError):
            soft_kl(Tensor(np.zeros(3)), np.zeros(3), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.2, 30.0))
    def test_non_negative_and_zero_iff_equal(self, seed, tau):
        r = np.random.default_rng(seed)
        s, t = r.normal(size=(3, 7)) * 3, r.normal(size=(3, 7)) * 3
        assert soft_kl(Tensor(s), t, tau).item() >= 0
        assert abs(soft_kl(Tensor(s), s + 2.5, tau).item()) < 1e-10  # shift-invariant softmax

    @pytest.mark.parametrize("tau", [1, 5, 10, 15, 20, 100, 200, 1000])
    def test_tau_sweep_accepted(self, tau, rng):
        cfg = DistillConfig(tau_st=tau)
        cfg.validate()
        assert soft_target_loss(Tensor(rng.normal(size=(2, 2))), rng.normal(size=(2, 2)), cfg.tau_st).item() >= 0

    def test_teacher_receives_no_gradient(self, rng):
        s, t = T.parameter(rng.normal(size=(2, 5))), T.parameter(rng.normal(size=(2, 5)))
        soft_kl(s, t, 2.0).backward()
        assert s.grad is not None and t.grad is None


class TestWordPredictionLoss:
    def setup_data(self, rng):
        classes = np.array([[U, M, U, P, P], [M, U, U, U, P]], dtype=np.int8)
        s, t = rng.normal(size=(2, 5, 9)), rng.normal(size=(2, 5, 9))
        return batch_from_classes(classes), s, t

    def test_identical_is_zero(self, rng):
        b, s, _ = self.setup_data(rng)
        assert abs(word_prediction_loss(Tensor(s), s, mask_vector(b), DistillConfig()).item()) < 1e-12

    def test_drop_then_average_oracle(self, rng):
        b, s, t = self.setup_data(rng)
        keep = b.classes != P
        cfg = DistillConfig(tau_sp=15.0)
        oracle = np.mean([225 * np_kl(np_softmax(t[i, j] / 15), np_softmax(s[i, j] / 15))
                          for i, j in zip(*np.nonzero(keep))])
        out = word_prediction_loss(Tensor(s), t, mask_vector(b), cfg).item()
        assert abs(out - oracle) <= 1e-12

    def test_single_position_reduces_to_soft_kl(self, rng):
        b = batch_from_classes([[P, U, P]])
        s, t = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
        out = word_prediction_loss(Tensor(s), t, mask_vector(b), DistillConfig()).item()
        assert math.isclose(out, soft_kl(Tensor(s[0, 1]), t[0, 1], 15.0).item(), rel_tol=1e-13)

    def test_pad_weights_irrelevant(self, rng):
        b, s, t = self.setup_data(rng)
        s[b.classes == P] = 1e3 * rng.normal(size=(int((b.classes == P).sum()), 9))
        mv = mask_vector(b)
        a = word_prediction_loss(Tensor(s), t, mv, DistillConfig()).item()
        scaled = MaskVector(np.where(b.classes == P, mv.m_p * 123.0, mv.m_p), mv.active_count)
        assert word_prediction_loss(Tensor(s), t, scaled, DistillConfig()).item() == a

    def test_degenerate(self, rng):
        b = batch_from_classes([[P, P]])
        with pytest.raises(DegenerateBatchError):
            word_prediction_loss(Tensor(rng.normal(size=(1, 2, 3))), np.zeros((1, 2, 3)), mask_vector(b),
                                 DistillConfig())

    def test_mse_variant(self, rng):
        b, s, t = self.setup_data(rng)
        keep = b.classes != P
        oracle = np.mean(((s - t) ** 2).mean(-1)[keep])
        out = word_prediction_loss(Tensor(s), t, mask_vector(b), DistillConfig(divergence_sp="mse")).item()
        assert abs(out - oracle) < 1e-12

    def test_gradient(self, rng):
        b, s, t = self.setup_data(rng)
        x = T.parameter(s)
        cfg = DistillConfig(tau_sp=3.0)
        assert finite_diff_check(lambda v: word_prediction_loss(v, t, mask_vector(b), cfg), x) <= 1e-6


class TestTaskLosses:
    def test_identical_zero(self, rng):
        x = rng.normal(size=(3, 2))
        assert abs(soft_target_loss(Tensor(x), x).item()) < 1e-14

    def test_two_class_hand(self):
        s, t = np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])
        q, p = np_softmax(t[0]), np_softmax(s[0])
        assert math.isclose(soft_target_loss(Tensor(s), t).item(), np_kl(q, p), rel_tol=1e-13)

    def test_hard_peaked(self):
        assert hard_target_loss(Tensor([[50.0, -50.0]]), [0]).item() < 1e-40

    def test_hard_uniform(self):
        assert math.isclose(hard_target_loss(Tensor(np.zeros((4, 3))), [0, 1, 2, 0]).item(), math.log(3))

    def test_hard_oracle(self, rng):
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, size=5)
        oracle = np.mean([-np.log(np_softmax(x[i])[y[i]]) for i in range(5)])
        assert math.isclose(hard_target_loss(Tensor(x), y).item(), oracle, rel_tol=1e-13)

    def test_hard_label_range(self):
        with pytest.raises(LabelError):
            hard_target_loss(Tensor(np.zeros((2, 2))), [0, 2])

    def test_masked_lm_loss(self, rng):
        x = rng.normal(size=(1, 3, 4))
        targets = np.array([[NO_TARGET, 2, 0]])
        oracle = -(np.log(np_softmax(x[0, 1])[2]) + np.log(np_softmax(x[0, 2])[0])) / 2
        assert math.isclose(masked_lm_loss(Tensor(x), targets).item(), oracle, rel_tol=1e-13)
        with pytest.raises(DegenerateBatchError):
            masked_lm_loss(Tensor(x), np.full((1, 3), NO_TARGET))


def hand_trace(hs, att):
    hs = Tensor(np.asarray(hs, dtype=np.float64))
    att = Tensor(np.asarray(att, dtype=np.float64))
    z = Tensor(np.zeros(1))
    return ForwardTrace(hs, [hs], [att], [z], [z], [z], hs, hs, np.zeros(hs.shape[:2], dtype=bool))


class TestInterLoss:
    def test_pairing(self):
        assert layer_pairing(2, 4) == [(1, 2), (2, 4)]
        assert layer_pairing(3, 4) == [(1, 2), (2, 3), (3, 4)]
        with pytest.raises(ConfigError):
            layer_pairing(4, 2)

    def test_identical_is_zero(self, rng):
        model = init(ModelConfig(layers=2, hidden=8, heads=2, vocab=10, max_seq=6))
        trace, _ = forward(model, rng.integers(0, 10, size=(2, 6)))
        proj = init_projections(8, 8, 2)
        assert abs(inter_loss(trace, trace, proj).item()) < 1e-12

    def test_hand_mse(self):
        att = [[[[0.5, 0.5], [0.5, 0.5]]]]
        s = hand_trace([[[1.0, 2.0], [3.0, 4.0]]], att)
        t = hand_trace([[[1.0, 0.0], [3.0, 6.0]]], att)
        # row means of squared differences: (0 + 4) / 2 and (0 + 4) / 2, averaged over the 2 rows
        assert math.isclose(inter_loss(s, t).item(), 2.0, rel_tol=1e-14)

    def test_hand_attention_kl(self):
        hs = [[[0.0, 0.0], [0.0, 0.0]]]
        s = hand_trace(hs, [[[[0.5, 0.5], [0.25, 0.75]]]])
        t = hand_trace(hs, [[[[0.5, 0.5], [0.5, 0.5]]]])
        oracle = np_kl(np.array([0.5, 0.5]), np.array([0.25, 0.75])) / 2
        assert math.isclose(inter_loss(s, t).item(), oracle, rel_tol=1e-13)

    def test_gradient_through_student_and_projection(self, rng):
        s_model = init(ModelConfig(layers=2, hidden=8, heads=2, vocab=10, max_seq=5, seed=1))
        t_model = init(ModelConfig(layers=4, hidden=12, heads=3, vocab=10, max_seq=5, seed=2))
        x = rng.integers(0, 10, size=(2, 5))
        pad = np.array([[0, 0, 0, 1, 1], [0, 0, 0, 0, 0]], dtype=bool)
        t_trace, _ = forward(t_model, x, pad)
        proj = init_projections(8, 12, 2, seed=3)
        params = proj + s_model.parameters()

        def f(_):
            trace, _ = forward(s_model, x, pad)
            return inter_loss(trace, t_trace, proj)

        assert finite_diff_check(f, params, max_coords=20, rng=rng) <= 1e-4
        assert all(p.grad is None for p in t_model.parameters())


class TestDistillConfig:
    def test_defaults(self):
        cfg = DistillConfig()
        assert cfg.tau_sp == 15 and cfg.tau_st == 1
        assert cfg.include_unmasked and not cfg.add_inter and not cfg.add_hard
        assert cfg.kl_direction == "teacher_ref"

    @pytest.mark.parametrize("kw", [dict(tau_sp=0), dict(tau_st=-1), dict(divergence_sp="l1"),
                                    dict(kl_direction="sideways")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DistillConfig(**kw).validate()
