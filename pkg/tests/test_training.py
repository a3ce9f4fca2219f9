import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fipmae import autodiff as ad
from fipmae.modalities import MODALITIES, ModalityKind
from fipmae.model import ModelConfig, ModelParams, forward_pretrain
from fipmae.training import (FipConfig, TrainLog, TrainState, adamw_step, fip_loss,
                             lr_schedule, make_mask_plan, masked_mse, pretrain,
                             resolve_decoder_layers, target_patches)

CFG = ModelConfig()
TARGET = ModalityKind.CONSTELLATION


def loss_map(values, dtype=np.float64):
    return {m: ad.tensor(v, dtype=dtype) for m, v in zip(MODALITIES, values)}


class TestMaskedMse:
    def test_perfect_prediction_zero(self):
        pred = ad.tensor(np.random.default_rng(0).normal(size=(16, 192)))
        loss, empty = masked_mse(pred, pred.data.copy(), np.ones(16, dtype=bool))
        assert loss.item() == 0.0 and not empty

    def test_constant_residual_squared(self):
        target = np.zeros((16, 192), dtype=np.float32)
        pred = ad.tensor(np.full((16, 192), 0.5))
        mask = np.zeros(16, dtype=bool)
        mask[3] = True
        loss, _ = masked_mse(pred, target, mask)
        assert abs(loss.item() - 0.25) < 1e-7

    def test_unmasked_positions_ignored(self):
        rng = np.random.default_rng(1)
        target = rng.normal(size=(16, 192)).astype(np.float32)
        mask = np.zeros(16, dtype=bool)
        mask[[2, 7]] = True
        base = ad.tensor(target.copy())
        perturbed = target.copy()
        perturbed[~mask] += rng.normal(size=(14, 192)) * 100
        loss1, _ = masked_mse(base, target, mask)
        loss2, _ = masked_mse(ad.tensor(perturbed), target, mask)
        assert loss1.item() == loss2.item() == 0.0

    def test_empty_mask_flagged_zero(self):
        pred = ad.tensor(np.ones((16, 192)))
        loss, empty = masked_mse(pred, np.zeros((16, 192), dtype=np.float32),
                                 np.zeros(16, dtype=bool))
        assert empty and loss.item() == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            masked_mse(ad.tensor(np.ones((16, 192))), np.ones((16, 48), dtype=np.float32),
                       np.ones(16, dtype=bool))


class TestFipLoss:
    def test_worked_example_exact(self):
        losses = loss_map([2.0, 1.0, 3.0, 0.0])
        total = fip_loss(losses, FipConfig(w_target=1.0, w_other=0.5))
        assert total.item() == 4.0

    def test_w_other_zero_reduces_to_target(self):
        losses = loss_map([2.0, 1.0, 3.0, 5.0])
        total = fip_loss(losses, FipConfig(w_target=1.0, w_other=0.0))
        assert total.item() == 2.0

    def test_uniform_mode_unweighted_sum(self):
        losses = loss_map([2.0, 1.0, 3.0, 0.25])
        total = fip_loss(losses, FipConfig(mode="uniform"))
        assert total.item() == 6.25

    def test_missing_target_rejected(self):
        losses = loss_map([1.0, 2.0, 3.0, 4.0])
        del losses[TARGET]
        with pytest.raises(ValueError):
            fip_loss(losses, FipConfig())

    def test_scaling_all_weights_scales_loss_and_gradient(self):
        rng = np.random.default_rng(2)
        pred = ad.tensor(rng.normal(size=(16, 192)), requires_grad=True, dtype=np.float64)
        target = rng.normal(size=(16, 192)).astype(np.float64)
        mask = np.zeros(16, dtype=bool)
        mask[:8] = True

        def total_with(scale):
            loss, _ = masked_mse(pred, target, mask)
            cfg = FipConfig()
            losses = {TARGET: loss}
            for m in MODALITIES:
                if m is not TARGET:
                    l2, _ = masked_mse(pred, target, mask)
                    losses[m] = l2
            return ad.scale(fip_loss(losses, cfg), scale)

        lam = 3.5
        pred.grad = None
        base = total_with(1.0)
        ad.backward(base)
        g1 = pred.grad.copy()
        pred.grad = None
        scaled = total_with(lam)
        ad.backward(scaled)
        assert abs(scaled.item() - lam * base.item()) < 1e-12
        np.testing.assert_allclose(pred.grad, lam * g1, rtol=1e-12)


class TestFipConfig:
    def test_fip_mode_requires_asymmetry(self):
        with pytest.raises(ValueError):
            FipConfig(p_target=0.5, p_other=0.6)
        with pytest.raises(ValueError):
            FipConfig(w_target=0.5, w_other=0.5)

    def test_uniform_mode_equal_ratios_weights(self):
        cfg = FipConfig(mode="uniform", p_mask=0.75)
        assert {cfg.ratio(m) for m in MODALITIES} == {0.75}
        assert {cfg.weight(m) for m in MODALITIES} == {1.0}

    def test_resolve_decoder_layers_uniform_flattens(self):
        model = resolve_decoder_layers(CFG, FipConfig(mode="uniform"))
        assert set(model.decoder_layers.values()) == {2}
        model2 = resolve_decoder_layers(model, FipConfig(mode="fip"), target_depth=4)
        assert model2.decoder_layers[TARGET] == 4

    def test_json_roundtrip(self):
        cfg = FipConfig(mode="uniform", p_mask=0.6)
        assert FipConfig.from_json_dict(cfg.to_json_dict()) == cfg


class TestMakeMaskPlan:
    def test_fip_default_counts_16_patches(self):
        plan = make_mask_plan(FipConfig(), CFG, np.random.default_rng(3))
        counts = plan.masked_count
        assert counts[TARGET] == 13
        assert all(counts[m] == 10 for m in MODALITIES if m is not TARGET)

    def test_paper_scale_counts_196_patches(self):
        cfg196 = ModelConfig(image_size=112, patch_size=8)
        assert cfg196.n_patches == 196
        plan = make_mask_plan(FipConfig(), cfg196, np.random.default_rng(4))
        assert plan.masked_count[TARGET] == 157
        assert all(plan.masked_count[m] == 118 for m in MODALITIES if m is not TARGET)

    def test_uniform_mode_equal_counts(self):
        plan = make_mask_plan(FipConfig(mode="uniform", p_mask=0.75), CFG,
                              np.random.default_rng(5))
        assert set(plan.masked_count.values()) == {12}

    @given(n_side=st.integers(3, 14), seed=st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_fip_mode_target_strictly_more_masked(self, n_side, seed):
        cfg = ModelConfig(image_size=8 * n_side, patch_size=8)
        assert cfg.n_patches >= 9
        plan = make_mask_plan(FipConfig(), cfg, np.random.default_rng(seed))
        others = [plan.masked_count[m] for m in MODALITIES if m is not TARGET]
        assert all(plan.masked_count[TARGET] > c for c in others)


class TestLrSchedule:
    def test_endpoints(self):
        state = TrainState(base_lr=1e-3, warmup_steps=10, total_steps=100)
        assert lr_schedule(0, state) == 0.0
        assert lr_schedule(10, state) == 1e-3
        assert abs(lr_schedule(100, state)) < 1e-9

    def test_monotone_warmup_then_decay(self):
        state = TrainState(base_lr=1e-3, warmup_steps=10, total_steps=100)
        lrs = [lr_schedule(s, state) for s in range(101)]
        assert all(b >= a for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(b <= a for a, b in zip(lrs[10:100], lrs[11:101]))


class TestAdamW:
    def _one_param(self, value, seed=0):
        cfg = ModelConfig()
        params = ModelParams.init(cfg, np.random.default_rng(seed))
        return params

    def test_zero_grad_zero_decay_unchanged(self):
        params = self._one_param(0)
        state = TrainState.new(params, 1e-3, 100, 0, weight_decay=0.0)
        before = {n: t.data.copy() for n, t in params.items()}
        adamw_step(params, state, lr=1e-3)
        for n, t in params.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_single_step_magnitude_approx_lr(self):
        # scalar parameter with constant gradient g: first update magnitude
        # = lr * ghat / (sqrt(vhat) + eps) with ghat=g, vhat=g^2 -> ~= lr
        params = self._one_param(1)
        name = params.names()[0]
        state = TrainState.new(params, 1e-2, 100, 0, weight_decay=0.0)
        g = 0.37
        for n, t in params.items():
            t.grad = np.full_like(t.data, g if n == name else 0.0)
        before = params[name].data.copy()
        adamw_step(params, state, lr=1e-2)
        delta = before - params[name].data
        expected = 1e-2 * g / (abs(g) + state.eps)
        np.testing.assert_allclose(delta, expected, rtol=1e-5)

    def test_nan_gradient_aborts_naming_parameter(self):
        params = self._one_param(2)
        state = TrainState.new(params, 1e-3, 100, 0)
        bad = "encoder.1.mlp.w1"
        before = {n: t.data.copy() for n, t in params.items()}
        params[bad].grad = np.full_like(params[bad].data, np.nan)
        with pytest.raises(FloatingPointError, match=bad):
            adamw_step(params, state, lr=1e-3)
        for n, t in params.items():  # aborted before touching anything
            np.testing.assert_array_equal(t.data, before[n])

    def test_bit_identical_trajectories(self):
        def run():
            params = self._one_param(3)
            state = TrainState.new(params, 1e-3, 50, 7)
            rng = np.random.default_rng(99)
            for _ in range(5):
                for n, t in params.items():
                    t.grad = rng.normal(size=t.data.shape).astype(np.float32)
                adamw_step(params, state)
            return np.concatenate([t.data.ravel() for t in params.tensors.values()])
        np.testing.assert_array_equal(run(), run())


class TestGradientFlowIsolation:
    def test_w_other_zero_isolates_decoders(self, desk_samples):
        params = ModelParams.init(CFG, np.random.default_rng(4))
        cfg = FipConfig(w_other=0.0)
        plan = make_mask_plan(cfg, CFG, np.random.default_rng(5))
        sample = desk_samples[0]
        params.zero_grad()
        preds = forward_pretrain(sample, plan, params)
        losses = {}
        for m, pred in preds.items():
            loss, _ = masked_mse(pred, target_patches(sample, m, CFG, None), plan.masks[m])
            losses[m] = loss
        ad.backward(fip_loss(losses, cfg))
        for n, t in params.items():
            if n.startswith("decoder.") and not n.startswith("decoder.constellation"):
                assert t.grad is None or not np.any(t.grad), n
        enc_norm = sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                       for n, t in params.items()
                       if n.startswith("encoder.") and t.grad is not None) ** 0.5
        assert enc_norm > 0


class TestPretrainLoop:
    def test_log_recombination_and_mask_contract(self, desk_samples):
        params = ModelParams.init(CFG, np.random.default_rng(6))
        fip = FipConfig()
        res = pretrain(desk_samples, params, fip, epochs=2, batch_size=4, seed=3)
        assert len(res.log.steps) == 4
        for rec in res.log.steps:
            recombined = sum(fip.weight(m) * rec["losses"][m.value] for m in MODALITIES)
            assert abs(rec["total"] - recombined) < 1e-6

    def test_uniform_vs_fip_mask_counts(self):
        fip = FipConfig()
        uni = FipConfig(mode="uniform", p_mask=0.75)
        plan_f = make_mask_plan(fip, CFG, np.random.default_rng(11))
        plan_u = make_mask_plan(uni, CFG, np.random.default_rng(11))
        assert plan_f.masked_count[TARGET] == 13
        assert len(set(plan_u.masked_count.values())) == 1

    def test_loss_decreases_on_tiny_overfit(self, desk_samples):
        params = ModelParams.init(CFG, np.random.default_rng(7))
        res = pretrain(desk_samples[:1], params, FipConfig(), epochs=60,
                       batch_size=1, seed=5, base_lr=1e-3)
        first = res.log.steps[0]["total"]
        last = res.log.steps[-1]["total"]
        assert last < 0.5 * first

    def test_empty_dataset_rejected(self):
        params = ModelParams.init(CFG, np.random.default_rng(8))
        with pytest.raises(ValueError):
            pretrain([], params, FipConfig(), epochs=1, batch_size=4, seed=0)

    def test_trainlog_csv_format(self, tmp_path, desk_samples):
        params = ModelParams.init(CFG, np.random.default_rng(9))
        res = pretrain(desk_samples[:4], params, FipConfig(), epochs=1, batch_size=2, seed=1)
        path = tmp_path / "log.csv"
        res.log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,lr,total,loss_constellation,loss_scalogram,loss_raw,loss_noise"
        assert len(lines) == 1 + len(res.log.steps)
