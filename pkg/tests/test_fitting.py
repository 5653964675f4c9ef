"""Loss terms, analytic gradients, clipping, scheduling, and fitting."""

import numpy as np
import pytest

from smoedenoise import (FitConfig, FitDivergenceError, FitState, Patch, SampleGrid,
                         clip_gradients, composite_loss, fit_patch, loss_gradient,
                         scheduler_step, ssim_block)
from smoedenoise.fitting import SSIM_C1, fit_patch_batch
from smoedenoise.smoe import decode, init_model
from helpers import finite_diff_gradient, random_model


GRID8 = SampleGrid(8)


def step_edge(low=0.2, high=0.8, k=8):
    values = np.full((k, k), low)
    values[:, k // 2:] = high
    return Patch((0, 0), values)


class TestSsimBlock:
    def test_self_similarity(self):
        rng = np.random.default_rng(20)
        patch = rng.uniform(0, 1, (8, 8))
        assert ssim_block(patch, patch) == 1.0

    def test_constant_zero_vs_one(self):
        a = np.zeros((8, 8))
        b = np.ones((8, 8))
        expected = SSIM_C1 / (1.0 + SSIM_C1)
        np.testing.assert_allclose(ssim_block(a, b), expected, rtol=1e-12)

    def test_luminance_penalty_grows_with_offset(self):
        rng = np.random.default_rng(21)
        a = rng.uniform(0.2, 0.6, (8, 8))
        s1 = ssim_block(a, a + 0.01)
        s2 = ssim_block(a, a + 0.05)
        assert s2 < s1 < 1.0

    def test_range(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            a = rng.uniform(0, 1, (8, 8))
            b = rng.uniform(0, 1, (8, 8))
            assert -1.0 <= ssim_block(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            ssim_block(np.zeros((4, 4)), np.zeros((8, 8)))


class TestCompositeLoss:
    def test_zero_at_perfect_prediction(self):
        rng = np.random.default_rng(23)
        patch = rng.uniform(0, 1, (8, 8))
        assert composite_loss(patch, patch, FitConfig()) == 0.0

    def test_mse_isolation(self):
        rng = np.random.default_rng(24)
        pred = rng.uniform(0, 1, (8, 8))
        target = rng.uniform(0, 1, (8, 8))
        cfg = FitConfig(lambda_mse=0.7, lambda_ssim=0.0)
        expected = 0.7 * np.mean((pred - target) ** 2)
        assert abs(composite_loss(pred, target, cfg) - expected) <= 1e-12

    def test_ssim_isolation(self):
        rng = np.random.default_rng(25)
        pred = rng.uniform(0, 1, (8, 8))
        target = rng.uniform(0, 1, (8, 8))
        cfg = FitConfig(lambda_mse=0.0, lambda_ssim=1.0)
        expected = 1.0 - ssim_block(pred, target)
        assert abs(composite_loss(pred, target, cfg) - expected) <= 1e-12

    def test_constant_pair_closed_form(self):
        pred = np.full((8, 8), 0.4)
        target = np.full((8, 8), 0.6)
        cfg = FitConfig()
        expected = 0.5 * 0.04 + 0.5 * (1.0 - ssim_block(pred, target))
        np.testing.assert_allclose(composite_loss(pred, target, cfg), expected, rtol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(26)
        cfg = FitConfig()
        for _ in range(100):
            pred = rng.uniform(-0.2, 1.2, (8, 8))
            target = rng.uniform(0, 1, (8, 8))
            assert composite_loss(pred, target, cfg) >= 0.0


class TestLossGradient:
    def test_zero_at_exact_fit(self):
        patch = Patch((0, 0), np.full((8, 8), 0.37))
        model = init_model(patch, 4)   # decodes exactly to the constant
        grad = loss_gradient(model, patch, GRID8, FitConfig())
        assert np.linalg.norm(grad) <= 1e-9

    def test_single_kernel_weight_derivative(self):
        target = np.full((8, 8), 0.3)
        model = init_model(Patch((0, 0), np.full((8, 8), 0.9)), 1)
        cfg = FitConfig(lambda_mse=0.8, lambda_ssim=0.0)
        grad = loss_gradient(model, target, GRID8, cfg)
        # prediction is constant w, so dL/dw = 2 * lambda_mse * (w - c)
        np.testing.assert_allclose(grad[5], 0.8 * 2.0 * (0.9 - 0.3), rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(27)
        cfg = FitConfig()
        for trial in range(20):
            n_kernels = [1, 2, 4][trial % 3]
            model = random_model(rng, n_kernels)
            target = rng.uniform(0, 1, (8, 8))
            analytic = loss_gradient(model, target, GRID8, cfg)
            numeric = finite_diff_gradient(model, target, GRID8, cfg)
            err = np.abs(analytic - numeric)
            tol = np.maximum(1e-6, 1e-4 * np.abs(numeric))
            assert np.all(err <= tol), f"trial {trial}: max err {err.max():.3e}"

    def test_matches_finite_differences_on_constant_target(self):
        # zero target variance exercises the SSIM denominator edge
        rng = np.random.default_rng(35)
        cfg = FitConfig()
        model = random_model(rng, 4)
        target = np.full((8, 8), 0.5)
        analytic = loss_gradient(model, target, GRID8, cfg)
        numeric = finite_diff_gradient(model, target, GRID8, cfg)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


class TestClipGradients:
    def test_halves_when_double_the_norm(self):
        g = np.array([3.0, 4.0])        # norm 5
        out = clip_gradients(g, 2.5)
        np.testing.assert_allclose(out, [1.5, 2.0], rtol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(out), 2.5, rtol=1e-15)

    def test_unchanged_below_threshold(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip_gradients(g, 1.0), g)

    def test_zero_vector(self):
        g = np.zeros(7)
        np.testing.assert_array_equal(clip_gradients(g, 1.0), g)

    def test_idempotent(self):
        rng = np.random.default_rng(28)
        g = rng.normal(0, 10, 28)
        once = clip_gradients(g, 1.0)
        twice = clip_gradients(once, 1.0)
        np.testing.assert_allclose(twice, once, rtol=1e-12)

    def test_invalid_norm(self):
        with pytest.raises(ValueError):
            clip_gradients(np.ones(3), 0.0)


class TestScheduler:
    def test_decreasing_losses_keep_lr(self):
        cfg = FitConfig()
        state = FitState(lr=cfg.lr0)
        for i in range(100):
            lr = scheduler_step(state, 1.0 - 0.01 * i, cfg)
        assert lr == cfg.lr0

    def test_plateau_cuts_lr_after_patience(self):
        cfg = FitConfig(plateau_patience=5, plateau_factor=0.5)
        state = FitState(lr=cfg.lr0)
        scheduler_step(state, 1.0, cfg)          # establishes the best loss
        for i in range(4):
            assert scheduler_step(state, 1.0, cfg) == cfg.lr0
        assert scheduler_step(state, 1.0, cfg) == cfg.lr0 * 0.5

    def test_repeated_plateaus_floor_at_min_lr(self):
        cfg = FitConfig(plateau_patience=2, plateau_factor=0.1, min_lr=1e-5)
        state = FitState(lr=cfg.lr0)
        for _ in range(100):
            lr = scheduler_step(state, 1.0, cfg)
        assert lr == cfg.min_lr

    def test_improvement_resets_counters(self):
        cfg = FitConfig(plateau_patience=3)
        state = FitState(lr=cfg.lr0)
        scheduler_step(state, 1.0, cfg)
        scheduler_step(state, 1.0, cfg)
        scheduler_step(state, 1.0, cfg)
        scheduler_step(state, 0.5, cfg)          # improvement
        assert state.num_bad == 0 and state.num_stale == 0


class TestFitPatch:
    def test_constant_patch_reaches_tiny_mse(self):
        patch = Patch((0, 0), np.full((8, 8), 0.5))
        model, loss = fit_patch(patch, 4)
        values = decode(model, GRID8).values
        assert np.mean((values - 0.5) ** 2) <= 1e-6
        assert loss <= 1e-6

    def test_step_edge_reduces_loss_to_fifth(self):
        patch = step_edge()
        cfg = FitConfig()
        init_loss = composite_loss(decode(init_model(patch, 4), GRID8), patch, cfg)
        _, final_loss = fit_patch(patch, 4, cfg)
        assert final_loss <= 0.2 * init_loss

    def test_zero_budget_returns_init(self):
        rng = np.random.default_rng(29)
        patch = Patch((0, 0), rng.uniform(0, 1, (8, 8)))
        model, loss = fit_patch(patch, 4, FitConfig(max_iters=0))
        np.testing.assert_array_equal(model.to_params(), init_model(patch, 4).to_params())
        assert loss == composite_loss(decode(model, GRID8), patch, FitConfig())

    def test_deterministic(self):
        rng = np.random.default_rng(30)
        patch = Patch((0, 0), rng.uniform(0, 1, (8, 8)))
        cfg = FitConfig(max_iters=80)
        m1, l1 = fit_patch(patch, 4, cfg, seed=7)
        m2, l2 = fit_patch(patch, 4, cfg, seed=7)
        np.testing.assert_array_equal(m1.to_params(), m2.to_params())
        assert l1 == l2

    def test_returned_loss_matches_model(self):
        rng = np.random.default_rng(31)
        patch = Patch((0, 0), rng.uniform(0, 1, (8, 8)))
        cfg = FitConfig(max_iters=60)
        model, loss = fit_patch(patch, 4, cfg)
        assert loss == composite_loss(decode(model, GRID8), patch, cfg)

    def test_returned_loss_is_best_seen(self):
        rng = np.random.default_rng(32)
        patch = Patch((0, 0), rng.uniform(0, 1, (8, 8)))
        trace = []
        _, loss = fit_patch(patch, 4, FitConfig(max_iters=120), trace=trace)
        traced = np.array([row[1] for row in trace])
        assert loss <= traced.min()
        best_so_far = np.minimum.accumulate(traced)
        assert np.all(np.diff(best_so_far) <= 0)

    def test_trace_rows_have_iter_loss_lr_gradnorm(self):
        patch = step_edge()
        trace = []
        fit_patch(patch, 4, FitConfig(max_iters=10, early_stop_tol=0.0), trace=trace)
        assert len(trace) == 10
        iters, losses, lrs, norms = zip(*trace)
        assert list(iters) == list(range(10))
        assert all(lr > 0 for lr in lrs)
        assert all(n >= 0 for n in norms)

    def test_divergent_lr_raises_with_iteration(self):
        patch = step_edge()
        cfg = FitConfig(lr0=1e30, min_lr=1e20, max_iters=50)
        with pytest.raises(FitDivergenceError) as err:
            fit_patch(patch, 4, cfg)
        assert err.value.iteration is not None and err.value.iteration >= 1

    def test_early_stop_zero_tol_disables(self):
        patch = Patch((0, 0), np.full((8, 8), 0.5))
        trace = []
        fit_patch(patch, 4, FitConfig(max_iters=100, early_stop_tol=0.0), trace=trace)
        assert len(trace) == 100
        trace_stop = []
        fit_patch(patch, 4, FitConfig(max_iters=100), trace=trace_stop)
        assert len(trace_stop) < 100

    def test_batch_matches_solo_bitwise(self):
        rng = np.random.default_rng(33)
        targets = rng.uniform(0, 1, (6, 8, 8))
        cfg = FitConfig(max_iters=50)
        batch = fit_patch_batch(targets, 4, cfg)
        for i in range(targets.shape[0]):
            model, loss = fit_patch(Patch((0, 0), targets[i]), 4, cfg)
            np.testing.assert_array_equal(batch.params[i], model.to_params())
            assert batch.losses[i] == loss


class TestFitConfigValidation:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            FitConfig(lambda_mse=-0.1)

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            FitConfig(lambda_mse=0.0, lambda_ssim=0.0)

    def test_bad_plateau_factor(self):
        with pytest.raises(ValueError):
            FitConfig(plateau_factor=1.0)

    def test_min_lr_above_lr0_rejected(self):
        with pytest.raises(ValueError):
            FitConfig(lr0=1e-3, min_lr=1e-2)

    def test_lr_stays_within_bounds_during_fit(self):
        rng = np.random.default_rng(34)
        patch = Patch((0, 0), rng.uniform(0, 1, (8, 8)))
        cfg = FitConfig(max_iters=200, plateau_patience=5, min_lr=1e-3)
        trace = []
        fit_patch(patch, 4, cfg, trace=trace)
        lrs = np.array([row[2] for row in trace])
        assert np.all(lrs <= cfg.lr0) and np.all(lrs >= cfg.min_lr)
