"""Alignment mathematics: densities, ratios, KL, reward normalization,
the trajectory pool contract, and the 1-D toy improvement run."""

import math

import numpy as np
import pytest

from evdiff.align import (
    AlignConfig,
    RewardRecord,
    TrajectoryPool,
    _policy_gradient_update,
    importance_term,
    kl_regularizer,
    normalize_rewards,
    reward,
    run_alignment,
    step_log_density,
)
from evdiff.diffusion import Adam, make_schedule
from evdiff.errors import ParameterError, PoolTimeoutError, StalenessError
from evdiff.metrics import RandomFeatureEmbedder
from evdiff.net import ArchDescriptor, ConvDenoiser
from evdiff.rng import SeededRandomSource
from evdiff.sampler import SamplerConfig, Trajectory, sample

EMPTY_PROMPT = np.zeros((0, 1, 1, 1), np.float32)


class TestStepLogDensity:
    def test_at_mean_unit_sigma(self):
        v = step_log_density(np.array([0.5]), np.array([0.5]), 1.0)
        assert abs(v - (-0.9189385332046727)) < 1e-9

    def test_one_sigma_away(self):
        v = step_log_density(np.array([1.5]), np.array([0.5]), 1.0)
        assert abs(v - (-1.4189385332046727)) < 1e-9

    def test_symmetry(self):
        mu = np.array([0.2])
        d = 0.7
        assert step_log_density(mu + d, mu, 0.5) == step_log_density(mu - d, mu, 0.5)

    def test_sums_over_elements(self):
        x = np.zeros((2, 3))
        assert step_log_density(x, x, 1.0) == pytest.approx(-6 * 0.9189385332046727)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ParameterError):
            step_log_density(np.zeros(1), np.zeros(1), 0.0)


def toy_schedule(steps=8):
    return make_schedule(steps=steps, sigma_min=0.05, sigma_max=2.0, sigma_data=0.5)


def toy_model(seed=1):
    desc = ArchDescriptor(frames=1, prompt_frames=0, bins=1, hidden=4, kernel=1,
                          init_seed=seed)
    return ConvDenoiser(desc, sigma_data=0.5)


def toy_trajectory(model, schedule, seed=0, stamp=0, reward_value=None):
    cfg = SamplerConfig(total_frames=1, prompt_frames=0,
                        switch_step=schedule.steps + 1, seed=seed,
                        renoise=True, record=True)
    _, traj = sample(EMPTY_PROMPT, model, schedule, cfg)
    traj.stamp = stamp
    x_o = float(traj.output.ravel()[0])
    raw = reward_value if reward_value is not None else -(x_o - 1.0) ** 2
    traj.reward = RewardRecord(0.0, 0.0, raw=raw, sample_std=float(np.std(traj.output)))
    return traj


class TestImportanceTerm:
    def test_identity_at_reference(self):
        model = toy_model()
        sched = toy_schedule()
        traj = toy_trajectory(model, sched, seed=3)
        r, clipped, active = importance_term(traj, model, kappa=0.2)
        assert r == 1.0
        assert np.all(clipped == 1.0)
        assert active.all()

    def test_clip_bounds(self):
        # A shifted policy saturates every per-step ratio at the bounds.
        sched = toy_schedule()
        ref = toy_model(seed=1)
        traj = toy_trajectory(ref, sched, seed=5)
        shifted = toy_model(seed=2)
        shifted.load_vector(ref.param_vector() + 0.5)
        r, clipped, _ = importance_term(traj, shifted, kappa=0.2)
        assert np.all((clipped >= 0.8) & (clipped <= 1.2))
        assert 0.8 ** len(clipped) - 1e-12 <= r <= 1.2 ** len(clipped) + 1e-12

    def test_single_step_hand_ratio(self):
        # One scored step, scalar state: ratio is the Gaussian pdf ratio.
        x_t = np.zeros((1, 1, 1, 1), np.float32)
        x_next = np.full((1, 1, 1, 1), 0.3, np.float32)
        mu_ref = np.full((1, 1, 1, 1), 0.1, np.float32)
        sigma_step = 0.5

        class FixedMean:
            def __init__(self, value):
                self.value = value

            def predict_clean(self, x, sigma, prompt):
                return np.full_like(x, self.value)

        traj = Trajectory(
            latents=[x_t], ref_means=[mu_ref], next_latents=[x_next],
            sigma_t=np.array([1.0]), sigma_prev=np.array([0.5]),
            sigma_step=np.array([sigma_step]), output=x_next,
            prompt=EMPTY_PROMPT, replaced=np.array([False]),
        )
        mu_cur = 0.25
        r, _, _ = importance_term(traj, FixedMean(mu_cur), kappa=0.9)
        lp_cur = -0.5 * ((0.3 - mu_cur) / sigma_step) ** 2 - math.log(
            sigma_step * math.sqrt(2 * math.pi)
        )
        lp_ref = -0.5 * ((0.3 - np.float32(0.1)) / sigma_step) ** 2 - math.log(
            sigma_step * math.sqrt(2 * math.pi)
        )
        assert r == pytest.approx(math.exp(lp_cur - lp_ref), rel=1e-5)

    def test_stale_stamp_rejected(self):
        model = toy_model()
        sched = toy_schedule()
        traj = toy_trajectory(model, sched, stamp=3)
        with pytest.raises(StalenessError):
            importance_term(traj, model, pool_stamp=4)


class TestKlRegularizer:
    def test_zero_at_reference(self):
        model = toy_model()
        sched = toy_schedule()
        traj = toy_trajectory(model, sched, seed=11)
        assert kl_regularizer(traj, model) == 0.0

    def test_scalar_hand_value(self):
        x_t = np.zeros((1, 1, 1, 1), np.float32)
        traj = Trajectory(
            latents=[x_t], ref_means=[np.zeros_like(x_t)], next_latents=[x_t],
            sigma_t=np.array([1.0]), sigma_prev=np.array([0.5]),
            sigma_step=np.array([1.0]), output=x_t,
            prompt=EMPTY_PROMPT, replaced=np.array([False]),
        )

        class PlusOne:
            def predict_clean(self, x, sigma, prompt):
                return np.ones_like(x)

        assert kl_regularizer(traj, PlusOne()) == pytest.approx(0.5)

    def test_nonnegative(self):
        sched = toy_schedule()
        ref = toy_model(seed=1)
        other = toy_model(seed=9)
        traj = toy_trajectory(ref, sched, seed=2)
        assert kl_regularizer(traj, other) >= 0.0


class TestReward:
    def test_perfect_sample_against_identical_batch(self):
        gen = np.random.default_rng(1)
        clip = gen.standard_normal((3, 2, 16, 16)).astype(np.float32) * 0.4
        emb = RandomFeatureEmbedder(bins=2)
        rec = reward(clip, clip, [clip.copy() for _ in range(4)], emb)
        assert rec.ssim_term == pytest.approx(1.0, abs=1e-9)
        assert abs(rec.distance_term) < 1e-6
        assert rec.raw == pytest.approx(1.0, abs=1e-5)

    def test_composition_with_weight_two(self):
        gen = np.random.default_rng(2)
        a = np.abs(gen.standard_normal((2, 1, 16, 16))).astype(np.float32) * 0.3
        b = np.abs(gen.standard_normal((2, 1, 16, 16))).astype(np.float32) * 0.3
        emb = RandomFeatureEmbedder(bins=1)
        rec = reward(a, b, [b], emb, distance_weight=2.0)
        from evdiff.metrics import feature_video_distance, ssim
        from evdiff.voxel import to_unit_images

        expect_ssim = ssim(to_unit_images(a), to_unit_images(b))
        expect_dist = feature_video_distance([a], [b], emb)
        assert rec.raw == pytest.approx(expect_ssim - 2.0 * expect_dist, rel=1e-9)

    def test_mixed_metric_option_subtracts_pixel_term(self):
        gen = np.random.default_rng(3)
        a = np.abs(gen.standard_normal((2, 1, 16, 16))).astype(np.float32) * 0.3
        b = np.abs(gen.standard_normal((2, 1, 16, 16))).astype(np.float32) * 0.3
        emb = RandomFeatureEmbedder(bins=1)
        plain = reward(a, b, [b], emb)
        mixed = reward(a, b, [b], emb, mse_weight=5.0)
        from evdiff.voxel import to_unit_images

        pixel = float(np.mean((to_unit_images(a) - to_unit_images(b)) ** 2))
        assert mixed.raw == pytest.approx(plain.raw - 5.0 * pixel, rel=1e-9)


class TestNormalizeRewards:
    def records(self, raws, stds=None):
        stds = stds or [0.0] * len(raws)
        return [RewardRecord(0, 0, raw=r, sample_std=s) for r, s in zip(raws, stds)]

    def test_population_standardization(self):
        recs = normalize_rewards(self.records([1.0, 2.0, 3.0]), beta=30.0)
        got = [r.standardized for r in recs]
        assert got[1] == 0.0
        assert got[0] == pytest.approx(-1.224744871, rel=1e-9)
        assert got[2] == pytest.approx(+1.224744871, rel=1e-9)
        assert np.mean(got) == pytest.approx(0.0, abs=1e-12)
        assert np.var(got) == pytest.approx(1.0, rel=1e-12)

    def test_equal_stds_no_adjustment(self):
        recs = normalize_rewards(self.records([1, 2, 3], [0.2, 0.2, 0.2]), beta=30.0)
        for r in recs:
            assert r.adjusted == r.standardized

    def test_beta_hand_value(self):
        recs = normalize_rewards(self.records([1, 2], [0.1, 0.2]), beta=30.0)
        assert recs[1].adjusted - recs[1].standardized == pytest.approx(3.0)

    def test_degenerate_batches_zero(self):
        recs = normalize_rewards(self.records([5.0]), beta=30.0)
        assert recs[0].standardized == 0.0
        recs = normalize_rewards(self.records([2.0, 2.0, 2.0]), beta=30.0)
        assert all(r.standardized == 0.0 for r in recs)


class TestStationarity:
    def test_zero_gradient_at_indifference(self):
        # Equal rewards standardize to zero; at theta == theta' the KL
        # gradient vanishes too, so parameters stay bit-identical.
        model = toy_model()
        sched = toy_schedule()
        batch = [
            toy_trajectory(model, sched, seed=i, reward_value=0.7) for i in range(4)
        ]
        before = model.param_vector().copy()
        cfg = AlignConfig(pool_size=8, batch=4, kl_weight=0.1, kappa=0.2,
                          iters_per_refresh=1, refreshes=1)
        _policy_gradient_update(batch, model, model, Adam(lr=1e-2), cfg)
        assert not model.grad_vector().any()
        assert np.array_equal(model.param_vector(), before)


class TestPolicyGradientAgainstFiniteDifferences:
    def test_update_gradient_matches_numeric_loss(self):
        # Full objective: -mean(r * reward) + kl_weight * mean(KL), with the
        # trajectories recorded under a slightly different reference, so
        # per-step ratios sit strictly inside the clip region.
        sched = toy_schedule(steps=5)
        ref = toy_model(seed=4)
        model = toy_model(seed=4).copy(dtype=np.float64)  # f64 for clean FD
        model.load_vector(ref.param_vector().astype(np.float64) + 0.01)
        cfg = AlignConfig(pool_size=8, batch=3, kappa=0.5, kl_weight=0.1,
                          iters_per_refresh=1, refreshes=1)
        batch = [toy_trajectory(ref, sched, seed=i, stamp=0) for i in range(3)]
        records = normalize_rewards([t.reward for t in batch], beta=cfg.beta)
        scores = [r.adjusted for r in records]
        for traj in batch:
            _, _, active = importance_term(traj, model, cfg.kappa)
            assert active.all()  # precondition: differentiable everywhere

        def loss_at(vec):
            model.load_vector(vec)
            total = 0.0
            for traj, score in zip(batch, scores):
                r, _, _ = importance_term(traj, model, cfg.kappa)
                total -= r * score / len(batch)
                total += cfg.kl_weight * kl_regularizer(traj, model) / len(batch)
            return total

        base = model.param_vector().copy()
        model.load_vector(base)
        _policy_gradient_update(batch, model, ref, Adam(lr=0.0), cfg)
        analytic = model.grad_vector().copy()
        gen = np.random.default_rng(0)
        idx = gen.choice(base.size, size=25, replace=False)
        h = 1e-5
        for i in idx:
            up, down = base.copy(), base.copy()
            up[i] += h
            down[i] -= h
            numeric = (loss_at(up) - loss_at(down)) / (2 * h)
            assert abs(analytic[i] - numeric) / max(1.0, abs(numeric)) < 1e-4
        model.load_vector(base)


class TestTrajectoryPool:
    def test_put_draw_and_stale_drop(self):
        model = toy_model()
        sched = toy_schedule()
        pool = TrajectoryPool(capacity=4, timeout_s=0.2)
        assert pool.put(toy_trajectory(model, sched, seed=0, stamp=0))
        assert not pool.put(toy_trajectory(model, sched, seed=1, stamp=5))
        assert len(pool) == 1

    def test_draw_timeout(self):
        pool = TrajectoryPool(capacity=4, timeout_s=0.05)
        gen = np.random.default_rng(0)
        with pytest.raises(PoolTimeoutError):
            pool.draw(2, gen)

    def test_invalidate_clears_and_bumps_stamp(self):
        model = toy_model()
        sched = toy_schedule()
        pool = TrajectoryPool(capacity=4, timeout_s=0.2)
        pool.put(toy_trajectory(model, sched, seed=0, stamp=0))
        assert pool.invalidate() == 1
        assert len(pool) == 0
        assert pool.put(toy_trajectory(model, sched, seed=1, stamp=1))


def make_toy_factory(sched, seed0):
    def make_trajectory(ref_model, stamp, worker, index):
        seed = (seed0 + stamp * 100_003 + worker * 7919 + index * 13) & 0x7FFFFFFF
        return toy_trajectory(ref_model, sched, seed=seed, stamp=stamp)

    return make_trajectory


def eval_toy(model, sched, n=60, seed0=990_000):
    outs = []
    for i in range(n):
        cfg = SamplerConfig(total_frames=1, prompt_frames=0,
                            switch_step=sched.steps + 1, seed=seed0 + i, renoise=True)
        outs.append(float(sample(EMPTY_PROMPT, model, sched, cfg).ravel()[0]))
    outs = np.asarray(outs)
    return float(outs.mean()), float(np.mean(-((outs - 1.0) ** 2)))


class TestToyAlignment:
    def test_reward_improves_and_kl_bounded(self):
        sched = toy_schedule()
        model = toy_model(seed=1)
        ref = model.copy()
        _, reward_before = eval_toy(model, sched)
        cfg = AlignConfig(pool_size=48, workers=1, iters_per_refresh=4, refreshes=12,
                          batch=24, kappa=0.2, kl_weight=0.1, beta=30.0,
                          kl_ceiling=5.0, seed=7, deterministic=True)
        hist = run_alignment(model, ref, make_toy_factory(sched, 4000), Adam(lr=3e-3), cfg)
        mean_after, reward_after = eval_toy(model, sched)
        assert reward_after > reward_before
        assert all(h["kl"] <= 5.0 for h in hist)

    def test_deterministic_mode_reproducible(self):
        def run():
            sched = toy_schedule()
            model = toy_model(seed=2)
            ref = model.copy()
            cfg = AlignConfig(pool_size=16, workers=2, iters_per_refresh=2,
                              refreshes=3, batch=8, seed=11, deterministic=True)
            run_alignment(model, ref, make_toy_factory(sched, 800), Adam(lr=1e-3), cfg)
            return model.param_vector()

        assert np.array_equal(run(), run())

    def test_threaded_producers_smoke(self):
        sched = toy_schedule()
        model = toy_model(seed=3)
        ref = model.copy()
        cfg = AlignConfig(pool_size=16, workers=2, iters_per_refresh=2, refreshes=2,
                          batch=8, seed=13, deterministic=False, timeout_s=30.0)
        hist = run_alignment(model, ref, make_toy_factory(sched, 900), Adam(lr=1e-3), cfg)
        assert len(hist) == 2
        assert np.all(np.isfinite(model.param_vector()))
