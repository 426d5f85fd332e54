"""Augmentation contracts: exact counts, disjointness, noise moments."""

import numpy as np
import pytest

from smdssl.augment import (
    AugmentConfig, SignalAugmentConfig, StaticAugmentConfig,
    StructuredAugmentConfig, augment_signal_pair, augment_static,
    augment_structured, make_view_pair, split_segments,
)
from smdssl.data import FeatureStats, Trajectory


def cfg_with(signal=None, structured=None, static=None):
    return AugmentConfig(
        signal=signal or SignalAugmentConfig(),
        structured=structured or StructuredAugmentConfig(),
        static=static or StaticAugmentConfig(),
    ).validate()


def identity_cfg():
    return cfg_with(
        signal=SignalAugmentConfig(mask_frac=0.0, noise_sd=0.0),
        structured=StructuredAugmentConfig(cutout_prob=0.0, noise_frac_of_sd=0.0),
        static=StaticAugmentConfig(dropout_frac=0.0, noise_frac_of_sd=0.0),
    )


class TestSignalPair:
    def test_240hz_raw_yields_two_2400_sample_views(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(1, 7200))  # 30 s at 240 Hz
        hat, tilde = augment_signal_pair(raw, cfg_with(), sample_rate=240.0, rng=rng)
        assert hat.shape == tilde.shape == (1, 2400)

    def test_identity_config_returns_disjoint_copies(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(2, 120))
        hat, tilde = augment_signal_pair(raw, identity_cfg(), sample_rate=4.0, rng=rng)
        np.testing.assert_array_equal(hat, raw[:, :40])
        np.testing.assert_array_equal(tilde, raw[:, 40:80])

    def test_exact_mask_count_before_noise(self):
        rng = np.random.default_rng(2)
        raw = np.abs(np.random.default_rng(0).normal(size=(1, 7200))) + 1.0  # no accidental zeros
        cfg = cfg_with(signal=SignalAugmentConfig(mask_frac=0.25, noise_sd=0.0))
        hat, tilde = augment_signal_pair(raw, cfg, sample_rate=240.0, rng=rng)
        assert (hat[0] == 0.0).sum() == 600
        assert (tilde[0] == 0.0).sum() == 600

    def test_mask_count_per_channel(self):
        rng = np.random.default_rng(3)
        raw = np.ones((4, 7200))
        cfg = cfg_with(signal=SignalAugmentConfig(mask_frac=0.25, noise_sd=0.0))
        hat, _ = augment_signal_pair(raw, cfg, sample_rate=240.0, rng=rng)
        for c in range(4):
            assert (hat[c] == 0.0).sum() == 600

    def test_raw_too_short_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            augment_signal_pair(np.ones((1, 79)), cfg_with(), sample_rate=4.0, rng=rng)

    def test_random_segments_are_disjoint(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            a, b = split_segments(p_raw=120, p_view=40, random_segments=True, rng=rng)
            lo, hi = sorted((a, b))
            assert lo + 40 <= hi
            assert hi + 40 <= 120
        # deterministic placement is first/second segment
        assert split_segments(120, 40, False, rng) == (0, 40)

    def test_noise_moments(self):
        # >= 10^4 noise draws: mean within 0.01 of 0, sd within 0.01 of 0.25
        rng = np.random.default_rng(6)
        raw = np.zeros((1, 7200))
        cfg = cfg_with(signal=SignalAugmentConfig(mask_frac=0.0, noise_sd=0.25))
        samples = []
        for _ in range(5):
            hat, tilde = augment_signal_pair(raw, cfg, sample_rate=240.0, rng=rng)
            samples.extend([hat.ravel(), tilde.ravel()])
        noise = np.concatenate(samples)
        assert noise.size >= 10_000
        assert abs(noise.mean()) < 0.01
        assert abs(noise.std() - 0.25) < 0.01


class TestStructured:
    def test_identity_config_is_noop(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(8, 5))
        out = augment_structured(w, identity_cfg(), np.ones(5), np.zeros(5), rng)
        np.testing.assert_array_equal(out, w)

    def test_cutout_replaces_exactly_two_of_eight(self):
        rng = np.random.default_rng(1)
        cfg = cfg_with(structured=StructuredAugmentConfig(cutout_prob=1.0, noise_frac_of_sd=0.0))
        w = np.arange(8, dtype=float).reshape(8, 1) + 1.0
        out = augment_structured(w, cfg, np.ones(1), np.zeros(1), rng)
        assert (out != w).sum() <= 2  # a cut timestep takes an earlier value
        changed = np.flatnonzero(out[:, 0] != w[:, 0])
        assert changed.size in (1, 2)  # t=0 may take its own successor values
        # every replaced value is some earlier observed value (forward fill)
        for t in changed:
            assert out[t, 0] in w[:, 0]

    def test_cutout_count_statistics(self):
        rng = np.random.default_rng(2)
        cfg = cfg_with(structured=StructuredAugmentConfig(cutout_prob=1.0, noise_frac_of_sd=0.0))
        # distinct values so replacements are visible unless fill coincides
        per_run = []
        for _ in range(200):
            w = rng.normal(size=(8, 1))
            out = augment_structured(w, cfg, np.ones(1), np.zeros(1), rng)
            per_run.append((out[:, 0] != w[:, 0]).sum())
        assert max(per_run) == 2

    def test_leading_edge_cutout_takes_next_observed(self):
        cfg = cfg_with(structured=StructuredAugmentConfig(cutout_prob=1.0, cutout_frac=0.5, noise_frac_of_sd=0.0))
        w = np.array([[10.0], [20.0]])
        hits = {10.0: 0, 20.0: 0}
        for seed in range(50):
            rng = np.random.default_rng(seed)
            out = augment_structured(w, cfg, np.ones(1), np.zeros(1), rng)
            assert out[0, 0] in (10.0, 20.0)
            hits[out[0, 0]] += 1
        assert hits[20.0] > 0  # the t=0 cut imputed from its successor

    def test_all_timesteps_cut_fall_back_to_training_mean(self):
        cfg = cfg_with(structured=StructuredAugmentConfig(cutout_prob=1.0, cutout_frac=1.0, noise_frac_of_sd=0.0))
        rng = np.random.default_rng(3)
        w = np.full((4, 1), 9.0)
        out = augment_structured(w, cfg, np.ones(1), np.full(1, -2.5), rng)
        np.testing.assert_array_equal(out, np.full((4, 1), -2.5))

    def test_noise_scales_with_feature_sd(self):
        rng = np.random.default_rng(4)
        cfg = cfg_with(structured=StructuredAugmentConfig(cutout_prob=0.0, noise_frac_of_sd=0.10))
        w = np.zeros((2000, 2))
        sds = np.array([1.0, 10.0])
        out = augment_structured(w, cfg, sds, np.zeros(2), rng)
        assert abs(out[:, 0].std() - 0.1) < 0.02
        assert abs(out[:, 1].std() - 1.0) < 0.2


class TestStatic:
    def test_exact_dropout_count(self):
        rng = np.random.default_rng(0)
        cfg = cfg_with(static=StaticAugmentConfig(dropout_frac=0.25, noise_frac_of_sd=0.0))
        d = np.arange(8, dtype=float) + 100.0
        means = np.zeros(8)
        out = augment_static(d, cfg, np.ones(8), means, rng)
        assert (out == 0.0).sum() == 2  # floor(0.25 * 8)

    def test_dropped_features_equal_training_means_pre_noise(self):
        rng = np.random.default_rng(1)
        cfg = cfg_with(static=StaticAugmentConfig(dropout_frac=0.5, noise_frac_of_sd=0.0))
        d = np.full(6, 50.0)
        means = np.arange(6, dtype=float)
        out = augment_static(d, cfg, np.ones(6), means, rng)
        dropped = np.flatnonzero(out != 50.0)
        assert dropped.size == 3
        np.testing.assert_array_equal(out[dropped], means[dropped])

    def test_identity_config_is_noop(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=5)
        out = augment_static(d, identity_cfg(), np.ones(5), np.zeros(5), rng)
        np.testing.assert_array_equal(out, d)


def make_traj(T=8, C=1, p_raw=120, missing=None, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros(T, dtype=bool) if missing is None else np.asarray(missing, bool)
    signals = rng.normal(size=(T, C, p_raw))
    signals[mask] = 0.0
    return Trajectory(
        static=rng.normal(size=4), structured=rng.normal(size=(T, 3)),
        signals=signals, signal_missing=mask,
        patient_id="p0", block_id="p0:0", start_hour=0,
    )


def unit_feature_stats(L=4, M=3, C=1):
    return FeatureStats(np.zeros(L), np.ones(L), np.zeros(M), np.ones(M), np.zeros(C), np.ones(C))


class TestViewPair:
    def test_shapes_and_shared_mask(self):
        rng = np.random.default_rng(0)
        traj = make_traj(missing=[0, 0, 0, 1, 0, 0, 0, 0])
        pair = make_view_pair(traj, cfg_with(), unit_feature_stats(), sample_rate=4.0, rng=rng)
        assert pair.signals_hat.shape == pair.signals_tilde.shape == (8, 1, 40)
        assert pair.structured_hat.shape == traj.structured.shape
        assert pair.static_hat.shape == traj.static.shape
        np.testing.assert_array_equal(pair.signal_missing, traj.signal_missing)

    def test_missing_timestep_stays_zero_in_both_views(self):
        rng = np.random.default_rng(1)
        traj = make_traj(missing=[0, 1, 0, 0, 0, 0, 0, 0])
        pair = make_view_pair(traj, cfg_with(), unit_feature_stats(), sample_rate=4.0, rng=rng)
        assert np.all(pair.signals_hat[1] == 0.0)
        assert np.all(pair.signals_tilde[1] == 0.0)
        assert not np.all(pair.signals_hat[0] == 0.0)

    def test_identity_config_views_differ_only_by_segment(self):
        rng = np.random.default_rng(2)
        traj = make_traj()
        pair = make_view_pair(traj, identity_cfg(), unit_feature_stats(), sample_rate=4.0, rng=rng)
        np.testing.assert_array_equal(pair.signals_hat, traj.signals[:, :, :40])
        np.testing.assert_array_equal(pair.signals_tilde, traj.signals[:, :, 40:80])
        np.testing.assert_array_equal(pair.structured_hat, traj.structured)
        np.testing.assert_array_equal(pair.structured_tilde, traj.structured)
        np.testing.assert_array_equal(pair.static_hat, traj.static)

    def test_seeded_rng_reproduces_pair(self):
        traj = make_traj(seed=5)
        a = make_view_pair(traj, cfg_with(), unit_feature_stats(), 4.0, np.random.default_rng(42))
        b = make_view_pair(traj, cfg_with(), unit_feature_stats(), 4.0, np.random.default_rng(42))
        np.testing.assert_array_equal(a.signals_hat, b.signals_hat)
        np.testing.assert_array_equal(a.static_tilde, b.static_tilde)

    def test_structured_views_are_independent_draws(self):
        rng = np.random.default_rng(3)
        traj = make_traj()
        pair = make_view_pair(traj, cfg_with(), unit_feature_stats(), 4.0, rng)
        assert not np.array_equal(pair.structured_hat, pair.structured_tilde)

    def test_fraction_validation(self):
        with pytest.raises(ValueError):
            cfg_with(signal=SignalAugmentConfig(mask_frac=1.5))
