"""Log-mel extraction, normalization, SpecAugment, and the SCDF format."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from scdlab.features import (
    LOG_FLOOR,
    STD_FLOOR,
    FeatureMatrix,
    NormStats,
    SpecAugmentPolicy,
    compute_norm_stats,
    logmel,
    mel_center_freqs,
    mel_filterbank,
    mvn,
    read_features,
    specaugment,
    write_features,
)

RATE = 16000


class TestLogmel:
    def test_silence_hits_log_floor(self):
        fm = logmel(np.zeros(RATE), RATE, n_mels=24)
        np.testing.assert_allclose(fm.frames, np.log(LOG_FLOOR))

    def test_one_second_default_frame_count(self):
        fm = logmel(np.zeros(RATE), RATE)
        assert fm.num_frames == 97
        assert fm.dim == 128
        assert fm.frame_shift_s == pytest.approx(0.010)

    def test_too_short_waveform_errors(self):
        with pytest.raises(ValueError, match="shorter than one"):
            logmel(np.zeros(100), RATE)

    def test_low_sample_rate_rejected(self):
        with pytest.raises(ValueError, match="8 kHz"):
            logmel(np.zeros(8000), 4000)

    def test_pure_tone_lands_in_nearest_center_bin(self):
        # Cross-checked two ways: against the analytic filter centers and
        # against a direct DFT of the windowed frame.
        t = np.arange(RATE) / RATE
        wav = np.sin(2 * np.pi * 1000.0 * t)
        for n_mels in (40, 128):
            fm = logmel(wav, RATE, n_mels=n_mels)
            centers = mel_center_freqs(n_mels, RATE)
            expected_bin = int(np.argmin(np.abs(centers - 1000.0)))
            interior = fm.frames[10:-10]
            assert np.all(np.argmax(interior, axis=1) == expected_bin)

        # direct DFT oracle: windowed frame -> power spectrum -> filterbank
        n_mels = 40
        win = int(round(0.032 * RATE))
        frame = wav[:win] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win))
        nfft = 512
        power = np.abs(np.fft.rfft(frame, nfft)) ** 2
        fb = mel_filterbank(n_mels, nfft, RATE)
        oracle_bin = int(np.argmax(power @ fb))
        fm = logmel(wav, RATE, n_mels=n_mels)
        assert int(np.argmax(fm.frames[0])) == oracle_bin

    def test_translation_covariance(self):
        rng = np.random.default_rng(0)
        wav = rng.standard_normal(RATE)
        hop = int(round(0.010 * RATE))
        base = logmel(wav, RATE, n_mels=24)
        for k in (1, 3):
            shifted = logmel(wav[k * hop :], RATE, n_mels=24)
            np.testing.assert_allclose(shifted.frames, base.frames[k : k + shifted.num_frames], atol=1e-6)


class TestMvn:
    def test_self_normalization(self):
        rng = np.random.default_rng(1)
        fm = FeatureMatrix(rng.standard_normal((200, 8)) * 3 + 5)
        out = mvn(fm, compute_norm_stats(fm))
        np.testing.assert_allclose(out.frames.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.frames.var(axis=0), 1.0, atol=1e-6)

    def test_constant_input_clamped_std(self):
        fm = FeatureMatrix(np.full((50, 4), 7.25))
        stats_ = compute_norm_stats(fm)
        assert np.all(stats_.std == STD_FLOOR)
        out = mvn(fm, stats_)
        np.testing.assert_allclose(out.frames, 0.0, atol=1e-6)

    def test_idempotence_on_normalized_data(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            fm = FeatureMatrix(rng.standard_normal((100, 6)) * rng.uniform(0.5, 4) + rng.uniform(-3, 3))
            once = mvn(fm, compute_norm_stats(fm))
            twice = mvn(once, compute_norm_stats(once))
            np.testing.assert_allclose(twice.frames, once.frames, atol=1e-9)

    def test_dimension_mismatch(self):
        fm = FeatureMatrix(np.zeros((5, 4)))
        stats_ = NormStats(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError, match="dimension"):
            mvn(fm, stats_)

    def test_invertible_given_stats(self):
        rng = np.random.default_rng(3)
        fm = FeatureMatrix(rng.standard_normal((60, 5)))
        stats_ = compute_norm_stats(fm)
        out = mvn(fm, stats_)
        back = out.frames * stats_.std + stats_.mean
        np.testing.assert_allclose(back, fm.frames, atol=1e-12)


class TestSpecAugment:
    def test_zero_policy_identity(self):
        rng = np.random.default_rng(4)
        fm = FeatureMatrix(rng.standard_normal((40, 10)))
        out = specaugment(fm, SpecAugmentPolicy(), rng_seed=0)
        np.testing.assert_array_equal(out.frames, fm.frames)

    def test_single_time_mask_block(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((60, 8)) + 10.0  # keep all cells far from 0
        policy = SpecAugmentPolicy(n_time_masks=1, max_time_width_frames=7)
        out = specaugment(FeatureMatrix(base), policy, rng_seed=11).frames
        masked_rows = np.flatnonzero((out == 0.0).all(axis=1))
        assert masked_rows.size <= 7
        if masked_rows.size:
            assert np.array_equal(masked_rows, np.arange(masked_rows[0], masked_rows[-1] + 1))
        untouched = np.setdiff1d(np.arange(60), masked_rows)
        np.testing.assert_array_equal(out[untouched], base[untouched])

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(6)
        fm = FeatureMatrix(rng.standard_normal((50, 12)))
        policy = SpecAugmentPolicy(n_time_masks=2, max_time_width_frames=5, n_freq_masks=1, max_freq_width_bins=3)
        a = specaugment(fm, policy, rng_seed=123).frames
        b = specaugment(fm, policy, rng_seed=123).frames
        c = specaugment(fm, policy, rng_seed=124).frames
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mask_start_positions_uniform(self):
        # 10k seeded draws; observed single-row masks (width 1) expose the
        # start position, which must be uniform over the whole axis
        T = 20
        base = np.zeros((T, 2))
        policy = SpecAugmentPolicy(n_time_masks=1, max_time_width_frames=1, mask_value=7.0)
        counts = np.zeros(T)
        for seed in range(10000):
            out = specaugment(FeatureMatrix(base), policy, rng_seed=seed).frames
            masked = np.flatnonzero((out == 7.0).all(axis=1))
            if masked.size:  # width 0 draws leave nothing to observe
                counts[masked[0]] += 1
        assert counts.sum() > 4000
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_masked_cells_equal_mask_value_and_rest_untouched(self):
        rng = np.random.default_rng(7)
        base = rng.standard_normal((30, 9)) + 5.0
        policy = SpecAugmentPolicy(n_time_masks=1, max_time_width_frames=4,
                                   n_freq_masks=1, max_freq_width_bins=2, mask_value=-1.5)
        out = specaugment(FeatureMatrix(base), policy, rng_seed=3).frames
        changed = out != base
        assert np.all(out[changed] == -1.5)


class TestScdfFormat:
    def test_roundtrip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        frames = rng.standard_normal((17, 5)).astype(np.float32).astype(np.float64)
        fm = FeatureMatrix(frames, frame_shift_s=0.01)
        path = tmp_path / "x.scdf"
        write_features(path, fm)
        back = read_features(path)
        np.testing.assert_array_equal(back.frames, frames)
        raw = path.read_bytes()
        assert raw[:4] == b"SCDF"
        assert len(raw) == 16 + 4 * 17 * 5

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.scdf"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not an SCDF"):
            read_features(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "short.scdf"
        fm = FeatureMatrix(np.ones((4, 4)))
        write_features(path, fm)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            read_features(path)
