"""Tests for the evaluation metric suite.

Closed-form oracle values (1-D Frechet distances, KL divergences,
inception scores, enumerated alignment cases) are derived in the tests
and compared against the implementations.
"""

import math

import numpy as np
import pytest
import torch

from soundtrack.config import CaspConfig
from soundtrack.metrics import (
    AttentionPool,
    CaspModel,
    GaussianStats,
    PeakList,
    av_align,
    casp_contrastive_loss,
    crop_frames,
    detect_peaks,
    dual_score,
    energy_db,
    filter_pair,
    frechet,
    gaussian_stats,
    inception_score,
    kl_metric,
    score_matrix,
    topk_retrieval,
)


class TestEnergy:
    def test_full_scale_constant_is_zero_db(self):
        assert abs(energy_db(np.ones(100))) < 1e-6

    def test_tenth_scale_is_minus_twenty_db(self):
        assert abs(energy_db(np.full(100, 0.1)) + 20.0) < 1e-5

    def test_silence_hits_floor(self):
        assert energy_db(np.zeros(10)) == pytest.approx(-120.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            energy_db(np.zeros(0))

    def test_filter_keeps_loud_pairs(self):
        loud = np.full(100, 0.5)
        assert filter_pair(loud, loud)

    def test_filter_discards_if_either_quiet(self):
        loud = np.full(100, 0.5)
        quiet = np.full(100, 1e-4)
        assert not filter_pair(loud, quiet)
        assert not filter_pair(quiet, loud)


class TestPeaks:
    def test_peaklist_requires_increasing_times(self):
        with pytest.raises(ValueError):
            PeakList([1.0, 1.0])
        with pytest.raises(ValueError):
            PeakList([-0.5, 1.0])
        PeakList([])  # empty is fine

    def test_detects_bumps_at_right_times(self):
        env = np.zeros(100)
        env[20] = 1.0
        env[60] = 1.0
        peaks = detect_peaks(env, frame_rate=40.0)
        assert peaks.times == [0.5, 1.5]

    def test_min_separation_suppresses_neighbors(self):
        env = np.zeros(100)
        env[50] = 1.0
        env[52] = 0.9  # within 0.1 s at 40 Hz
        peaks = detect_peaks(env, frame_rate=40.0, min_separation=0.1)
        assert peaks.times == [1.25]

    def test_prominence_filters_ripples(self):
        env = np.zeros(100)
        env[30] = 1.0
        env[70] = 0.01
        peaks = detect_peaks(env, 40.0, min_prominence=0.1)
        assert peaks.times == [0.75]

    def test_short_envelope_rejected(self):
        with pytest.raises(ValueError):
            detect_peaks(np.zeros(2), 40.0)


class TestAvAlign:
    def test_identical_lists_give_one(self):
        p = PeakList([0.5, 1.0, 1.5])
        assert av_align(p, p) == 1.0

    def test_disjoint_lists_give_zero(self):
        assert av_align(PeakList([0.0, 1.0]), PeakList([0.5, 1.5])) == 0.0

    def test_enumerated_partial_match_third(self):
        # A={1.0, 2.0}, V={1.0, 3.0}: one match, IoU = 1 / (2 + 2 - 1)
        a = PeakList([1.0, 2.0])
        v = PeakList([1.0, 3.0])
        assert av_align(a, v, window=0.1) == pytest.approx(1.0 / 3.0)

    def test_both_empty_is_one(self):
        assert av_align(PeakList([]), PeakList([])) == 1.0

    def test_one_empty_is_zero(self):
        assert av_align(PeakList([]), PeakList([1.0])) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = PeakList(sorted(set(np.round(rng.uniform(0, 5, 4), 3))))
            v = PeakList(sorted(set(np.round(rng.uniform(0, 5, 5), 3))))
            assert av_align(a, v) == pytest.approx(av_align(v, a))

    def test_time_shift_invariance(self):
        a = PeakList([0.5, 1.2, 3.0])
        v = PeakList([0.55, 2.0])
        shifted_a = PeakList([t + 7.0 for t in a.times])
        shifted_v = PeakList([t + 7.0 for t in v.times])
        assert av_align(a, v) == pytest.approx(av_align(shifted_a, shifted_v))

    def test_bad_window(self):
        with pytest.raises(ValueError):
            av_align(PeakList([1.0]), PeakList([1.0]), window=0.0)


class TestCaspModel:
    def cfg(self):
        return CaspConfig(d_feat=4, d_model=16, d_out=8, n_layers=1, n_heads=2, crop_s=1.0)

    def test_attention_pool_constant_sequence(self):
        torch.manual_seed(0)
        pool = AttentionPool(8)
        row = torch.randn(8)
        seq = row.expand(10, 8)
        assert torch.allclose(pool(seq), row, atol=1e-6)

    def test_embeddings_unit_norm(self):
        torch.manual_seed(0)
        model = CaspModel(self.cfg())
        v = model.embed(torch.randn(40, 4), "audio")
        assert abs(float(v.norm()) - 1.0) < 1e-5

    def test_batched_embed_matches_single(self):
        torch.manual_seed(1)
        model = CaspModel(self.cfg())
        frames = torch.randn(3, 40, 4)
        with torch.no_grad():
            batched = model.embed(frames, "speech")
            singles = torch.stack([model.embed(f, "speech") for f in frames])
        assert torch.allclose(batched, singles, atol=1e-6)

    def test_branches_are_independent(self):
        torch.manual_seed(2)
        model = CaspModel(self.cfg())
        x = torch.randn(40, 4)
        assert not torch.allclose(model.embed(x, "audio"), model.embed(x, "speech"))

    def test_initial_loss_near_log_batch(self):
        # at init the branch embeddings are nearly input-independent, so
        # the similarity matrix is almost constant and the symmetric CE
        # starts around ln(B) per direction
        torch.manual_seed(3)
        model = CaspModel(self.cfg())
        b = 16
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            a = model.embed(torch.randn(b, 40, 4, generator=g), "audio")
            s = model.embed(torch.randn(b, 40, 4, generator=g), "speech")
            loss = float(casp_contrastive_loss(model, a, s))
        assert abs(loss - math.log(b)) / math.log(b) < 0.10

    def test_contrastive_loss_rewards_diagonal(self):
        torch.manual_seed(4)
        model = CaspModel(self.cfg())
        eye = torch.eye(8)[:4]
        aligned = float(casp_contrastive_loss(model, eye, eye))
        shuffled = float(casp_contrastive_loss(model, eye, eye[[1, 0, 3, 2]]))
        assert aligned < shuffled

    def test_crop_pads_short_input(self):
        cfg = self.cfg()  # 1 s crop = 40 frames
        frames = np.ones((25, 4), dtype=np.float32)
        out = crop_frames(frames, cfg, np.random.default_rng(0))
        assert out.shape == (40, 4)
        assert out[:25].all() and not out[25:].any()

    def test_crop_slices_long_input(self):
        cfg = self.cfg()
        frames = np.arange(60, dtype=np.float32).reshape(-1, 1).repeat(4, axis=1)
        out = crop_frames(frames, cfg, np.random.default_rng(1))
        assert out.shape == (40, 4)
        assert np.array_equal(np.diff(out[:, 0]), np.ones(39))

    def test_score_matrix_and_ties(self):
        torch.manual_seed(5)
        model = CaspModel(self.cfg())
        rng = np.random.default_rng(2)
        pairs = [
            (rng.normal(size=(40, 4)).astype(np.float32),
             rng.normal(size=(40, 4)).astype(np.float32))
            for _ in range(6)
        ]
        scores = score_matrix(model, pairs)
        assert scores.shape == (6, 6)
        topk = topk_retrieval(model, pairs, ks=(1, 3, 5))
        assert set(topk) == {1, 3, 5}
        assert all(0.0 <= v <= 1.0 for v in topk.values())
        assert topk[1] <= topk[3] <= topk[5]

    def test_topk_needs_enough_pairs(self):
        torch.manual_seed(6)
        model = CaspModel(self.cfg())
        rng = np.random.default_rng(3)
        pairs = [
            (rng.normal(size=(40, 4)).astype(np.float32),
             rng.normal(size=(40, 4)).astype(np.float32))
            for _ in range(3)
        ]
        with pytest.raises(ValueError):
            topk_retrieval(model, pairs, ks=(1, 5))

    def test_dual_score_is_cosine(self):
        torch.manual_seed(7)
        model = CaspModel(self.cfg())
        rng = np.random.default_rng(4)
        a = rng.normal(size=(40, 4)).astype(np.float32)
        s = rng.normal(size=(40, 4)).astype(np.float32)
        assert -1.0 <= dual_score(model, a, s) <= 1.0


class TestGaussianStats:
    def test_matches_numpy_cov(self):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(50, 3))
        stats = gaussian_stats(rows, reg=0.0)
        assert np.allclose(stats.mean, rows.mean(axis=0))
        assert np.allclose(stats.cov, np.cov(rows, rowvar=False), atol=1e-10)

    def test_regularization_added(self):
        rows = np.zeros((5, 2))
        stats = gaussian_stats(rows, reg=1e-6)
        assert np.allclose(stats.cov, 1e-6 * np.eye(2))


class TestFrechet:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(1)
        stats = gaussian_stats(rng.normal(size=(40, 4)))
        assert abs(frechet(stats, stats)) < 1e-6

    def test_1d_mean_shift(self):
        # N(0,1) vs N(1,1): (0-1)^2 + (1-1)^2 = 1
        a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
        b = GaussianStats(np.array([1.0]), np.array([[1.0]]))
        assert abs(frechet(a, b) - 1.0) < 1e-6

    def test_1d_variance_shift(self):
        # N(0,1) vs N(0,4): (sigma 1 vs 2) -> (1-2)^2 = 1
        a = GaussianStats(np.array([0.0]), np.array([[1.0]]))
        b = GaussianStats(np.array([0.0]), np.array([[4.0]]))
        assert abs(frechet(a, b) - 1.0) < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = gaussian_stats(rng.normal(size=(30, 5)))
        b = gaussian_stats(rng.normal(loc=0.3, size=(40, 5)))
        assert abs(frechet(a, b) - frechet(b, a)) < 1e-6

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        rows_a = rng.normal(size=(60, 4))
        rows_b = rng.normal(loc=0.5, scale=1.5, size=(60, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        d0 = frechet(gaussian_stats(rows_a), gaussian_stats(rows_b))
        d1 = frechet(gaussian_stats(rows_a @ q.T), gaussian_stats(rows_b @ q.T))
        assert abs(d0 - d1) < 1e-4

    def test_dimension_mismatch(self):
        a = GaussianStats(np.zeros(2), np.eye(2))
        b = GaussianStats(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            frechet(a, b)

    def test_non_psd_rejected(self):
        a = GaussianStats(np.zeros(2), np.diag([1.0, -1.0]))
        b = GaussianStats(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            frechet(a, b)


class TestPosteriorMetrics:
    def test_kl_identical_zero(self):
        p = np.array([[0.25, 0.75], [0.5, 0.5]])
        assert kl_metric(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_kl_onehot_vs_uniform_is_log_c(self):
        c = 8
        ref = np.eye(c)[[2, 5, 0]]
        gen = np.full((3, c), 1.0 / c)
        assert kl_metric(gen, ref) == pytest.approx(math.log(c), rel=1e-6)

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = rng.dirichlet(np.ones(5), size=6)
            q = rng.dirichlet(np.ones(5), size=6)
            assert kl_metric(p, q) >= 0.0

    def test_kl_validation(self):
        ok = np.array([[0.5, 0.5]])
        with pytest.raises(ValueError):
            kl_metric(np.array([[0.5, 0.6]]), ok)
        with pytest.raises(ValueError):
            kl_metric(ok, np.array([[0.3, 0.3, 0.4]]))

    def test_inception_identical_rows_is_one(self):
        p = np.tile([0.2, 0.3, 0.5], (10, 1))
        assert inception_score(p) == pytest.approx(1.0, abs=1e-9)

    def test_inception_onehot_rows_is_c(self):
        c = 6
        p = np.eye(c)  # one sample per class
        assert inception_score(p) == pytest.approx(c, rel=1e-6)

    def test_inception_range(self):
        rng = np.random.default_rng(5)
        c = 7
        p = rng.dirichlet(np.ones(c), size=20)
        score = inception_score(p)
        assert 1.0 <= score <= c + 1e-9
