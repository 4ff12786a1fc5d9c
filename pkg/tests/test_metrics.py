"""Quality metric tests against closed forms and structural properties."""

import numpy as np
import pytest

from mhcnn import data as D
from mhcnn import metrics as M
from mhcnn.rng import SplitMix64


def rand_image(h, w, seed):
    return SplitMix64(seed).uniform(h * w).reshape(h, w).astype(np.float64)


class TestPsnr:
    def test_identical_images_cap(self):
        x = rand_image(16, 16, 1)
        assert M.psnr(x, x) == 100.0

    def test_uniform_difference_closed_form(self):
        ref = np.full((32, 32), 0.5)
        test = np.full((32, 32), 0.6)
        assert abs(M.psnr(ref, test) - 20.0) <= 1e-6

    def test_clamps_before_measuring(self):
        ref = np.zeros((8, 8))
        test = np.full((8, 8), -0.1)
        assert M.psnr(ref, test) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(M.MetricError):
            M.psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_monotone_in_noise_level(self):
        clean = D.to_float(D.gen_synthetic(1, 64, seed=5)[0])
        values = []
        for sigma in (5, 15, 25, 50):
            noisy = np.clip(D.add_awgn(clean, D.NoiseSpec(sigma, seed=7)), 0, 1)
            values.append(M.psnr(clean, noisy))
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_invariant_under_joint_rotation(self):
        a = rand_image(12, 12, 2)
        b = rand_image(12, 12, 3)
        assert M.psnr(a, b) == pytest.approx(
            M.psnr(np.rot90(a), np.rot90(b)), abs=1e-12
        )


class TestSsim:
    def test_self_similarity_is_one(self):
        x = rand_image(24, 24, 4)
        assert M.ssim(x, x) == 1.0

    def test_symmetry(self):
        a = rand_image(20, 20, 5)
        b = rand_image(20, 20, 6)
        assert abs(M.ssim(a, b) - M.ssim(b, a)) <= 1e-9

    def test_never_exceeds_one(self):
        for seed in range(6):
            a = rand_image(16, 16, seed)
            b = rand_image(16, 16, seed + 50)
            assert M.ssim(a, b) <= 1.0

    def test_negative_image_scores_low(self):
        base = D.to_float(D.gen_synthetic(1, 64, seed=8)[0])[0]
        mid = 0.2 + 0.6 * base  # mid-contrast version
        assert M.ssim(mid, 1.0 - mid) < 0.3

    def test_color_collapses_by_channel_mean(self):
        color = np.stack([rand_image(16, 16, 9 + i) for i in range(3)])
        gray = color.mean(axis=0)
        assert M.ssim(color, color) == 1.0
        assert M.ssim(color, np.stack([gray] * 3)) == pytest.approx(
            M.ssim(gray, gray), abs=1e-9
        )

    def test_too_small_rejected(self):
        with pytest.raises(M.MetricError):
            M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestReport:
    def test_mean_matches_hand_mean(self):
        rep = M.MetricReport()
        rep.add("a", 30.0, 0.9)
        rep.add("b", 32.0, 0.8)
        rep.add("c", 31.0, 0.7)
        assert rep.mean_psnr == pytest.approx((30 + 32 + 31) / 3)
        assert rep.mean_ssim == pytest.approx((0.9 + 0.8 + 0.7) / 3)
        assert len(rep) == 3
