import numpy as np
import pytest

from altisr.colorfix import ColorMode, color_transfer, correct, histogram_match
from altisr.imageops import Image, to_y
from altisr.quality import psnr


def rgb(seed, h=32, w=32):
    rng = np.random.default_rng(seed)
    return Image(rng.random((h, w, 3)) * 0.8 + 0.1, "RGB")


def empirical_cdf(channel, bins=256):
    hist, _ = np.histogram(channel, bins=bins, range=(0.0, 1.0))
    return np.cumsum(hist) / channel.size


class TestHistogramMatch:
    def test_self_match_within_one_bin(self):
        img = rgb(0)
        out = histogram_match(img, img)
        assert np.max(np.abs(out.data - img.data)) <= 1.0 / 256.0 + 1e-6

    def test_constant_reference(self):
        src = rgb(1)
        ref = Image(np.full((16, 16, 3), 0.42), "RGB")
        out = histogram_match(src, ref)
        assert np.max(np.abs(out.data - 0.42)) <= 1.0 / 256.0 + 1e-6

    def test_cdf_sup_distance(self):
        src = rgb(2)
        ref = rgb(3)
        out = histogram_match(src, ref)
        for c in range(3):
            d = np.abs(empirical_cdf(out.data[:, :, c]) - empirical_cdf(ref.data[:, :, c]))
            assert d.max() <= 2.0 / 256.0 + 1e-9

    def test_idempotent_within_one_bin(self):
        src = rgb(4)
        ref = rgb(5)
        once = histogram_match(src, ref)
        twice = histogram_match(once, ref)
        assert np.max(np.abs(twice.data - once.data)) <= 1.0 / 256.0 + 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            histogram_match(rgb(6), Image(np.zeros((4, 4, 1)), "Y"))


class TestColorTransfer:
    def test_self_transfer_identity(self):
        img = rgb(7)
        out = color_transfer(img, img)
        assert np.max(np.abs(out.data.astype(np.float64) - img.data)) < 1e-6

    def test_affine_shift_restores_moments(self):
        ref = rgb(8)
        shifted = Image(ref.data * 0.5 + 0.1, "RGB")
        out = color_transfer(shifted, ref)
        for c in range(3):
            assert abs(out.data[:, :, c].mean() - ref.data[:, :, c].mean()) < 1e-6
            assert abs(out.data[:, :, c].std() - ref.data[:, :, c].std()) < 1e-6

    def test_constant_source_maps_to_reference_mean(self):
        src = Image(np.full((8, 8, 3), 0.5), "RGB")
        ref = rgb(9)
        out = color_transfer(src, ref)
        for c in range(3):
            np.testing.assert_allclose(out.data[:, :, c], np.float32(ref.data[:, :, c].mean()), atol=1e-6)

    def test_moment_match_without_clamping(self):
        src = rgb(10)
        ref = rgb(11)
        out = color_transfer(src, ref)
        for c in range(3):
            assert abs(out.data[:, :, c].mean() - ref.data[:, :, c].mean()) < 1e-5
            assert abs(out.data[:, :, c].std() - ref.data[:, :, c].std()) < 1e-5


class TestCorrect:
    def test_hm_mode_is_histogram_match(self):
        src, ref = rgb(12), rgb(13)
        np.testing.assert_array_equal(
            correct(src, ref, ColorMode.HM).data, histogram_match(src, ref).data
        )

    def test_ct_hm_order(self):
        src, ref = rgb(14), rgb(15)
        expected = histogram_match(color_transfer(src, ref), ref)
        np.testing.assert_array_equal(correct(src, ref, ColorMode.CT_HM).data, expected.data)

    def test_hm_ct_order(self):
        src, ref = rgb(16), rgb(17)
        expected = color_transfer(histogram_match(src, ref), ref)
        np.testing.assert_array_equal(correct(src, ref, ColorMode.HM_CT).data, expected.data)

    def test_correction_improves_color_shifted_psnr(self):
        ref = rgb(18, 48, 48)
        gains = np.array([1.08, 0.93, 1.05])
        offsets = np.array([0.04, -0.03, 0.02])
        shifted = Image(ref.data * gains + offsets, "RGB")
        before = psnr(to_y(shifted), to_y(ref))
        after = psnr(to_y(correct(shifted, ref, ColorMode.CT_HM)), to_y(ref))
        assert after > before

    def test_ct_restores_global_affine_shift_psnr(self):
        # For in-gamut affine shifts the moment map inverts the shift.
        ref = rgb(19, 48, 48)
        shifted = Image(ref.data * 0.95 + 0.02, "RGB")
        corrected = correct(shifted, ref, ColorMode.CT)
        assert psnr(to_y(corrected), to_y(ref)) > 50.0
