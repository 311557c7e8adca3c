import json

import numpy as np
import pytest

from altisr.colorfix import ColorMode, correct
from altisr.imageops import Image, load_png, resize, to_y
from altisr.quality import burst_compare, psd_profile, psnr
from altisr.skysim import (
    AltitudeProfile,
    CameraModel,
    DegradeParams,
    SceneSpec,
    degrade,
    generate_dataset,
    make_burst,
    render_scene,
)

CAM = CameraModel()


class TestCameraModel:
    def test_fnumber_relation(self):
        cam = CameraModel(focal_mm=24.0, pupil_mm=8.0)
        assert abs(cam.fnumber - 3.0) < 1e-9

    def test_footprint_linear_in_altitude(self):
        assert abs(CAM.footprint_m(140.0) / CAM.footprint_m(10.0) - 14.0) < 1e-9

    def test_blur_sigma_caps_and_monotonicity(self):
        sigmas = [CAM.blur_sigma_lr(a) for a in (10, 20, 30, 40, 50, 70, 80, 100, 120, 140)]
        assert max(sigmas) <= 2.5
        assert min(sigmas) >= 0.4
        assert all(a >= b for a, b in zip(sigmas, sigmas[1:]))
        assert sigmas[0] == 2.5  # capped at the low end
        assert sigmas[-1] == 0.4  # capped at the high end

    def test_invalid_camera(self):
        with pytest.raises(ValueError):
            CameraModel(focal_mm=-1.0)


class TestRenderScene:
    def test_deterministic(self):
        spec = SceneSpec(seed=5)
        a = render_scene(spec, 40.0, CAM, 96, 96)
        b = render_scene(spec, 40.0, CAM, 96, 96)
        np.testing.assert_array_equal(a.data, b.data)

    def test_seed_changes_scene(self):
        a = render_scene(SceneSpec(seed=1), 40.0, CAM, 96, 96)
        b = render_scene(SceneSpec(seed=2), 40.0, CAM, 96, 96)
        assert np.abs(a.data.astype(np.float64) - b.data).max() > 0.01

    def test_high_frequency_drops_with_altitude(self):
        low, high = [], []
        for s in range(8):
            spec = SceneSpec(seed=300 + s)
            low.append(psd_profile(render_scene(spec, 10.0, CAM, 128, 128)).hf_ratio)
            high.append(psd_profile(render_scene(spec, 140.0, CAM, 128, 128)).hf_ratio)
        assert np.mean(low) > np.mean(high)

    def test_output_shape_and_space(self):
        img = render_scene(SceneSpec(seed=3), 20.0, CAM, 64, 80)
        assert (img.height, img.width, img.channels) == (64, 80, 3)
        assert img.space == "RGB"


class TestDegrade:
    def setup_method(self):
        self.hr = render_scene(SceneSpec(seed=9), 40.0, CAM, 128, 128)

    def test_identity_settings_reduce_to_bicubic(self):
        lr, params = degrade(
            self.hr, 40.0, CAM, 2.0, seed=1,
            blur_sigma=0.0, noise_std=0.0, jitter_px=0.0, color_shift=False,
        )
        expected = resize(self.hr, 64, 64, "bicubic")
        np.testing.assert_array_equal(lr.data, expected.data)
        assert params.blur_sigma == 0.0
        assert params.color_gain == (1.0, 1.0, 1.0)
        assert params.jitter_px == 0.0

    def test_noise_standard_deviation(self):
        flat = Image(np.full((128, 128, 3), 0.5), "RGB")
        lr, _ = degrade(
            flat, 40.0, CAM, 2.0, seed=2,
            blur_sigma=0.0, noise_std=0.02, jitter_px=0.0, color_shift=False,
        )
        residual = lr.data.astype(np.float64) - 0.5
        assert 0.018 <= residual.std() <= 0.022

    def test_color_shift_corrected_by_ct_hm(self):
        lr, _ = degrade(
            self.hr, 40.0, CAM, 2.0, seed=3,
            blur_sigma=0.0, noise_std=0.0, jitter_px=0.0, color_shift=True,
        )
        ref = resize(self.hr, 64, 64, "bicubic")
        before = psnr(to_y(lr), to_y(ref))
        after = psnr(to_y(correct(lr, ref, ColorMode.CT_HM)), to_y(ref))
        assert after > before

    def test_deterministic(self):
        a, _ = degrade(self.hr, 40.0, CAM, 2.0, seed=4)
        b, _ = degrade(self.hr, 40.0, CAM, 2.0, seed=4)
        np.testing.assert_array_equal(a.data, b.data)

    def test_jitter_moves_content(self):
        still, _ = degrade(self.hr, 40.0, CAM, 2.0, seed=5, noise_std=0.0, jitter_px=0.0, color_shift=False)
        moved, params = degrade(self.hr, 40.0, CAM, 2.0, seed=5, noise_std=0.0, jitter_px=1.5, color_shift=False)
        assert params.jitter_px > 0.0
        assert np.abs(still.data.astype(np.float64) - moved.data).max() > 0.005


class TestMakeBurst:
    def setup_method(self):
        self.hr = render_scene(SceneSpec(seed=11), 40.0, CAM, 128, 128)

    def test_single_frame_equals_degrade(self):
        frames, params = make_burst(self.hr, 40.0, CAM, 2.0, n=1, seed=6)
        direct, dparams = degrade(self.hr, 40.0, CAM, 2.0, seed=6, frame=0)
        np.testing.assert_array_equal(frames[0].data, direct.data)
        assert params[0] == dparams

    def test_default_burst_of_seven_distinct_frames(self):
        frames, _ = make_burst(self.hr, 40.0, CAM, 2.0, seed=7)
        assert len(frames) == 7
        psnr_mat, _ = burst_compare(frames)
        off_diag = psnr_mat[~np.eye(7, dtype=bool)]
        assert np.all(np.isfinite(off_diag))

    def test_frames_share_blur_and_color(self):
        _, params = make_burst(self.hr, 40.0, CAM, 2.0, n=4, seed=8)
        first = params[0]
        for p in params[1:]:
            assert p.blur_sigma == first.blur_sigma
            assert p.color_gain == first.color_gain
            assert p.color_offset == first.color_offset
            assert p.jitter_px == first.jitter_px
        translations = {p.translation for p in params}
        assert len(translations) == 4  # per-frame jitter differs

    def test_zero_frames_rejected(self):
        with pytest.raises(ValueError):
            make_burst(self.hr, 40.0, CAM, 2.0, n=0, seed=9)


@pytest.fixture(scope="module")
def small_tree(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    profile = AltitudeProfile(altitudes_m=(10, 40, 140))
    manifest = generate_dataset(
        out, n_scenes=2, profile=profile, cam=CAM, scale=2.0, seed=77,
        split=(1, 0, 1), hr_size=(64, 64), burst_n=3,
    )
    return out, manifest


class TestGenerateDataset:

    def test_tree_counts(self, small_tree):
        out, manifest = small_tree
        hr_files = sorted(out.rglob("hr.png"))
        lr_files = sorted(out.rglob("lr_*.png"))
        meta_files = sorted(out.rglob("meta.json"))
        assert len(hr_files) == 2 * 3
        assert len(lr_files) == 2 * 3 * 3
        assert len(meta_files) == 2 * 3
        assert (out / "train" / "scene_0000" / "alt_010" / "hr.png").exists()
        assert (out / "test" / "scene_0001" / "alt_140" / "lr_02.png").exists()

    def test_meta_key_order(self, small_tree):
        out, _ = small_tree
        meta_path = out / "train" / "scene_0000" / "alt_040" / "meta.json"
        keys = list(json.loads(meta_path.read_text()).keys())
        assert keys == [
            "altitude_m", "seed", "blur_sigma", "noise_std",
            "color_gain", "color_offset", "jitter_px",
        ]

    def test_images_load(self, small_tree):
        out, _ = small_tree
        hr = load_png(out / "train" / "scene_0000" / "alt_010" / "hr.png")
        lr = load_png(out / "train" / "scene_0000" / "alt_010" / "lr_00.png")
        assert (hr.height, hr.width) == (64, 64)
        assert (lr.height, lr.width) == (32, 32)

    def test_regeneration_is_byte_identical(self, small_tree, tmp_path):
        out, manifest = small_tree
        profile = AltitudeProfile(altitudes_m=(10, 40, 140))
        again = tmp_path / "again"
        manifest2 = generate_dataset(
            again, n_scenes=2, profile=profile, cam=CAM, scale=2.0, seed=77,
            split=(1, 0, 1), hr_size=(64, 64), burst_n=3,
        )
        assert manifest == manifest2
        for rel in manifest["files"]:
            assert (out / rel).read_bytes() == (again / rel).read_bytes()

    def test_bad_split_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(
                tmp_path, n_scenes=3, profile=AltitudeProfile((10,)), cam=CAM,
                scale=2.0, seed=1, split=(1, 1, 0),
            )


class TestAltitudeProfile:
    def test_default_list(self):
        assert AltitudeProfile().altitudes_m == (10, 20, 30, 40, 50, 70, 80, 100, 120, 140)

    def test_sorted_ascending(self):
        assert AltitudeProfile((50, 10, 30)).altitudes_m == (10, 30, 50)

    def test_positive_required(self):
        with pytest.raises(ValueError):
            AltitudeProfile((0, 10))
