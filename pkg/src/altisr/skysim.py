"""Procedural multi-altitude scene and degradation simulator.

Stands in for the physical two-camera drone capture: renders ground-truth
telephoto views of a procedural world, then derives LR frames through an
altitude-dependent degradation (blur, bicubic downsampling, noise, color
shift, projective jitter). All randomness is derived from
(seed, scene, altitude, frame); nothing touches global RNG state.

The ground texture is multi-octave value noise whose per-octave amplitude
decays steeply at coarse scales and flattens at fine scales, plus geometric
primitives at fixed world sizes. Wider footprints (higher altitude) therefore
sample spectrally redder content, reproducing the drop of high-frequency
energy with altitude.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .imageops import Image, gaussian_blur, resize, save_png
from .register import _bilinear_sample, apply_homography, fit_homography_dlt, Correspondence

BLUR_SIGMA_MIN = 0.4
BLUR_SIGMA_MAX = 2.5
DEFAULT_ALTITUDES = (10, 20, 30, 40, 50, 70, 80, 100, 120, 140)

# Sub-stream domains for seed derivation.
_DOM_PARAMS = 101
_DOM_FRAME = 202
_DOM_PRIMS = 303
_DOM_CHROMA = 404


@dataclass
class CameraModel:
    """Pinhole-with-heuristics camera description.

    The depth-of-field relation DoF ~ 2 h^2 F c / f^2 motivates blur that
    falls off with the square of the altitude; its inverse (scaled by the
    pixel pitch) is used as the LR blur sigma, capped to a sane pixel range.
    """

    focal_mm: float = 24.3
    pupil_mm: float = 24.3 / 2.8
    coc_mm: float = 0.03
    pitch_mm: float = 0.0016
    noise_std: float = 0.02
    native_px: int = 4000

    def __post_init__(self):
        for name in ("focal_mm", "pupil_mm", "coc_mm", "pitch_mm", "native_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"camera {name} must be positive")
        if self.noise_std < 0:
            raise ValueError("camera noise_std must be non-negative")

    @property
    def fnumber(self) -> float:
        return self.focal_mm / self.pupil_mm

    @property
    def sensor_width_mm(self) -> float:
        return self.pitch_mm * self.native_px

    def footprint_m(self, altitude_m: float) -> float:
        """Ground width covered by the sensor at ``altitude_m`` (pinhole)."""
        return altitude_m * self.sensor_width_mm / self.focal_mm

    def blur_sigma_lr(self, altitude_m: float) -> float:
        """DoF-informed LR blur in pixels, capped to [0.4, 2.5]."""
        raw = (
            self.coc_mm
            * self.focal_mm**2
            / (2.0 * altitude_m**2 * self.fnumber)
            / self.pitch_mm
        )
        return float(np.clip(raw, BLUR_SIGMA_MIN, BLUR_SIGMA_MAX))


@dataclass
class SceneSpec:
    """Procedural world recipe; the same seed always yields the same world.

    The spectral shape mirrors ground scenes: strong centimeter-scale
    texture (grass, gravel), smooth surfaces between 0.35 m and 6 m, and
    moderate coarse structure beyond. Higher altitudes push the strong fine
    band below the sampling grid, draining high-frequency energy from the
    raster; lower altitudes resolve it.
    """

    seed: int
    base_wavelength_m: float = 48.0
    octaves: int = 29  # half-octave ladder reaching ~3 mm
    lacunarity: float = math.sqrt(2.0)
    coarse_amp: float = 1.5  # structures coarser than the smooth band
    mid_amp: float = 0.4  # smooth surfaces
    texture_amp: float = 5.0  # fine ground-texture plateau
    texture_band_m: tuple = (0.006, 0.025)
    smooth_band_m: tuple = (0.35, 6.0)
    world_extent_m: float = 42.0
    primitive_density: float = 0.12  # objects per square meter
    primitive_size_m: tuple = (0.06, 0.5)
    primitive_contrast: tuple = (0.06, 0.15)

    def octave_wavelengths(self) -> np.ndarray:
        return self.base_wavelength_m / self.lacunarity ** np.arange(self.octaves)

    def octave_amplitudes(self) -> np.ndarray:
        tex_lo, tex_hi = self.texture_band_m
        smooth_lo, smooth_hi = self.smooth_band_m
        amps = np.empty(self.octaves)
        for i, lam in enumerate(self.octave_wavelengths()):
            if lam > smooth_hi:
                amps[i] = self.coarse_amp
            elif lam > smooth_lo:
                amps[i] = self.mid_amp
            elif lam > tex_hi:
                # Geometric rise from the smooth level to the texture plateau.
                progress = math.log(smooth_lo / lam) / math.log(smooth_lo / tex_hi)
                amps[i] = self.mid_amp * (self.texture_amp / self.mid_amp) ** progress
            elif lam > tex_lo:
                amps[i] = self.texture_amp
            else:
                amps[i] = self.texture_amp * 0.5 ** (math.log(tex_lo / lam) / math.log(2.0))
        return amps


@dataclass
class AltitudeProfile:
    altitudes_m: tuple = DEFAULT_ALTITUDES

    def __post_init__(self):
        alts = tuple(self.altitudes_m)
        if any(a <= 0 for a in alts):
            raise ValueError("altitudes must be positive")
        self.altitudes_m = tuple(sorted(alts))


@dataclass
class DegradeParams:
    """Realized degradation of one LR frame; shared fields come first."""

    blur_sigma: float
    noise_std: float
    color_gain: tuple
    color_offset: tuple
    jitter_px: float  # max |corner perturbation|, 0 when disabled
    translation: tuple  # per-frame sub-pixel shift


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _lattice_values(seed: int, octave: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Hashed lattice noise in [-1, 1], stable in world coordinates."""
    # Offset indices into uint64 space to keep negatives well-defined.
    ux = (ix.astype(np.int64) + np.int64(1 << 31)).astype(np.uint64)
    uy = (iy.astype(np.int64) + np.int64(1 << 31)).astype(np.uint64)
    h = _splitmix(ux * np.uint64(0x9E3779B1) ^ _splitmix(uy + np.uint64(octave * 0x85EBCA6B)))
    h = _splitmix(h ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(seed: int, octave: int, x_m: np.ndarray, y_m: np.ndarray, wavelength: float) -> np.ndarray:
    gx = x_m / wavelength
    gy = y_m / wavelength
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    tx = _smoothstep(gx - ix)
    ty = _smoothstep(gy - iy)
    v00 = _lattice_values(seed, octave, ix, iy)
    v10 = _lattice_values(seed, octave, ix + 1, iy)
    v01 = _lattice_values(seed, octave, ix, iy + 1)
    v11 = _lattice_values(seed, octave, ix + 1, iy + 1)
    top = v00 * (1 - tx) + v10 * tx
    bot = v01 * (1 - tx) + v11 * tx
    return top * (1 - ty) + bot * ty


def _octave_fade(wavelength: float, gsd: float) -> float:
    """Smoothly drop octaves finer than the sampling grid (anti-aliasing).

    A lattice spacing of one GSD puts the noise content right at Nyquist;
    the smoothstep window keeps the transition free of scalloping.
    """
    ratio = wavelength / gsd
    if ratio >= 2.5:
        return 1.0
    if ratio <= 1.0:
        return 0.0
    t = (ratio - 1.0) / 1.5
    return t * t * (3.0 - 2.0 * t)


def _scene_primitives(spec: SceneSpec) -> list:
    rng = _rng(spec.seed, _DOM_PRIMS)
    count = int(round(spec.primitive_density * spec.world_extent_m**2))
    half = spec.world_extent_m / 2.0
    lo, hi = spec.primitive_size_m
    prims = []
    for _ in range(count):
        kind = "disc" if rng.random() < 0.5 else "rect"
        cx, cy = rng.uniform(-half, half, size=2)
        size = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        contrast = rng.uniform(*spec.primitive_contrast) * (1 if rng.random() < 0.5 else -1)
        angle = rng.uniform(0.0, math.pi)
        aspect = rng.uniform(0.4, 1.0)
        prims.append((kind, cx, cy, size, contrast, angle, aspect))
    return prims


def _render_primitives(canvas: np.ndarray, prims: list, x0: float, y0: float, gsd: float) -> None:
    h, w = canvas.shape
    for kind, cx, cy, size, contrast, angle, aspect in prims:
        # Sub-pixel objects integrate away: attenuate by covered area.
        area_fade = min(1.0, (size / (2.0 * gsd)) ** 2)
        if area_fade < 1e-3:
            continue
        reach = size * 1.5
        px0 = int(math.floor((cx - reach - x0) / gsd))
        px1 = int(math.ceil((cx + reach - x0) / gsd)) + 1
        py0 = int(math.floor((cy - reach - y0) / gsd))
        py1 = int(math.ceil((cy + reach - y0) / gsd)) + 1
        px0, px1 = max(px0, 0), min(px1, w)
        py0, py1 = max(py0, 0), min(py1, h)
        if px0 >= px1 or py0 >= py1:
            continue
        xs = x0 + (np.arange(px0, px1) + 0.0) * gsd - cx
        ys = y0 + (np.arange(py0, py1) + 0.0) * gsd - cy
        gx, gy = np.meshgrid(xs, ys)
        if kind == "disc":
            dist = np.hypot(gx, gy) - size / 2.0
        else:
            ca, sa = math.cos(angle), math.sin(angle)
            rx = np.abs(gx * ca + gy * sa) - size / 2.0
            ry = np.abs(-gx * sa + gy * ca) - size * aspect / 2.0
            dist = np.maximum(rx, ry)
        coverage = np.clip(0.5 - dist / gsd, 0.0, 1.0)
        canvas[py0:py1, px0:px1] += contrast * area_fade * coverage


def render_scene(
    spec: SceneSpec,
    altitude_m: float,
    cam: CameraModel,
    out_h: int,
    out_w: int,
) -> Image:
    """Ideal (pre-degradation) telephoto view of the scene at one altitude.

    The ground footprint grows linearly with altitude, so each pixel covers
    more ground and the finest world octaves fade out of the raster.
    """
    footprint_w = cam.footprint_m(altitude_m)
    gsd = footprint_w / out_w

    xs = (np.arange(out_w) - (out_w - 1) / 2.0) * gsd
    ys = (np.arange(out_h) - (out_h - 1) / 2.0) * gsd
    gx, gy = np.meshgrid(xs, ys)

    amps = spec.octave_amplitudes()
    wavelengths = spec.octave_wavelengths()
    acc = np.zeros((out_h, out_w))
    for k, (amp, wavelength) in enumerate(zip(amps, wavelengths)):
        fade = _octave_fade(wavelength, gsd)
        if fade <= 0.0:
            break
        acc += amp * fade * _value_noise(spec.seed, k, gx, gy, wavelength)
    luma = 0.55 + 0.42 * acc / math.sqrt(float((amps**2).sum()))

    _render_primitives(luma, _scene_primitives(spec), xs[0], ys[0], gsd)

    # Slowly varying chroma so color correction has real work to do.
    tint_r = _value_noise(spec.seed, 900, gx, gy, spec.base_wavelength_m / 2.0)
    tint_b = _value_noise(spec.seed, 901, gx, gy, spec.base_wavelength_m / 3.0)
    rgb = np.stack(
        [
            luma + 0.06 * tint_r,
            luma,
            luma - 0.04 * tint_r + 0.05 * tint_b,
        ],
        axis=2,
    )
    return Image(np.clip(rgb, 0.0, 1.0), "RGB")


def _jitter_homography(lr_h: int, lr_w: int, corners_px: np.ndarray, translation: tuple) -> np.ndarray:
    src = np.array(
        [[0.0, 0.0], [lr_w - 1.0, 0.0], [lr_w - 1.0, lr_h - 1.0], [0.0, lr_h - 1.0]]
    )
    dst = src + corners_px + np.asarray(translation)
    matches = [Correspondence(tuple(s), tuple(d), 1.0) for s, d in zip(src, dst)]
    return fit_homography_dlt(matches)


def degrade(
    hr_ideal: Image,
    altitude_m: float,
    cam: CameraModel,
    scale: float,
    seed: int,
    frame: int = 0,
    blur_sigma: Optional[float] = None,
    noise_std: Optional[float] = None,
    jitter_px: float = 1.5,
    trans_px: float = 0.5,
    color_shift: bool = True,
):
    """One LR observation of an ideal HR frame; returns (lr, params).

    Pipeline: Gaussian blur (sigma in LR pixels, applied pre-downsample at
    HR resolution), bicubic downsample by ``scale``, additive Gaussian
    noise, global affine color shift, projective jitter, clamp. Blur and
    color parameters depend only on (seed); noise and the sub-pixel
    translation depend on (seed, frame), so burst frames share the former.
    With blur 0, noise 0, jitter 0, and no color shift the result is exactly
    the bicubic downsample.
    """
    lr_h = int(round(hr_ideal.height / scale))
    lr_w = int(round(hr_ideal.width / scale))
    param_rng = _rng(seed, _DOM_PARAMS)
    frame_rng = _rng(seed, _DOM_FRAME, frame)

    sigma = cam.blur_sigma_lr(altitude_m) if blur_sigma is None else blur_sigma
    nstd = cam.noise_std if noise_std is None else noise_std

    # Shared draws happen unconditionally, in a fixed order, so toggling one
    # stage never shifts another stage's stream.
    gain = param_rng.uniform(0.9, 1.1, size=3)
    offset = param_rng.uniform(-0.05, 0.05, size=3)
    corners = param_rng.uniform(-jitter_px, jitter_px, size=(4, 2)) if jitter_px > 0 else np.zeros((4, 2))
    if not color_shift:
        gain = np.ones(3)
        offset = np.zeros(3)
    translation = (
        tuple(frame_rng.uniform(-trans_px, trans_px, size=2)) if jitter_px > 0 else (0.0, 0.0)
    )

    img = hr_ideal
    if sigma > 0.0:
        img = gaussian_blur(img, sigma * scale)
    lr = resize(img, lr_h, lr_w, "bicubic")
    data = lr.data.astype(np.float64)
    if nstd > 0.0:
        data = data + frame_rng.normal(0.0, nstd, size=data.shape)
    data = data * gain + offset

    if jitter_px > 0:
        h = _jitter_homography(lr_h, lr_w, corners, translation)
        hinv = np.linalg.inv(h)
        xs, ys = np.meshgrid(np.arange(lr_w, dtype=np.float64), np.arange(lr_h, dtype=np.float64))
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        src = apply_homography(hinv, pts)
        warped = np.empty_like(data)
        for c in range(data.shape[2]):
            warped[:, :, c] = _bilinear_sample(
                data[:, :, c], src[:, 0], src[:, 1]
            ).reshape(lr_h, lr_w)
        data = warped

    params = DegradeParams(
        blur_sigma=float(sigma),
        noise_std=float(nstd),
        color_gain=tuple(float(g) for g in gain),
        color_offset=tuple(float(o) for o in offset),
        jitter_px=float(np.abs(corners).max()),
        translation=(float(translation[0]), float(translation[1])),
    )
    return Image(np.clip(data, 0.0, 1.0), hr_ideal.space), params


def make_burst(
    hr_ideal: Image,
    altitude_m: float,
    cam: CameraModel,
    scale: float,
    n: int = 7,
    seed: int = 0,
    **degrade_kwargs,
):
    """n LR frames sharing blur/color, with per-frame jitter and noise."""
    if n < 1:
        raise ValueError("burst needs at least one frame")
    frames = []
    params = []
    for i in range(n):
        lr, p = degrade(hr_ideal, altitude_m, cam, scale, seed, frame=i, **degrade_kwargs)
        frames.append(lr)
        params.append(p)
    return frames, params


def _write_json(path: Path, obj: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n")
    os.replace(tmp, path)


def _meta_dict(altitude_m: float, seed: int, shared: DegradeParams) -> dict:
    # Fixed key order; one record per scene/altitude covers the whole burst.
    return {
        "altitude_m": float(altitude_m),
        "seed": int(seed),
        "blur_sigma": shared.blur_sigma,
        "noise_std": shared.noise_std,
        "color_gain": list(shared.color_gain),
        "color_offset": list(shared.color_offset),
        "jitter_px": shared.jitter_px,
    }


def _derived_seed(seed: int, scene: int, alt_index: int) -> int:
    return int(np.random.SeedSequence([seed, scene, alt_index]).generate_state(1)[0])


def generate_dataset(
    out_dir: Union[str, Path],
    n_scenes: int,
    profile: AltitudeProfile,
    cam: CameraModel,
    scale: float,
    seed: int,
    split: tuple,
    hr_size: tuple = (192, 192),
    burst_n: int = 7,
    scene_spec_template: Optional[SceneSpec] = None,
    workers: int = 1,
    **degrade_kwargs,
) -> dict:
    """Render the full dataset tree and return its manifest.

    Layout: out/{train,val,test}/scene_XXXX/alt_YYY/{hr.png, lr_00..png,
    meta.json}. Scene indices are assigned to splits in order. Regeneration
    with the same arguments is byte-identical.
    """
    if sum(split) != n_scenes:
        raise ValueError(f"split {split} does not sum to n_scenes={n_scenes}")
    out = Path(out_dir)
    hr_h, hr_w = hr_size
    split_names = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]

    def build_scene(scene_idx: int) -> list:
        scene_seed = _derived_seed(seed, scene_idx, 0xFFFF)
        spec = scene_spec_template or SceneSpec(seed=0)
        spec = SceneSpec(**{**spec.__dict__, "seed": scene_seed})
        rel_paths = []
        scene_dir = out / split_names[scene_idx] / f"scene_{scene_idx:04d}"
        for a_idx, alt in enumerate(profile.altitudes_m):
            alt_dir = scene_dir / f"alt_{int(alt):03d}"
            alt_dir.mkdir(parents=True, exist_ok=True)
            hr = render_scene(spec, alt, cam, hr_h, hr_w)
            d_seed = _derived_seed(seed, scene_idx, a_idx)
            frames, params = make_burst(
                hr, alt, cam, scale, burst_n, d_seed, **degrade_kwargs
            )
            save_png(hr, alt_dir / "hr.png")
            rel_paths.append(str((alt_dir / "hr.png").relative_to(out)))
            for i, frame in enumerate(frames):
                name = f"lr_{i:02d}.png"
                save_png(frame, alt_dir / name)
                rel_paths.append(str((alt_dir / name).relative_to(out)))
            _write_json(alt_dir / "meta.json", _meta_dict(alt, d_seed, params[0]))
            rel_paths.append(str((alt_dir / "meta.json").relative_to(out)))
        return rel_paths

    all_paths: list = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for paths in pool.map(build_scene, range(n_scenes)):
                all_paths.extend(paths)
    else:
        for s in range(n_scenes):
            all_paths.extend(build_scene(s))

    manifest = {
        "n_scenes": n_scenes,
        "split": list(split),
        "altitudes_m": [float(a) for a in profile.altitudes_m],
        "hr_size": [hr_h, hr_w],
        "scale": scale,
        "seed": seed,
        "burst_n": burst_n,
        "camera": {
            "focal_mm": cam.focal_mm,
            "pupil_mm": cam.pupil_mm,
            "fnumber": cam.fnumber,
            "coc_mm": cam.coc_mm,
            "pitch_mm": cam.pitch_mm,
            "noise_std": cam.noise_std,
            "native_px": cam.native_px,
        },
        "degrade_overrides": {k: v for k, v in sorted(degrade_kwargs.items())},
        "files": all_paths,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest
