"""Geometric registration between LR and HR views.

Feature correspondence uses multi-scale Harris corners with normalized
8x8 intensity descriptors (mutual nearest neighbor, ratio test 0.8), which
gives homography-grade matches without external dependencies and stays
deterministic. Homographies are 3x3 with the bottom-right entry fixed to 1
and map input coordinates to output coordinates; warping inverse-maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .imageops import Image, resize, y_plane
from .quality import ncc

RATIO_TEST = 0.8
PYRAMID_LEVELS = 3
MIN_IMAGE_SIDE = 32
DESCRIPTOR_SIZE = 8
MAX_CORNERS_PER_LEVEL = 500
HARRIS_K = 0.04


class RegistrationError(Exception):
    """Registration could not produce a usable geometric model."""


class InsufficientCorrespondences(RegistrationError):
    pass


class DegenerateGeometry(RegistrationError):
    pass


@dataclass
class Correspondence:
    point_a: tuple  # (x, y), sub-pixel, in image A
    point_b: tuple  # (x, y), sub-pixel, in image B
    score: float  # descriptor correlation in [-1, 1]


@dataclass
class AlignedPair:
    """One LR patch with its locally aligned HR counterpart."""

    lr: Image
    hr: Image
    altitude_m: float
    ncc: float
    scene: str
    patch_index: int
    source_rect: tuple  # (x, y, size) of the LR patch inside the matched FOV


@dataclass
class AlignStats:
    total: int = 0
    kept: int = 0
    dropped_low_ncc: int = 0
    registration_failures: int = 0
    ncc_values: list = field(default_factory=list)


def _as_rng(seed: Union[int, np.random.Generator]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# --- homography algebra -----------------------------------------------------


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateGeometry("homography has a vanishing scale entry")
    return h / h[2, 2]


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ h.T
    w = proj[:, 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometry("point maps to infinity under homography")
    return proj[:, :2] / w


def invert_homography(h: np.ndarray) -> np.ndarray:
    try:
        inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometry("homography is singular") from exc
    return normalize_homography(inv)


def _affine(sx: float, sy: float, tx: float, ty: float) -> np.ndarray:
    return np.array([[sx, 0.0, tx], [0.0, sy, ty], [0.0, 0.0, 1.0]])


def _center_scale(sx: float, sy: float) -> np.ndarray:
    # Center-aligned resampling map: p_out = (p_in + 0.5) * s - 0.5.
    return _affine(sx, sy, 0.5 * sx - 0.5, 0.5 * sy - 0.5)


# --- feature detection and matching -----------------------------------------


def _smooth3(arr: np.ndarray) -> np.ndarray:
    """3x3 binomial smoothing with replicated borders."""
    p = np.pad(arr, 1, mode="edge")
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    win = np.lib.stride_tricks.sliding_window_view(p, 3, axis=0)
    arr = np.einsum("hwk,k->hw", win, k)
    win = np.lib.stride_tricks.sliding_window_view(arr, 3, axis=1)
    return np.einsum("hwk,k->hw", win, k)


def _harris_response(gray: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2.0
    gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) / 2.0
    sxx = _smooth3(_smooth3(gx * gx))
    syy = _smooth3(_smooth3(gy * gy))
    sxy = _smooth3(_smooth3(gx * gy))
    trace = sxx + syy
    return sxx * syy - sxy * sxy - HARRIS_K * trace * trace


def _local_maxima(resp: np.ndarray, radius: int = 2) -> np.ndarray:
    padded = np.pad(resp, radius, mode="constant", constant_values=-np.inf)
    best = resp.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx == 0 and dy == 0:
                continue
            shifted = padded[
                radius + dy : radius + dy + resp.shape[0],
                radius + dx : radius + dx + resp.shape[1],
            ]
            best = np.maximum(best, shifted)
    return resp >= best


def _parabolic_offset(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if abs(denom) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def _bilinear_sample(gray: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = gray[y0, x0] * (1 - fx) + gray[y0, x1] * fx
    bot = gray[y1, x0] * (1 - fx) + gray[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _detect_level(gray: np.ndarray):
    """Corners (sub-pixel) and normalized 8x8 descriptors for one level."""
    resp = _harris_response(gray)
    peak = resp.max()
    if peak <= 1e-12:
        return np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_SIZE**2)), np.zeros(0)
    margin = DESCRIPTOR_SIZE // 2 + 2
    candidates = (resp > 0.005 * peak) & _local_maxima(resp)
    candidates[:margin] = candidates[-margin:] = False
    candidates[:, :margin] = candidates[:, -margin:] = False
    ys, xs = np.nonzero(candidates)
    if ys.size == 0:
        return np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_SIZE**2)), np.zeros(0)
    order = np.argsort(-resp[ys, xs], kind="stable")[:MAX_CORNERS_PER_LEVEL]
    ys, xs = ys[order], xs[order]

    pts = []
    descs = []
    strengths = []
    offs = np.arange(DESCRIPTOR_SIZE) - (DESCRIPTOR_SIZE - 1) / 2.0
    gx, gy = np.meshgrid(offs, offs)
    for y, x in zip(ys, xs):
        sx = x + _parabolic_offset(resp[y, x - 1], resp[y, x], resp[y, x + 1])
        sy = y + _parabolic_offset(resp[y - 1, x], resp[y, x], resp[y + 1, x])
        patch = _bilinear_sample(gray, sx + gx.ravel(), sy + gy.ravel())
        std = patch.std()
        if std < 1e-6:
            continue
        descs.append((patch - patch.mean()) / std)
        pts.append((sx, sy))
        strengths.append(resp[y, x])
    if not pts:
        return np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_SIZE**2)), np.zeros(0)
    return np.array(pts), np.array(descs), np.array(strengths)


def _detect_multiscale(img: Image):
    gray = y_plane(img).data[:, :, 0].astype(np.float64)
    pts_all, descs_all = [], []
    level_img = gray
    base_h, base_w = gray.shape
    for _ in range(PYRAMID_LEVELS):
        h, w = level_img.shape
        if min(h, w) < MIN_IMAGE_SIDE:
            break
        pts, descs, _ = _detect_level(level_img)
        if pts.size:
            # Map level coordinates back to the base frame (center-aligned).
            rx, ry = w / base_w, h / base_h
            base = np.empty_like(pts)
            base[:, 0] = (pts[:, 0] + 0.5) / rx - 0.5
            base[:, 1] = (pts[:, 1] + 0.5) / ry - 0.5
            pts_all.append(base)
            descs_all.append(descs)
        nh, nw = h // 2, w // 2
        if min(nh, nw) < MIN_IMAGE_SIDE:
            break
        level_img = resize(Image(level_img, "Y"), nh, nw, "bilinear").data[:, :, 0].astype(np.float64)
    if not pts_all:
        return np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_SIZE**2))
    return np.vstack(pts_all), np.vstack(descs_all)


def detect_and_match(a: Image, b: Image) -> list:
    """Mutual nearest-neighbor correspondences between two views.

    Raises :class:`InsufficientCorrespondences` when fewer than four matches
    survive the ratio test.
    """
    if min(a.height, a.width) < MIN_IMAGE_SIDE or min(b.height, b.width) < MIN_IMAGE_SIDE:
        raise ValueError(f"detect_and_match needs images of at least {MIN_IMAGE_SIDE}px per side")
    pts_a, desc_a = _detect_multiscale(a)
    pts_b, desc_b = _detect_multiscale(b)
    if len(pts_a) < 4 or len(pts_b) < 4:
        raise InsufficientCorrespondences(
            f"too few corners: {len(pts_a)} in A, {len(pts_b)} in B"
        )

    # Squared distances between normalized descriptors.
    sq_a = (desc_a**2).sum(axis=1)[:, None]
    sq_b = (desc_b**2).sum(axis=1)[None, :]
    d2 = np.maximum(sq_a + sq_b - 2.0 * desc_a @ desc_b.T, 0.0)

    best_b = np.argmin(d2, axis=1)
    best_a = np.argmin(d2, axis=0)
    matches = []
    n_desc = DESCRIPTOR_SIZE**2
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        row = d2[i]
        d1 = math.sqrt(row[j])
        row_rest = np.delete(row, j)
        d2nd = math.sqrt(row_rest.min()) if row_rest.size else math.inf
        if d1 >= RATIO_TEST * d2nd:
            continue
        score = float(desc_a[i] @ desc_b[j]) / n_desc
        matches.append(
            Correspondence(tuple(pts_a[i]), tuple(pts_b[j]), score)
        )
    matches.sort(key=lambda m: (-m.score, m.point_a[0], m.point_a[1]))
    if len(matches) < 4:
        raise InsufficientCorrespondences(f"only {len(matches)} matches after filtering")
    return matches


# --- homography estimation ---------------------------------------------------


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateGeometry("coincident points")
    s = math.sqrt(2.0) / dist
    return _affine(s, s, -s * centroid[0], -s * centroid[1])


def fit_homography_dlt(matches: Sequence[Correspondence]) -> np.ndarray:
    """Hartley-normalized direct linear transform, least squares over all matches."""
    if len(matches) < 4:
        raise InsufficientCorrespondences(f"DLT needs at least 4 matches, got {len(matches)}")
    src = np.array([m.point_a for m in matches], dtype=np.float64)
    dst = np.array([m.point_b for m in matches], dtype=np.float64)
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    ns = apply_homography(t_src, src)
    nd = apply_homography(t_dst, dst)

    rows = []
    for (x, y), (u, v) in zip(ns, nd):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    a = np.array(rows)
    _, s, vt = np.linalg.svd(a)
    # A homography needs rank 8; the 8th singular value vanishing means the
    # configuration (e.g. three collinear points) cannot pin one down.
    if s[7] < 1e-8 * s[0]:
        raise DegenerateGeometry("rank-deficient correspondence configuration")
    hn = vt[-1].reshape(3, 3)
    h = invert_homography(t_dst) @ hn @ t_src
    return normalize_homography(h)


def ransac_homography(
    matches: Sequence[Correspondence],
    iterations: int,
    threshold_px: float,
    seed: Union[int, np.random.Generator] = 0,
    confidence: Optional[float] = None,
):
    """Robust homography fit; returns (H, inlier mask).

    The consensus model is refit on all of its inliers with the DLT. With
    ``confidence`` set, iteration stops early once the best inlier ratio makes
    further sampling pointless; results stay deterministic for a fixed seed.
    """
    n = len(matches)
    if n < 4:
        raise InsufficientCorrespondences(f"RANSAC needs at least 4 matches, got {n}")
    rng = _as_rng(seed)
    src = np.array([m.point_a for m in matches], dtype=np.float64)
    dst = np.array([m.point_b for m in matches], dtype=np.float64)

    def symmetric_errors(h: np.ndarray) -> np.ndarray:
        fwd = apply_homography(h, src) - dst
        bwd = apply_homography(invert_homography(h), dst) - src
        return 0.5 * (
            np.sqrt((fwd**2).sum(axis=1)) + np.sqrt((bwd**2).sum(axis=1))
        )

    best_mask = None
    best_count = 3
    best_err = math.inf
    max_iter = iterations
    it = 0
    while it < max_iter:
        it += 1
        pick = rng.choice(n, size=4, replace=False)
        try:
            h = fit_homography_dlt([matches[i] for i in pick])
            err = symmetric_errors(h)
        except DegenerateGeometry:
            continue
        mask = err < threshold_px
        count = int(mask.sum())
        score = float(err[mask].sum()) if count else math.inf
        if count > best_count or (count == best_count and score < best_err):
            best_mask = mask
            best_count = count
            best_err = score
            if confidence is not None and 0 < confidence < 1:
                ratio = count / n
                if ratio >= 1.0:
                    break
                denom = math.log(max(1.0 - ratio**4, 1e-12))
                needed = math.ceil(math.log(1.0 - confidence) / denom)
                max_iter = min(max_iter, max(it, needed))

    if best_mask is None:
        raise RegistrationError("RANSAC found no model with at least 4 inliers")

    inliers = [m for m, keep in zip(matches, best_mask) if keep]
    try:
        h = fit_homography_dlt(inliers)
        mask = symmetric_errors(h) < threshold_px
        if int(mask.sum()) >= 4:
            return h, mask
    except DegenerateGeometry:
        pass
    return fit_homography_dlt(inliers), best_mask


# --- warping ------------------------------------------------------------------


def warp(img: Image, h: np.ndarray, out_h: int, out_w: int, method: str = "bilinear"):
    """Inverse-map ``img`` through ``h`` onto an (out_h, out_w) canvas.

    ``h`` maps input coordinates to output coordinates. Returns the warped
    image and a validity mask; samples falling outside the source are zero.
    """
    if method != "bilinear":
        raise ValueError("warp supports bilinear sampling only")
    hinv = invert_homography(normalize_homography(h))
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = apply_homography(hinv, pts)
    sx = src[:, 0].reshape(out_h, out_w)
    sy = src[:, 1].reshape(out_h, out_w)
    valid = (sx >= 0.0) & (sx <= img.width - 1.0) & (sy >= 0.0) & (sy <= img.height - 1.0)

    data = img.data.astype(np.float64)
    out = np.zeros((out_h, out_w, img.channels))
    for c in range(img.channels):
        plane = _bilinear_sample(data[:, :, c], sx.ravel(), sy.ravel()).reshape(out_h, out_w)
        out[:, :, c] = np.where(valid, plane, 0.0)
    return Image(out, img.space), valid


# --- FOV matching and local alignment ----------------------------------------


def match_fov(
    lr: Image,
    hr: Image,
    scale: float,
    seed: Union[int, np.random.Generator] = 0,
    fov_size: Optional[tuple] = None,
    iterations: int = 2000,
    threshold_px: float = 3.0,
    confidence: Optional[float] = 0.9999,
):
    """Locate the HR footprint inside the LR frame and crop/resize it.

    Returns (fov image, source rect) where the rect is (x, y, w, h) in LR
    pixels. The output size defaults to the HR size divided by ``scale``
    (e.g. 4000x3000 at scale 50/9 gives the fixed 720x540) and uses
    nearest-neighbor resampling.
    """
    if fov_size is None:
        fov_w = int(round(hr.width / scale))
        fov_h = int(round(hr.height / scale))
    else:
        fov_w, fov_h = fov_size
    small_h = int(round(hr.height / scale))
    small_w = int(round(hr.width / scale))
    hr_small = resize(hr, small_h, small_w, "bicubic")

    matches = detect_and_match(hr_small, lr)
    h, _ = ransac_homography(matches, iterations, threshold_px, seed, confidence)

    corners = np.array(
        [[0.0, 0.0], [small_w - 1.0, 0.0], [small_w - 1.0, small_h - 1.0], [0.0, small_h - 1.0]]
    )
    footprint = apply_homography(h, corners)
    x0 = int(np.clip(math.floor(footprint[:, 0].min()), 0, lr.width - 1))
    y0 = int(np.clip(math.floor(footprint[:, 1].min()), 0, lr.height - 1))
    x1 = int(np.clip(math.ceil(footprint[:, 0].max()), x0 + 1, lr.width - 1))
    y1 = int(np.clip(math.ceil(footprint[:, 1].max()), y0 + 1, lr.height - 1))
    crop = Image(lr.data[y0 : y1 + 1, x0 : x1 + 1], lr.space)
    fov = resize(crop, fov_h, fov_w, "nearest")
    return fov, (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def local_align_and_filter(
    lr_fov: Image,
    hr: Image,
    scale: float,
    ncc_min: float = 0.9,
    patch_size: int = 180,
    stride: Optional[int] = None,
    margin: int = 8,
    altitude_m: float = 0.0,
    scene: str = "",
    seed: Union[int, np.random.Generator] = 0,
    iterations: int = 2000,
    threshold_px: float = 3.0,
    confidence: Optional[float] = 0.9999,
):
    """Per-patch homography alignment with an NCC quality gate.

    Each LR patch is paired with the HR region it should correspond to; the
    region (plus margin context) is registered against the patch, warped to
    a (patch_size * scale)^2 canvas, and kept when the NCC between the patch
    and the bicubic-downscaled aligned HR reaches ``ncc_min`` on Y. Patches
    whose local registration fails are dropped and counted.
    """
    if scale <= 1.0:
        raise ValueError("scale must exceed 1")
    if not 0.0 < ncc_min <= 1.0:
        raise ValueError("ncc_min must lie in (0, 1]")
    stride = patch_size if stride is None else stride
    hr_patch = int(round(patch_size * scale))

    # The alignment canvas carries a ring of context so the bicubic
    # downsample used for NCC sees real neighbors instead of clamped edges.
    # The pad is chosen to keep pad * scale integral (exact canvas geometry).
    denom = Fraction(scale).limit_denominator(10000).denominator
    pad = denom * math.ceil(4 / denom)
    pad_hr = int(round(pad * scale))
    margin = max(margin, pad + 6)
    canvas_lr = patch_size + 2 * pad
    canvas_hr = hr_patch + 2 * pad_hr
    rng = _as_rng(seed)

    pairs: list[AlignedPair] = []
    stats = AlignStats()
    index = -1
    for y0 in range(0, lr_fov.height - patch_size + 1, stride):
        for x0 in range(0, lr_fov.width - patch_size + 1, stride):
            index += 1
            stats.total += 1
            lr_patch = Image(
                lr_fov.data[y0 : y0 + patch_size, x0 : x0 + patch_size], lr_fov.space
            )

            wx0 = max(0, x0 - margin)
            wy0 = max(0, y0 - margin)
            wx1 = min(lr_fov.width, x0 + patch_size + margin)
            wy1 = min(lr_fov.height, y0 + patch_size + margin)
            lr_win = Image(lr_fov.data[wy0:wy1, wx0:wx1], lr_fov.space)

            # HR region covering the window, with slack for the jitter the
            # local homography must take up.
            slack = 2.0 * scale
            hx0 = max(0, int(math.floor((wx0 + 0.5) * scale - 0.5 - slack)))
            hy0 = max(0, int(math.floor((wy0 + 0.5) * scale - 0.5 - slack)))
            hx1 = min(hr.width, int(math.ceil((wx1 - 0.5) * scale - 0.5 + slack)) + 1)
            hy1 = min(hr.height, int(math.ceil((wy1 - 0.5) * scale - 0.5 + slack)) + 1)
            hr_crop = Image(hr.data[hy0:hy1, hx0:hx1], hr.space)

            small_h = max(1, int(round(hr_crop.height / scale)))
            small_w = max(1, int(round(hr_crop.width / scale)))
            to_small = _center_scale(small_w / hr_crop.width, small_h / hr_crop.height)

            # The global FOV alignment implies a prior map; the locally
            # estimated homography must beat it on NCC to be used. When the
            # local estimate cannot be computed the prior still competes, so
            # the NCC gate stays the only arbiter of keep/drop.
            prior = (
                _affine(1.0, 1.0, -wx0, -wy0)
                @ _center_scale(1.0 / scale, 1.0 / scale)
                @ _affine(1.0, 1.0, hx0, hy0)
                @ np.linalg.inv(to_small)
            )
            candidates = [prior]
            try:
                hr_small = resize(hr_crop, small_h, small_w, "bicubic")
                matches = detect_and_match(hr_small, lr_win)
                h_small, _ = ransac_homography(
                    matches, iterations, threshold_px, rng, confidence
                )
                candidates.append(h_small)
            except (RegistrationError, ValueError):
                stats.registration_failures += 1

            # Replicate-pad the HR crop so canvas samples just outside it use
            # border values, matching the resize border convention.
            padded = np.pad(
                hr_crop.data, ((pad_hr, pad_hr), (pad_hr, pad_hr), (0, 0)), mode="edge"
            )
            hr_padded = Image(padded, hr_crop.space)
            crop_to_padded = _affine(1.0, 1.0, pad_hr, pad_hr)

            # Compose: padded crop -> crop -> hr_small -> lr window -> padded
            # patch-local LR -> aligned canvas coordinates.
            win_to_canvas = _affine(1.0, 1.0, wx0 - (x0 - pad), wy0 - (y0 - pad))
            up = _center_scale(canvas_hr / canvas_lr, canvas_hr / canvas_lr)

            score = -math.inf
            aligned = None
            for cand in candidates:
                h_full = (
                    up @ win_to_canvas @ cand @ to_small @ np.linalg.inv(crop_to_padded)
                )
                try:
                    canvas, _ = warp(hr_padded, h_full, canvas_hr, canvas_hr)
                    down_full = resize(canvas, canvas_lr, canvas_lr, "bicubic")
                    cand_down = Image(
                        down_full.data[pad : pad + patch_size, pad : pad + patch_size],
                        down_full.space,
                    )
                    cand_score = ncc(y_plane(lr_patch), y_plane(cand_down))
                except (RegistrationError, ValueError):
                    continue
                if cand_score > score:
                    score = cand_score
                    aligned = Image(
                        canvas.data[
                            pad_hr : pad_hr + hr_patch, pad_hr : pad_hr + hr_patch
                        ],
                        canvas.space,
                    )
            if aligned is None or score < ncc_min:
                stats.dropped_low_ncc += 1
                continue
            stats.kept += 1
            stats.ncc_values.append(score)
            pairs.append(
                AlignedPair(
                    lr=lr_patch,
                    hr=aligned,
                    altitude_m=altitude_m,
                    ncc=score,
                    scene=scene,
                    patch_index=index,
                    source_rect=(x0, y0, patch_size),
                )
            )
    return pairs, stats
