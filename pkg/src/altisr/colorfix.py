"""Color and luminance correction between LR/HR pairs.

Two primitives (256-bin histogram matching and per-channel moment transfer)
plus their sequential combinations. Correction always maps the LR image
toward its (downscaled) HR reference, never the reverse.
"""

from __future__ import annotations

import enum

import numpy as np

from .imageops import Image

N_BINS = 256
_SIGMA_FLOOR = 1e-6


class ColorMode(enum.Enum):
    HM = "hm"
    CT = "ct"
    HM_CT = "hm_ct"
    CT_HM = "ct_hm"  # pipeline default


def _match_channel(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Monotone CDF mapping onto the reference's 256-bin histogram.

    Source quantiles are exact empirical mid-ranks (a pure function of pixel
    value, so ties map together and re-application is stable); the inverse
    reference CDF interpolates linearly between bin edges.
    """
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    ref_hist, _ = np.histogram(ref, bins=edges)
    ref_cdf = np.concatenate([[0.0], np.cumsum(ref_hist)]) / ref.size

    flat = src.reshape(-1)
    uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)[:-1]])
    quantile = (below + 0.5 * counts) / flat.size
    return np.interp(quantile[inverse], ref_cdf, edges).reshape(src.shape)


def histogram_match(src: Image, ref: Image) -> Image:
    if src.channels != ref.channels:
        raise ValueError("histogram_match: channel count mismatch")
    out = np.empty_like(src.data, dtype=np.float64)
    for c in range(src.channels):
        out[:, :, c] = _match_channel(
            src.data[:, :, c].astype(np.float64), ref.data[:, :, c].astype(np.float64)
        )
    return Image(out, src.space)


def color_transfer(src: Image, ref: Image) -> Image:
    """Per-channel affine moment matching: out = (src - mu_s) * (sd_r/sd_s) + mu_r.

    Channels with degenerate source spread map to the reference mean.
    """
    if src.channels != ref.channels:
        raise ValueError("color_transfer: channel count mismatch")
    out = np.empty_like(src.data, dtype=np.float64)
    for c in range(src.channels):
        s = src.data[:, :, c].astype(np.float64)
        r = ref.data[:, :, c].astype(np.float64)
        mu_s, sd_s = s.mean(), s.std()
        mu_r, sd_r = r.mean(), r.std()
        if sd_s < _SIGMA_FLOOR:
            out[:, :, c] = mu_r
        else:
            out[:, :, c] = (s - mu_s) * (sd_r / sd_s) + mu_r
    return Image(out, src.space)


def correct(src: Image, ref: Image, mode: ColorMode) -> Image:
    if mode == ColorMode.HM:
        return histogram_match(src, ref)
    if mode == ColorMode.CT:
        return color_transfer(src, ref)
    if mode == ColorMode.HM_CT:
        return color_transfer(histogram_match(src, ref), ref)
    if mode == ColorMode.CT_HM:
        return histogram_match(color_transfer(src, ref), ref)
    raise ValueError(f"unknown color mode: {mode!r}")
