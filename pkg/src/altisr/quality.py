"""Image quality metrics and radial power-spectrum analysis.

All pairwise metrics operate on single-channel (Y) images in [0,1] with a
peak of 1. PSNR of identical inputs is the +inf sentinel, serialized as the
string "inf" in reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageops import Image, y_plane

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GMSD_C = 0.0026  # gradient-similarity constant at unit dynamic range


@dataclass
class MetricReport:
    """PSNR/SSIM/GMSD of one image pair, evaluated on the Y plane."""

    psnr: float
    ssim: float
    gmsd: float
    pixels: int
    evaluated_on: str = "Y"

    @classmethod
    def measure(cls, a: Image, b: Image) -> "MetricReport":
        ya, yb = y_plane(a), y_plane(b)
        return cls(
            psnr=psnr(ya, yb),
            ssim=ssim(ya, yb),
            gmsd=gmsd(ya, yb),
            pixels=ya.height * ya.width,
        )


@dataclass
class PsdProfile:
    """Radially averaged power spectrum plus a high-frequency energy ratio."""

    freqs: np.ndarray  # cycles per image, one per radial bin
    log_power: np.ndarray  # log10 of mean power per bin
    hf_ratio: float  # energy above cutoff / total non-DC energy
    cutoff: float  # as a fraction of Nyquist
    side: int  # analyzed square side (power of two)
    total_power: float = 0.0  # sum of |DFT|^2 over all frequency samples


def _y_f64(img: Image) -> np.ndarray:
    if img.channels != 1:
        raise ValueError("metric inputs must be single-channel Y images")
    return img.data[:, :, 0].astype(np.float64)


def _pair(a: Image, b: Image):
    ya, yb = _y_f64(a), _y_f64(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    return ya, yb


def psnr(a: Image, b: Image) -> float:
    ya, yb = _pair(a, b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g1, g1)
    return win / win.sum()


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1/K2 = 0.01/0.03."""
    ya, yb = _pair(a, b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}px per side")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("hwij,ij->hw", win, w)

    mu_a = filt(ya)
    mu_b = filt(yb)
    var_a = filt(ya * ya) - mu_a * mu_a
    var_b = filt(yb * yb) - mu_b * mu_b
    cov = filt(ya * yb) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _prewitt(y: np.ndarray):
    """Valid-region Prewitt gradients (kernels normalized by 1/3)."""
    col = y[:-2] + y[1:-1] + y[2:]
    gx = (col[:, :-2] - col[:, 2:]) / 3.0
    row = y[:, :-2] + y[:, 1:-1] + y[:, 2:]
    gy = (row[:-2] - row[2:]) / 3.0
    return gx, gy


def gmsd(a: Image, b: Image) -> float:
    """Gradient-magnitude similarity deviation; larger means more distortion."""
    ya, yb = _pair(a, b)
    if min(ya.shape) < 3:
        raise ValueError("gmsd needs images of at least 3px per side")
    gxa, gya = _prewitt(ya)
    gxb, gyb = _prewitt(yb)
    ma = np.sqrt(gxa * gxa + gya * gya)
    mb = np.sqrt(gxb * gxb + gyb * gyb)
    gms = (2.0 * ma * mb + GMSD_C) / (ma * ma + mb * mb + GMSD_C)
    return float(np.std(gms))


def ncc(a: Image, b: Image) -> float:
    """Zero-mean correlation coefficient over all pixels, in [-1, 1]."""
    ya, yb = _pair(a, b)
    da = ya - ya.mean()
    db = yb - yb.mean()
    sa = float(np.sqrt(np.sum(da * da)))
    sb = float(np.sqrt(np.sum(db * db)))
    if sa == 0.0 and sb == 0.0:
        raise ValueError("ncc undefined: both images are constant")
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.sum(da * db) / (sa * sb))


def _pow2_floor(n: int) -> int:
    return 1 << (n.bit_length() - 1)


def psd_profile(img: Image, cutoff: float = 0.25) -> PsdProfile:
    """Radial PSD of the (center-cropped, power-of-two) Y plane.

    The high-frequency ratio is the power at radial frequency >= cutoff *
    Nyquist divided by the total non-DC power.
    """
    y = _y_f64(y_plane(img) if img.channels == 3 else img)
    side = _pow2_floor(min(y.shape))
    if side < 2:
        raise ValueError("psd_profile needs at least a 2x2 image")
    y0 = (y.shape[0] - side) // 2
    x0 = (y.shape[1] - side) // 2
    y = y[y0 : y0 + side, x0 : x0 + side]

    spectrum = np.fft.fft2(y)
    power = np.abs(spectrum) ** 2
    k = np.fft.fftfreq(side) * side  # integer cycles per image
    radius = np.hypot(k[:, None], k[None, :])

    nbins = side // 2
    bins = np.minimum(np.round(radius).astype(np.int64), nbins - 1)
    bin_power = np.bincount(bins.ravel(), weights=power.ravel(), minlength=nbins)
    bin_count = np.bincount(bins.ravel(), minlength=nbins)
    mean_power = bin_power / np.maximum(bin_count, 1)

    non_dc = radius > 0.0
    total = float(power[non_dc].sum())
    high = float(power[non_dc & (radius >= cutoff * nbins)].sum())
    ratio = high / total if total > 0.0 else 0.0

    return PsdProfile(
        freqs=np.arange(nbins, dtype=np.float64),
        log_power=np.log10(mean_power + 1e-20),
        hf_ratio=ratio,
        cutoff=cutoff,
        side=side,
        total_power=float(power.sum()),
    )


def burst_compare(frames: list) -> tuple:
    """Pairwise PSNR and SSIM matrices for a burst of equal-shape frames."""
    if len(frames) < 2:
        raise ValueError("burst_compare needs at least two frames")
    planes = [y_plane(f) for f in frames]
    n = len(planes)
    psnr_mat = np.full((n, n), math.inf)
    ssim_mat = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            p = psnr(planes[i], planes[j])
            s = ssim(planes[i], planes[j])
            psnr_mat[i, j] = psnr_mat[j, i] = p
            ssim_mat[i, j] = ssim_mat[j, i] = s
    return psnr_mat, ssim_mat


def format_metric(value: float) -> str:
    """Fixed-point report formatting; infinities serialize as 'inf'."""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


PAIR_CSV_HEADER = "scene,altitude_m,method,psnr_db,ssim,gmsd"


def pair_csv_row(scene: str, altitude_m: float, method: str, report: MetricReport) -> str:
    return ",".join(
        [
            scene,
            f"{altitude_m:g}",
            method,
            format_metric(report.psnr),
            format_metric(report.ssim),
            format_metric(report.gmsd),
        ]
    )
