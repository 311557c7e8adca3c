"""Image representation, color conversion, resizing, patches, augmentation.

Images are H x W x C float32 rasters in [0, 1] with a color-space tag.
Resizing follows the MATLAB imresize conventions: center-aligned sampling,
the a = -0.5 cubic kernel, and kernel-width scaling (anti-aliasing) when
downscaling. All operations here are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image as PILImage

RGB = "RGB"
Y = "Y"


class Image:
    """Float raster in [0,1] with 1 (Y) or 3 (RGB) channels."""

    __slots__ = ("data", "space")

    def __init__(self, data: np.ndarray, space: str):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
        if space not in (RGB, Y):
            raise ValueError(f"unknown color space {space!r}")
        if space == Y and arr.shape[2] != 1:
            raise ValueError("Y images must have exactly one channel")
        if space == RGB and arr.shape[2] != 3:
            raise ValueError("RGB images must have exactly three channels")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        self.data = np.clip(arr, 0.0, 1.0).astype(np.float32)
        self.space = space

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "Image":
        return Image(self.data.copy(), self.space)

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width}x{self.channels}, {self.space})"


@dataclass
class PatchGrid:
    """Sliding-window patch origins, all fully inside the source image."""

    size: int
    stride: int
    origins: list = field(default_factory=list)  # (x, y) top-left corners

    def __len__(self) -> int:
        return len(self.origins)


def to_y(img: Image, full_range: bool = False) -> Image:
    """Luma plane of an RGB image.

    Default is the BT.601 studio-swing convention used throughout the
    super-resolution literature: Y = (16 + 65.481 R + 128.553 G + 24.966 B)/255,
    so outputs live in [16/255, 235/255]. ``full_range`` switches to the
    plain 0.299/0.587/0.114 weighting for cross-checks against other tools.
    """
    if img.space != RGB:
        raise ValueError("to_y expects an RGB image")
    r = img.data[:, :, 0].astype(np.float64)
    g = img.data[:, :, 1].astype(np.float64)
    b = img.data[:, :, 2].astype(np.float64)
    if full_range:
        y = 0.299 * r + 0.587 * g + 0.114 * b
    else:
        y = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    return Image(y, Y)


def y_plane(img: Image) -> Image:
    return img if img.space == Y else to_y(img)


def _cubic(x: np.ndarray) -> np.ndarray:
    # Keys cubic kernel with a = -0.5.
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    return (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1.0) + (
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    ) * ((ax > 1.0) & (ax <= 2.0))


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


_KERNELS = {"bicubic": (_cubic, 4.0), "bilinear": (_triangle, 2.0)}


def resize_weights(in_len: int, out_len: int, method: str):
    """Per-axis sample indices and weights, MATLAB imresize style.

    Returns (indices, weights) of shape [out_len, taps]; indices are clamped
    to the valid range (replicated borders) and each weight row sums to 1.
    """
    scale = out_len / in_len
    # 0-based center-aligned source coordinate of each output sample.
    u = (np.arange(out_len) + 0.5) / scale - 0.5

    if method == "nearest":
        idx = np.ceil(u - 0.5).astype(np.int64)  # round half down
        idx = np.clip(idx, 0, in_len - 1)
        return idx[:, None], np.ones((out_len, 1))

    kernel, width = _KERNELS[method]
    if scale < 1.0:
        # Anti-aliasing: stretch the kernel to cover the source footprint.
        stretched = lambda x: scale * kernel(scale * x)
        width = width / scale
        kfun = stretched
    else:
        kfun = kernel

    taps = int(math.ceil(width)) + 2
    left = np.floor(u - width / 2.0).astype(np.int64)
    idx = left[:, None] + np.arange(1, taps + 1)
    weights = kfun(u[:, None] - idx)
    weights = weights / weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    keep = ~np.all(weights == 0.0, axis=0)
    return idx[:, keep], weights[:, keep]


def _resize_axis0(arr: np.ndarray, out_len: int, method: str) -> np.ndarray:
    idx, w = resize_weights(arr.shape[0], out_len, method)
    gathered = arr[idx]  # [out, taps, ...]
    return np.einsum("ot...,ot->o...", gathered, w)


def resize(img: Image, out_h: int, out_w: int, method: str) -> Image:
    """Resample to (out_h, out_w) with nearest, bilinear, or bicubic."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be at least 1x1")
    if method not in ("nearest", "bilinear", "bicubic"):
        raise ValueError(f"unknown resize method {method!r}")
    data = img.data.astype(np.float64)
    if out_h != img.height:
        data = _resize_axis0(data, out_h, method)
    if out_w != img.width:
        data = np.swapaxes(_resize_axis0(np.swapaxes(data, 0, 1), out_w, method), 0, 1)
    return Image(data, img.space)


def extract_patches(img: Image, size: int, stride: int):
    """All size x size windows on a stride grid, no padding.

    A patch size larger than the image yields an empty grid; a size of zero
    is an error.
    """
    if size <= 0:
        raise ValueError("patch size must be positive")
    if stride <= 0:
        raise ValueError("patch stride must be positive")
    grid = PatchGrid(size=size, stride=stride)
    patches: list[Image] = []
    for y in range(0, img.height - size + 1, stride):
        for x in range(0, img.width - size + 1, stride):
            grid.origins.append((x, y))
            patches.append(Image(img.data[y : y + size, x : x + size], img.space))
    return grid, patches


def augment(img: Image, rot: int, flip: bool) -> Image:
    """Lossless dihedral-group pixel permutation: rotate then mirror."""
    if rot not in (0, 90, 180, 270):
        raise ValueError(f"rotation must be one of 0/90/180/270, got {rot}")
    data = np.rot90(img.data, k=rot // 90, axes=(0, 1))
    if flip:
        data = data[:, ::-1]
    return Image(np.ascontiguousarray(data), img.space)


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with reflect padding; sigma 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return img.copy()
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    def blur_axis0(arr: np.ndarray) -> np.ndarray:
        padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=0)
        return np.einsum("hwck,k->hwc", win, kernel)

    data = img.data.astype(np.float64)
    data = blur_axis0(data)
    data = np.swapaxes(blur_axis0(np.swapaxes(data, 0, 1)), 0, 1)
    return Image(data, img.space)


def save_png(img: Image, path: Union[str, Path]) -> None:
    """8-bit PNG; values are rounded half-up to the 0..255 grid."""
    u8 = np.floor(img.data.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(u8[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(u8, mode="RGB")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    pil.save(tmp, format="PNG")
    tmp.replace(path)


def load_png(path: Union[str, Path]) -> Image:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil)
    if arr.ndim == 2:
        return Image(arr.astype(np.float32) / 255.0, Y)
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return Image(arr.astype(np.float32) / 255.0, RGB)
