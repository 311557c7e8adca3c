"""Residual CNN super-resolver, altitude-aware variant, and training loops.

The plain network bicubic-upsamples the LR input, runs it through a stack of
3x3 conv+ReLU layers (one input conv, ``depth`` hidden convs, one linear
output conv) and adds the upsampled input back, so it only learns the
residual. The altitude-aware variant inserts one altitude-conditioned layer
after each hidden conv: a generated depthwise kernel branch plus a sigmoid
channel-attention branch, both driven by an encoded altitude.

Training minimizes L1 with ADAM; the learning rate halves on a fixed epoch
period. Output clamping happens only when materializing images, never inside
the loss path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .imageops import Image, augment, resize
from .quality import MetricReport
from .register import AlignedPair

ALTITUDE_NORM_M = 80.0  # altitudes are divided by this before encoding
PRETRAIN_ALTITUDE_M = ALTITUDE_NORM_M  # altitude-less corpora encode as 1.0


@dataclass
class SrNetConfig:
    depth: int = 8  # hidden conv+ReLU layers
    channels: int = 128
    kernel: int = 3
    scale: float = 50.0 / 9.0
    upsample: str = "bicubic"

    def __post_init__(self):
        if self.depth < 1 or self.channels < 1:
            raise ValueError("depth and channels must be at least 1")
        if self.scale <= 1.0:
            raise ValueError("scale must exceed 1")

    @classmethod
    def desk(cls) -> "SrNetConfig":
        return cls(depth=4, channels=16, scale=2.0)


@dataclass
class TrainConfig:
    mode: str  # pretrain | finetune_all | finetune_alt
    base_lr: float
    epochs: int
    halve_every: int
    batch_size: int = 16
    crop_hr: int = 300
    augment: bool = True
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # None runs a full pass

    @classmethod
    def paper_pretrain(cls, **kw) -> "TrainConfig":
        return cls(mode="pretrain", base_lr=1e-4, epochs=1000, halve_every=200, **kw)

    @classmethod
    def paper_finetune_all(cls, **kw) -> "TrainConfig":
        return cls(mode="finetune_all", base_lr=1e-5, epochs=100, halve_every=20, **kw)

    @classmethod
    def paper_finetune_alt(cls, **kw) -> "TrainConfig":
        return cls(mode="finetune_alt", base_lr=1e-5, epochs=500, halve_every=100, **kw)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.base_lr * 0.5 ** (epoch // cfg.halve_every)


# --- parameter initialization -------------------------------------------------


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_simple_params(cfg: SrNetConfig, seed: int = 0) -> nc.ParamSet:
    """Kaiming-uniform convs, zero biases, zero-initialized output conv.

    The zero output conv makes a fresh network reproduce the bicubic
    upsample exactly, so training starts at the interpolation baseline.
    """
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    c = cfg.channels
    params = nc.ParamSet()
    params.add("conv_in.weight", nc.Tensor(_kaiming_uniform(rng, (c, 3, k, k), 3 * k * k), requires_grad=True))
    params.add("conv_in.bias", nc.Tensor(np.zeros(c), requires_grad=True))
    for i in range(cfg.depth):
        params.add(
            f"hidden_{i}.weight",
            nc.Tensor(_kaiming_uniform(rng, (c, c, k, k), c * k * k), requires_grad=True),
        )
        params.add(f"hidden_{i}.bias", nc.Tensor(np.zeros(c), requires_grad=True))
    params.add("conv_out.weight", nc.Tensor(np.zeros((3, c, k, k)), requires_grad=True))
    params.add("conv_out.bias", nc.Tensor(np.zeros(3), requires_grad=True))
    return params


def init_altitude_params(cfg: SrNetConfig, seed: int = 0) -> nc.ParamSet:
    """Simple-net parameters plus the altitude encoder and per-layer AALs."""
    rng = np.random.default_rng(seed)
    params = init_simple_params(cfg, seed)
    c = cfg.channels
    params.add("alt_enc1.weight", nc.Tensor(_kaiming_uniform(rng, (c, 1), 1), requires_grad=True))
    params.add("alt_enc1.bias", nc.Tensor(np.zeros(c), requires_grad=True))
    params.add("alt_enc2.weight", nc.Tensor(_kaiming_uniform(rng, (c, c), c), requires_grad=True))
    params.add("alt_enc2.bias", nc.Tensor(np.zeros(c), requires_grad=True))
    for i in range(cfg.depth):
        base = f"aal_{i}"
        params.add(f"{base}.kernel_fc1.weight", nc.Tensor(_kaiming_uniform(rng, (c, c), c), requires_grad=True))
        params.add(f"{base}.kernel_fc1.bias", nc.Tensor(np.zeros(c), requires_grad=True))
        params.add(f"{base}.kernel_fc2.weight", nc.Tensor(_kaiming_uniform(rng, (c * 9, c), c), requires_grad=True))
        params.add(f"{base}.kernel_fc2.bias", nc.Tensor(np.zeros(c * 9), requires_grad=True))
        params.add(f"{base}.mix.weight", nc.Tensor(_kaiming_uniform(rng, (c, c, 1, 1), c), requires_grad=True))
        params.add(f"{base}.att_fc1.weight", nc.Tensor(_kaiming_uniform(rng, (c, c), c), requires_grad=True))
        params.add(f"{base}.att_fc1.bias", nc.Tensor(np.zeros(c), requires_grad=True))
        params.add(f"{base}.att_fc2.weight", nc.Tensor(_kaiming_uniform(rng, (c, c), c), requires_grad=True))
        params.add(f"{base}.att_fc2.bias", nc.Tensor(np.zeros(c), requires_grad=True))
    return params


def is_altitude_paramset(params: nc.ParamSet) -> bool:
    return "alt_enc1.weight" in params


# --- forward passes -----------------------------------------------------------


def upsample_lr(lr: Image, cfg: SrNetConfig) -> Image:
    out_h = int(round(lr.height * cfg.scale))
    out_w = int(round(lr.width * cfg.scale))
    return resize(lr, out_h, out_w, cfg.upsample)


def _to_batch(images: Sequence[Image]) -> np.ndarray:
    return np.stack([img.data.astype(np.float64).transpose(2, 0, 1) for img in images])


def _from_batch(data: np.ndarray) -> list:
    return [Image(np.clip(sample, 0.0, 1.0).transpose(1, 2, 0), "RGB") for sample in data]


def forward_simple_tensor(up: nc.Tensor, params: nc.ParamSet, cfg: SrNetConfig) -> nc.Tensor:
    """Residual forward on an upsampled batch [N,3,H,W]; no clamping."""
    pad = (cfg.kernel - 1) // 2
    x = nc.relu(nc.conv2d(up, params["conv_in.weight"], params["conv_in.bias"], pad))
    for i in range(cfg.depth):
        x = nc.relu(nc.conv2d(x, params[f"hidden_{i}.weight"], params[f"hidden_{i}.bias"], pad))
    res = nc.conv2d(x, params["conv_out.weight"], params["conv_out.bias"], pad)
    return nc.add(res, up)


def altitude_encode(altitude_m: float, params: nc.ParamSet) -> nc.Tensor:
    """Two dense+ReLU layers over the normalized altitude; returns [1, C]."""
    if altitude_m <= 0:
        raise ValueError("altitude must be positive")
    a = nc.Tensor(np.array([[altitude_m / ALTITUDE_NORM_M]]))
    f = nc.relu(nc.dense(a, params["alt_enc1.weight"], params["alt_enc1.bias"]))
    return nc.relu(nc.dense(f, params["alt_enc2.weight"], params["alt_enc2.bias"]))


def aal_forward(feat: nc.Tensor, alt_feature: nc.Tensor, params: nc.ParamSet, layer: int) -> nc.Tensor:
    """Altitude-aware layer: generated depthwise kernel + channel attention.

    Branch 1 reshapes two dense layers into a [C,1,3,3] depthwise kernel,
    convolves the features, and mixes channels with a static bias-free 1x1
    convolution. Branch 2 produces sigmoid channel-attention weights. The
    branches are summed.
    """
    c = feat.shape[1]
    base = f"aal_{layer}"
    k = nc.dense(alt_feature, params[f"{base}.kernel_fc1.weight"], params[f"{base}.kernel_fc1.bias"])
    k = nc.dense(k, params[f"{base}.kernel_fc2.weight"], params[f"{base}.kernel_fc2.bias"])
    kernel = nc.reshape(k, (c, 1, 3, 3))
    branch1 = nc.depthwise_conv2d(feat, kernel)
    branch1 = nc.conv2d(branch1, params[f"{base}.mix.weight"], nc.Tensor(np.zeros(c)), padding=0)

    a = nc.dense(alt_feature, params[f"{base}.att_fc1.weight"], params[f"{base}.att_fc1.bias"])
    a = nc.dense(a, params[f"{base}.att_fc2.weight"], params[f"{base}.att_fc2.bias"])
    weights = nc.reshape(nc.sigmoid(a), (1, c, 1, 1))
    branch2 = nc.mul(feat, weights)
    return nc.add(branch1, branch2)


def forward_altitude_tensor(
    up: nc.Tensor, altitude_m: float, params: nc.ParamSet, cfg: SrNetConfig
) -> nc.Tensor:
    """Altitude-conditioned residual forward; one AAL after each hidden layer."""
    pad = (cfg.kernel - 1) // 2
    alt_feature = altitude_encode(altitude_m, params)
    x = nc.relu(nc.conv2d(up, params["conv_in.weight"], params["conv_in.bias"], pad))
    for i in range(cfg.depth):
        x = nc.relu(nc.conv2d(x, params[f"hidden_{i}.weight"], params[f"hidden_{i}.bias"], pad))
        x = aal_forward(x, alt_feature, params, i)
    res = nc.conv2d(x, params["conv_out.weight"], params["conv_out.bias"], pad)
    return nc.add(res, up)


def forward_simple(lr: Image, params: nc.ParamSet, cfg: SrNetConfig) -> Image:
    up = upsample_lr(lr, cfg)
    out = forward_simple_tensor(nc.Tensor(_to_batch([up])), params.detached(), cfg)
    return _from_batch(out.data)[0]


def forward_altitude(lr: Image, altitude_m: float, params: nc.ParamSet, cfg: SrNetConfig) -> Image:
    up = upsample_lr(lr, cfg)
    out = forward_altitude_tensor(
        nc.Tensor(_to_batch([up])), altitude_m, params.detached(), cfg
    )
    return _from_batch(out.data)[0]


# --- training -----------------------------------------------------------------


def _lr_crop_size(cfg: TrainConfig, srcfg: SrNetConfig) -> int:
    frac = Fraction(srcfg.scale).limit_denominator(10000)
    lr_crop = Fraction(cfg.crop_hr) / frac
    if lr_crop.denominator != 1:
        raise ValueError(
            f"crop_hr={cfg.crop_hr} is not an integer multiple of scale {srcfg.scale}"
        )
    return int(lr_crop)


def _sample_crop(
    pair, lr_crop: int, scale_frac: Fraction, rng: np.random.Generator, do_augment: bool
):
    lr_img, hr_img = pair.lr, pair.hr
    q = scale_frac.denominator
    max_x = lr_img.width - lr_crop
    max_y = lr_img.height - lr_crop
    if max_x < 0 or max_y < 0:
        raise ValueError("crop exceeds LR patch size")
    # LR origins land on multiples of the scale denominator so the HR crop
    # starts on an exact pixel.
    x = int(rng.integers(0, max_x // q + 1)) * q if max_x else 0
    y = int(rng.integers(0, max_y // q + 1)) * q if max_y else 0
    hr_crop = int(Fraction(lr_crop) * scale_frac)
    hx = int(Fraction(x) * scale_frac)
    hy = int(Fraction(y) * scale_frac)
    lr_patch = Image(lr_img.data[y : y + lr_crop, x : x + lr_crop], lr_img.space)
    hr_patch = Image(hr_img.data[hy : hy + hr_crop, hx : hx + hr_crop], hr_img.space)
    if do_augment:
        rot = int(rng.choice([0, 90, 180, 270]))
        flip = bool(rng.random() < 0.5)
        lr_patch = augment(lr_patch, rot, flip)
        hr_patch = augment(hr_patch, rot, flip)
    return lr_patch, hr_patch


class NanLossAbort(RuntimeError):
    """Training hit a non-finite loss; carries the failing epoch and step."""


def _batch_loss(
    samples: list, params: nc.ParamSet, srcfg: SrNetConfig, net: str
) -> nc.Tensor:
    ups = nc.Tensor(_to_batch([upsample_lr(lr, srcfg) for lr, _, _ in samples]))
    targets = nc.Tensor(_to_batch([hr for _, hr, _ in samples]))
    if net == "simple":
        pred = forward_simple_tensor(ups, params, srcfg)
        return nc.l1_loss(pred, targets)

    # Altitude net: group by altitude so each group shares generated kernels;
    # the total is the element-count weighted mean of group losses.
    groups: dict = {}
    for idx, (_, _, alt) in enumerate(samples):
        groups.setdefault(alt, []).append(idx)
    total = None
    n_total = len(samples)
    up_all = ups.data
    tgt_all = targets.data
    for alt in sorted(groups):
        idxs = groups[alt]
        up_g = nc.Tensor(up_all[idxs])
        tgt_g = nc.Tensor(tgt_all[idxs])
        pred = forward_altitude_tensor(up_g, alt, params, srcfg)
        part = nc.mul(nc.l1_loss(pred, tgt_g), nc.Tensor(len(idxs) / n_total))
        total = part if total is None else nc.add(total, part)
    return total


def train(
    dataset: Sequence[AlignedPair],
    params: nc.ParamSet,
    cfg: TrainConfig,
    srcfg: SrNetConfig,
    net: str = "simple",
) -> tuple:
    """ADAM/L1 training loop; returns (params, history).

    History rows are (epoch, lr, mean_l1). The parameter set is updated in
    place. For the altitude net every sample's altitude conditions the
    forward pass; pretraining data without meaningful altitudes should carry
    ``PRETRAIN_ALTITUDE_M`` so the normalized altitude is 1.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if net not in ("simple", "altitude"):
        raise ValueError(f"unknown net kind {net!r}")
    if net == "altitude" and not is_altitude_paramset(params):
        raise ValueError("altitude training needs altitude-aware parameters")

    rng = np.random.default_rng(cfg.seed)
    scale_frac = Fraction(srcfg.scale).limit_denominator(10000)
    lr_crop = _lr_crop_size(cfg, srcfg)
    state = nc.AdamState(params)
    history = []

    for epoch in range(cfg.epochs):
        lr_rate = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(dataset))
        if cfg.steps_per_epoch is not None:
            order = order[: cfg.steps_per_epoch * cfg.batch_size]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            samples = []
            for i in batch_idx:
                pair = dataset[i]
                lr_patch, hr_patch = _sample_crop(pair, lr_crop, scale_frac, rng, cfg.augment)
                samples.append((lr_patch, hr_patch, pair.altitude_m))
            try:
                loss = _batch_loss(samples, params, srcfg, net)
            except nc.NumericError as exc:
                raise NanLossAbort(f"non-finite loss at epoch {epoch}: {exc}") from exc
            params.zero_grads()
            nc.backward(loss)
            nc.adam_step(params, state, lr_rate)
            losses.append(loss.item())
        history.append((epoch, lr_rate, float(np.mean(losses))))
    return params, history


# --- evaluation ----------------------------------------------------------------


def _infer(pair: AlignedPair, params: nc.ParamSet, srcfg: SrNetConfig, net: str) -> Image:
    if net == "bicubic":
        return upsample_lr(pair.lr, srcfg)
    if net == "simple":
        return forward_simple(pair.lr, params, srcfg)
    if net == "altitude":
        return forward_altitude(pair.lr, pair.altitude_m, params, srcfg)
    raise ValueError(f"unknown net kind {net!r}")


def evaluate(
    dataset: Sequence[AlignedPair],
    params: Optional[nc.ParamSet],
    srcfg: SrNetConfig,
    net: str = "simple",
    method_name: Optional[str] = None,
    include_bicubic: bool = True,
) -> tuple:
    """Per-altitude mean PSNR/SSIM/GMSD on Y versus the aligned HR.

    Returns (rows, pair_records): rows aggregate per (method, altitude),
    sorted by ascending altitude, with a bicubic baseline unless disabled.
    """
    method = method_name or net
    methods = [(method, net)]
    if include_bicubic and net != "bicubic":
        methods.insert(0, ("bicubic", "bicubic"))

    pair_records = []
    rows = []
    altitudes = sorted({p.altitude_m for p in dataset})
    for name, kind in methods:
        for alt in altitudes:
            pairs = [p for p in dataset if p.altitude_m == alt]
            reports = []
            for p in pairs:
                sr = _infer(p, params, srcfg, kind)
                rep = MetricReport.measure(sr, p.hr)
                reports.append(rep)
                pair_records.append(
                    {
                        "scene": p.scene,
                        "altitude_m": alt,
                        "method": name,
                        "psnr": rep.psnr,
                        "ssim": rep.ssim,
                        "gmsd": rep.gmsd,
                    }
                )
            rows.append(
                {
                    "method": name,
                    "altitude_m": alt,
                    "psnr": float(np.mean([r.psnr for r in reports])),
                    "ssim": float(np.mean([r.ssim for r in reports])),
                    "gmsd": float(np.mean([r.gmsd for r in reports])),
                    "n": len(reports),
                }
            )
    return rows, pair_records
