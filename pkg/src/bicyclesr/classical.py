"""Non-learned degradation operators, noise injection, and PSNR/SSIM scoring.

Images at this level are HxWx3 (or HxW) float arrays in [0, 1]. The bicubic
resampler follows the cubic-convolution kernel with a = -0.5, symmetric-reflect
borders, and kernel widening (antialiasing) on downscale, which is the
convention behind the published interpolation baselines.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import convolve as _ndconvolve
from scipy.ndimage import correlate1d as _correlate1d

CUBIC_A = -0.5


# -- resampling -----------------------------------------------------------


def _cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    out = np.where(
        ax <= 1,
        (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )
    return out


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric (edge-inclusive) reflection of out-of-range indices."""
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def _resample_matrix(in_size: int, out_size: int, antialias: bool) -> np.ndarray:
    """Dense (out_size, in_size) row-stochastic cubic interpolation matrix."""
    scale = out_size / in_size
    if antialias and scale < 1.0:
        kscale = scale
        kwidth = 4.0 / scale
    else:
        kscale = 1.0
        kwidth = 4.0
    u = (np.arange(out_size, dtype=np.float64) + 0.5) / scale - 0.5
    left = np.floor(u - kwidth / 2).astype(np.intp)
    p = int(math.ceil(kwidth)) + 2
    indices = left[:, None] + np.arange(p)[None, :]
    weights = kscale * _cubic_kernel(kscale * (u[:, None] - indices))
    weights /= weights.sum(axis=1, keepdims=True)
    mapped = _mirror_index(indices, in_size)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.repeat(np.arange(out_size), p)
    np.add.at(mat, (rows, mapped.ravel()), weights.ravel())
    return mat


def _out_size(in_size: int, scale: float, direction: str) -> int:
    if direction == "down":
        return int(round(in_size / scale))
    return int(round(in_size * scale))


def resize_to(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable cubic-convolution resize to an explicit target size."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate target size {out_h}x{out_w}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"degenerate input size {h}x{w}")
    mh = _resample_matrix(h, out_h, antialias)
    mw = _resample_matrix(w, out_w, antialias)
    arr = img.astype(np.float64)
    out = np.tensordot(mh, arr, axes=(1, 0))  # rows
    out = np.tensordot(mw, out, axes=(1, 1))  # cols -> (W', H', C?)
    out = np.swapaxes(out, 0, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def bicubic_resize(img: np.ndarray, scale: float, direction: str) -> np.ndarray:
    """Bicubic up- or downscale by a scale factor (>= 1)."""
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    h, w = img.shape[:2]
    return resize_to(img, _out_size(h, scale, direction), _out_size(w, scale, direction))


def nearest_resize(img: np.ndarray, scale: float, direction: str) -> np.ndarray:
    """Nearest-neighbour resize; output values are exact copies of input pixels."""
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    h, w = img.shape[:2]
    oh, ow = _out_size(h, scale, direction), _out_size(w, scale, direction)
    ri = np.minimum(np.floor((np.arange(oh) + 0.5) * h / oh).astype(np.intp), h - 1)
    ci = np.minimum(np.floor((np.arange(ow) + 0.5) * w / ow).astype(np.intp), w - 1)
    return img[ri[:, None], ci[None, :]]


# -- synthetic degradation ------------------------------------------------


def gaussian_kernel(size: int = 7, sigma: float = 1.6) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax * ax) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def identity_kernel() -> np.ndarray:
    return np.array([[1.0]])


@dataclass
class SyntheticDegradationConfig:
    """Blur kernel + downsampler + additive Gaussian noise (percent of range)."""

    kernel: np.ndarray = field(default_factory=gaussian_kernel)
    scale: int = 4
    downsampler: str = "bicubic"  # bicubic | nearest | stride-pick
    noise_percent: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if abs(k.sum() - 1.0) > 1e-6:
            raise ValueError(f"blur kernel must sum to 1, got {k.sum():.8f}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.downsampler not in ("bicubic", "nearest", "stride-pick"):
            raise ValueError(f"unknown downsampler {self.downsampler!r}")
        if self.noise_percent < 0:
            raise ValueError("noise percent must be non-negative")
        self.kernel = k


def add_gaussian_noise(img: np.ndarray, sigma_percent: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian noise with std = sigma_percent of the unit range."""
    if not (0.0 <= sigma_percent <= 100.0):
        raise ValueError(f"sigma percent must lie in [0, 100], got {sigma_percent}")
    if sigma_percent == 0.0:
        return img
    noise = rng.normal(0.0, sigma_percent / 100.0, size=img.shape)
    return np.clip(img.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)


def synth_degrade(
    img: np.ndarray, cfg: SyntheticDegradationConfig, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Classical degradation: blur, downsample by the scale factor, add noise."""
    h, w = img.shape[:2]
    if h % cfg.scale or w % cfg.scale:
        raise ValueError(
            f"image size {h}x{w} must be a multiple of scale {cfg.scale}"
        )
    arr = img.astype(np.float64)
    if cfg.kernel.shape != (1, 1):
        if arr.ndim == 3:
            blurred = np.stack(
                [_ndconvolve(arr[..., c], cfg.kernel, mode="reflect") for c in range(arr.shape[2])],
                axis=-1,
            )
        else:
            blurred = _ndconvolve(arr, cfg.kernel, mode="reflect")
    else:
        blurred = arr * cfg.kernel[0, 0]
    blurred = blurred.astype(np.float32)
    if cfg.downsampler == "bicubic":
        lr = bicubic_resize(blurred, cfg.scale, "down")
    elif cfg.downsampler == "nearest":
        lr = nearest_resize(blurred, cfg.scale, "down")
    else:
        lr = blurred[:: cfg.scale, :: cfg.scale]
    lr = np.clip(lr, 0.0, 1.0).astype(np.float32)
    if cfg.noise_percent > 0:
        if rng is None:
            raise ValueError("an rng is required when noise is enabled")
        lr = add_gaussian_noise(lr, cfg.noise_percent, rng)
    return lr


# -- metrics --------------------------------------------------------------


def luminance_bt601(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an RGB image in [0,1], on the 8-bit [16, 235] scale."""
    if img.ndim == 2:
        return img.astype(np.float64) * 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return 16.0 + 65.481 * r + 128.553 * g + 24.966 * b


def shave_border(img: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return img
    if img.shape[0] <= 2 * border or img.shape[1] <= 2 * border:
        raise ValueError(f"cannot shave {border}px border off a {img.shape[:2]} image")
    return img[border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 255.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(max_val * max_val / mse)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _ssim_window() -> np.ndarray:
    ax = np.arange(_SSIM_WIN, dtype=np.float64) - (_SSIM_WIN - 1) / 2
    g = np.exp(-(ax * ax) / (2 * _SSIM_SIGMA * _SSIM_SIGMA))
    return g / g.sum()


def _win_filter(img: np.ndarray) -> np.ndarray:
    w = _ssim_window()
    out = _correlate1d(img, w, axis=0, mode="reflect")
    out = _correlate1d(out, w, axis=1, mode="reflect")
    m = _SSIM_WIN // 2
    return out[m:-m, m:-m]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < _SSIM_WIN:
        raise ValueError(
            f"image {a.shape[:2]} smaller than the {_SSIM_WIN}x{_SSIM_WIN} SSIM window"
        )
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _win_filter(x)
    mu_y = _win_filter(y)
    sxx = _win_filter(x * x) - mu_x * mu_x
    syy = _win_filter(y * y) - mu_y * mu_y
    sxy = _win_filter(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# -- dataset evaluation ---------------------------------------------------


@dataclass
class MetricRow:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: List[MetricRow]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["name,psnr_db,ssim"]
        for r in self.rows:
            lines.append(f"{r.name},{_fmt(r.psnr_db)},{_fmt(r.ssim)}")
        lines.append(f"MEAN,{_fmt(self.mean_psnr)},{_fmt(self.mean_ssim)}")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def score_pair(gt: np.ndarray, sr: np.ndarray, border: int) -> Tuple[float, float]:
    """Luminance PSNR/SSIM with a border shave, on the 8-bit scale."""
    if gt.shape != sr.shape:
        raise ValueError(f"image shape mismatch: {gt.shape} vs {sr.shape}")
    ya = shave_border(luminance_bt601(gt), border)
    yb = shave_border(luminance_bt601(sr), border)
    return psnr(ya, yb, 255.0), ssim(ya, yb, 255.0)


def evaluate(gt_dir: str, sr_dir: str, border: int = 4) -> MetricReport:
    """Score filename-matched PNG pairs between two directories."""
    from . import dataio

    gt_files = {os.path.splitext(f)[0]: f for f in sorted(os.listdir(gt_dir)) if f.lower().endswith(".png")}
    sr_files = {os.path.splitext(f)[0]: f for f in sorted(os.listdir(sr_dir)) if f.lower().endswith(".png")}
    common = sorted(set(gt_files) & set(sr_files))
    for stem in sorted(set(gt_files) ^ set(sr_files)):
        warnings.warn(f"evaluate: no counterpart for {stem!r}, skipping")
    if not common:
        raise ValueError(f"no matching image pairs between {gt_dir} and {sr_dir}")
    rows = []
    for stem in common:
        gt = dataio.load_image(os.path.join(gt_dir, gt_files[stem])).float_data()
        sr = dataio.load_image(os.path.join(sr_dir, sr_files[stem])).float_data()
        p, s = score_pair(gt, sr, border)
        rows.append(MetricRow(stem, p, s))
    return MetricReport(rows)
