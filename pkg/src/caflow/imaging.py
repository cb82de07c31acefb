"""Pixel-space utilities: rearrangement, bicubic resampling, metrics, Otsu, PNG I/O."""

from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from caflow.numerics import ContractError, ShapeError

LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class DegenerateHistogramError(ValueError):
    pass


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, C*s*s, H/s, W/s); channel c*s*s + dy*s + dx holds offset (dy, dx)."""
    n, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise ShapeError(f"pixel_unshuffle: ({h}, {w}) not divisible by {s}")
    x = x.reshape(n, c, h // s, s, w // s, s)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Exact inverse of :func:`pixel_unshuffle`."""
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ShapeError(f"pixel_shuffle: {cs} channels not divisible by {s * s}")
    c = cs // (s * s)
    x = x.reshape(n, c, s, s, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)


def _keys(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Keys-cubic weights; support widened by the factor on downscale."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    radius = int(math.ceil(2 * support)) + 1
    mat = np.zeros((n_out, n_in))
    for i, c in enumerate(centers):
        taps = np.arange(math.floor(c) - radius, math.floor(c) + radius + 2)
        wts = _keys((taps - c) / support)
        wts /= wts.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), wts)
    mat.setflags(write=False)
    return mat


def bicubic_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Separable Keys (a=-0.5) resampling of (..., H, W); antialiased on downscale, clamp-to-edge."""
    if out_h < 1 or out_w < 1:
        raise ContractError("output size must be positive")
    h, w = x.shape[-2:]
    rows = torch.tensor(_resize_matrix(h, out_h), dtype=x.dtype)
    cols = torch.tensor(_resize_matrix(w, out_w), dtype=x.dtype)
    return rows @ x @ cols.T


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB with peak 1.0; ``inf`` for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_1d(dtype: torch.dtype) -> torch.Tensor:
    r = SSIM_WINDOW // 2
    g = torch.exp(-(torch.arange(-r, r + 1, dtype=torch.float64) ** 2) / (2 * SSIM_SIGMA**2))
    return (g / g.sum()).to(dtype)


def ssim_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM of (N, C, H, W) batches, averaged over channels and valid positions.

    Differentiable; used both as a metric and as a training loss.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    g = _gaussian_1d(a.dtype)
    kh = g.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = g.view(1, 1, 1, -1).expand(c, 1, 1, -1)

    def blur(z):
        return F.conv2d(F.conv2d(z, kh, groups=c), kw, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return smap.mean(dim=(1, 2, 3))


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """SSIM of two (C, H, W) images: 11x11 Gaussian window, sigma 1.5, range 1."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ssim_batch(a.double().unsqueeze(0), b.double().unsqueeze(0)).item()


def to_gray(img: torch.Tensor) -> torch.Tensor:
    r, g, b = LUMA
    return r * img[..., 0, :, :] + g * img[..., 1, :, :] + b * img[..., 2, :, :]


def otsu_threshold(gray: torch.Tensor | np.ndarray) -> float:
    """Otsu threshold on a 256-bin histogram, returned as ``k / 255``.

    Class 0 is bins ``0..k``. Ties go to the lowest ``k``.
    """
    levels = np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("Otsu needs at least two distinct gray levels")
    p = hist / hist.sum()
    bins = np.arange(256)
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * bins)[:-1]
    mt = m0[-1] + p[-1] * 255
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where((w0 > 0) & (w1 > 0), (mt * w0 - m0) ** 2 / (w0 * w1), -np.inf)
    # plateau maxima differ only by round-off; take the lowest bin within a relative tolerance
    best = between.max()
    return int(np.flatnonzero(between >= best - 1e-12 * abs(best))[0]) / 255.0


def dark_fraction(gray: torch.Tensor | np.ndarray, threshold: float) -> float:
    """Fraction of pixels whose quantized level falls at or below the threshold bin."""
    levels = np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255), 0, 255)
    return float(np.mean(levels <= round(threshold * 255)))


def load_png(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with PILImage.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise OSError(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def quantize_8bit(img: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid a PNG would store; returns float32 values k/255."""
    levels = np.rint(img.detach().double().clamp(0, 1).numpy() * 255)
    return torch.from_numpy((levels / 255.0).astype(np.float32))


def save_png(img: torch.Tensor, path: str | Path) -> None:
    if img.dim() != 3 or img.shape[0] != 3:
        raise ShapeError(f"save_png expects (3, H, W), got {tuple(img.shape)}")
    arr = np.rint(img.detach().double().clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path)
