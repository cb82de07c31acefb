"""HR image sources and on-the-fly degradation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from caflow.imaging import bicubic_resize, load_png
from caflow.numerics import ContractError


def _value_noise(rng: np.random.Generator, size: int, octaves: int, base: int) -> torch.Tensor:
    out = torch.zeros(3, size, size)
    amp = 1.0
    for o in range(octaves):
        g = base * 2**o
        grid = torch.from_numpy(rng.random((1, 3, g, g)).astype(np.float32))
        out += amp * F.interpolate(grid, size=(size, size), mode="bilinear", align_corners=False)[0]
        amp *= 0.55
    lo, hi = out.amin(), out.amax()
    return (out - lo) / (hi - lo + 1e-8)


def synthetic_texture(rng: np.random.Generator, size: int = 256, complexity: float | None = None) -> torch.Tensor:
    """One procedural RGB image: multi-octave noise, hard-edged shapes, gratings and dot clusters.

    ``complexity`` in [0, 1] scales how many high-frequency elements appear.
    """
    c = rng.random() if complexity is None else complexity
    img = 0.2 + 0.6 * _value_noise(rng, size, octaves=3 + int(3 * c), base=2)
    yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float32), torch.arange(size, dtype=torch.float32),
                            indexing="ij")
    for _ in range(int(3 + 20 * c)):
        cy, cx = rng.random(2) * size
        ry, rx = (0.03 + 0.15 * rng.random(2)) * size
        color = torch.from_numpy(rng.random(3).astype(np.float32)).view(3, 1, 1)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = ((yy - cy).abs() <= ry) & ((xx - cx).abs() <= rx)
        fill = color.expand(3, size, size)
        if rng.random() < 0.4 * c + 0.1:
            period = 3 + 9 * rng.random()
            theta = np.pi * rng.random()
            phase = (xx * np.cos(theta) + yy * np.sin(theta)) * (2 * np.pi / period)
            fill = fill * (0.6 + 0.4 * torch.sin(phase))
        img = torch.where(mask, fill, img)
    for _ in range(int(40 * c)):
        cy, cx = rng.random(2) * size
        r = 1.5 + 3.5 * rng.random()
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        dark = torch.tensor([0.25, 0.1, 0.35]).view(3, 1, 1) * (0.5 + rng.random())
        img = torch.where(mask, dark.expand(3, size, size), img)
    return img.clamp(0, 1).contiguous()


def synthetic_dataset(n: int, size: int = 256, seed: int = 0) -> list[torch.Tensor]:
    rng = np.random.default_rng(seed)
    return [synthetic_texture(rng, size) for _ in range(n)]


def load_folder(path: str | Path) -> list[torch.Tensor]:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory {path} does not exist")
    files = sorted(path.glob("*.png"))
    if not files:
        raise ContractError(f"no PNG files in {path}")
    return [load_png(f) for f in files]


def degrade(hr: torch.Tensor, s: int) -> torch.Tensor:
    h, w = hr.shape[-2:]
    if h % s or w % s:
        raise ContractError(f"HR size {h}x{w} not divisible by {s}")
    return bicubic_resize(hr, h // s, w // s)


def color_jitter(img: torch.Tensor, rng: np.random.Generator, brightness: float = 0.1,
                 contrast: float = 0.1, saturation: float = 0.05) -> torch.Tensor:
    b = 1 + rng.uniform(-brightness, brightness)
    c = 1 + rng.uniform(-contrast, contrast)
    s = 1 + rng.uniform(-saturation, saturation)
    img = img * b
    mean = img.mean()
    img = (img - mean) * c + mean
    gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0)
    return ((img - gray) * s + gray).clamp(0, 1)


def random_crop(hr: torch.Tensor, crop: int, rng: np.random.Generator, jitter: bool = False) -> torch.Tensor:
    """Random crop plus a random flip / 90-degree rotation (the eight dihedral variants)."""
    h, w = hr.shape[-2:]
    if crop > h or crop > w:
        raise ContractError(f"crop {crop} larger than image {h}x{w}")
    y, x = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    patch = hr[:, y:y + crop, x:x + crop]
    if rng.random() < 0.5:
        patch = patch.flip(-1)
    patch = torch.rot90(patch, int(rng.integers(0, 4)), dims=(-2, -1))
    if jitter:
        patch = color_jitter(patch, rng)
    return patch.contiguous()
