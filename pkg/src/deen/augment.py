"""Image augmentation on C x H x W arrays: resize, horizontal flip, random erasing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

FULL_SCALE_GEOMETRY = (3, 384, 144)
DESK_GEOMETRY = (3, 64, 32)


@dataclass
class AugmentConfig:
    out_hw: Tuple[int, int] = (64, 32)
    flip_p: float = 0.5
    erase_p: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.4)
    erase_min_aspect: float = 0.3
    erase_attempts: int = 100

    def __post_init__(self):
        self.out_hw = tuple(int(v) for v in self.out_hw)
        self.erase_area = tuple(float(v) for v in self.erase_area)


def resize_bilinear(img: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (edges clamp)."""
    c, h, w = img.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return img

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(img.dtype)

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(img.dtype)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def erase(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Fill a rectangle with the image's per-channel mean."""
    out = img.copy()
    fill = img.mean(axis=(1, 2))
    out[:, top:top + h, left:left + w] = fill[:, None, None]
    return out


def random_erase(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    if rng.uniform() >= cfg.erase_p:
        return img
    _, ih, iw = img.shape
    area = ih * iw
    for _ in range(cfg.erase_attempts):
        target = rng.uniform(*cfg.erase_area) * area
        aspect = rng.uniform(cfg.erase_min_aspect, 1 / cfg.erase_min_aspect)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < ih and 0 < w < iw:
            top = int(rng.integers(0, ih - h + 1))
            left = int(rng.integers(0, iw - w + 1))
            return erase(img, top, left, h, w)
    return img


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    out = resize_bilinear(img, cfg.out_hw)
    if rng.uniform() < cfg.flip_p:
        out = hflip(out)
    return random_erase(out, rng, cfg)
