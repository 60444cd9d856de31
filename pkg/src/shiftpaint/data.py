"""Dataset indexing and the procedural desk-scale corpus.

The toy generator produces small textures with structure the shift search
can exploit: smooth gradients for global shading plus stripes and solid
rectangles whose patterns repeat between the known and missing regions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ppm import read_ppm, to_tensor, write_ppm


@dataclass(frozen=True)
class DatasetIndex:
    """Ordered image paths; ordering is lexicographic before any shuffling."""

    paths: tuple
    split: str = "train"

    def __len__(self):
        return len(self.paths)

    def load(self, i):
        """Image i as a (3,H,W) tensor in [-1, 1]."""
        return to_tensor(read_ppm(self.paths[i]))


def scan_dataset(directory, split="train"):
    directory = Path(directory)
    paths = tuple(sorted(str(p) for p in directory.glob("*.ppm")))
    if not paths:
        raise FileNotFoundError(f"no .ppm images under {directory}")
    return DatasetIndex(paths=paths, split=split)


def _lerp_colors(c0, c1, t):
    return (c0[None, None] * (1.0 - t[..., None]) + c1[None, None] * t[..., None])


def _random_color(rng, min_sep_from=None):
    while True:
        c = rng.integers(0, 256, size=3).astype(np.float64)
        if min_sep_from is None or np.abs(c - min_sep_from).sum() > 120:
            return c


def make_toy_image(size, rng):
    """One synthetic texture: gradient base, stripe band, optional rectangles."""
    c0 = _random_color(rng)
    c1 = _random_color(rng, min_sep_from=c0)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    axis = rng.integers(0, 3)
    t = (yy, xx, (yy + xx) / 2.0)[axis]
    img = _lerp_colors(c0, c1, t)

    # stripe band: a repeating two-color pattern the shift layer can copy
    s0 = _random_color(rng, min_sep_from=c0)
    s1 = _random_color(rng, min_sep_from=s0)
    period = int(rng.integers(2, 7))
    horizontal = bool(rng.integers(0, 2))
    band = max(size // 3, 4)
    start = int(rng.integers(0, size - band + 1))
    phase = (yy if horizontal else xx) * max(size - 1, 1)
    stripes = np.where(((phase // period) % 2 == 0)[..., None], s0[None, None], s1[None, None])
    if horizontal:
        img[start:start + band, :] = stripes[start:start + band, :]
    else:
        img[:, start:start + band] = stripes[:, start:start + band]

    for _ in range(int(rng.integers(0, 3))):
        rh = int(rng.integers(size // 8, size // 3 + 1))
        rw = int(rng.integers(size // 8, size // 3 + 1))
        r0 = int(rng.integers(0, size - rh + 1))
        col0 = int(rng.integers(0, size - rw + 1))
        img[r0:r0 + rh, col0:col0 + rw] = _random_color(rng)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_toy_dataset(out_dir, n=64, size=32, seed=0):
    """Deterministic corpus of ``n`` textures written as PPM files."""
    if n < 2:
        raise ValueError("need at least 2 images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        path = out_dir / f"toy_{i:04d}.ppm"
        write_ppm(path, make_toy_image(size, rng))
        paths.append(str(path))
    return DatasetIndex(paths=tuple(sorted(paths)), split="train")


def resize_bilinear(chw, out_h, out_w):
    """Plain bilinear resize of a (C,H,W) array (deterministic)."""
    c, h, w = chw.shape
    if (h, w) == (out_h, out_w):
        return chw.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = chw[:, y0][:, :, x0] * (1 - wx) + chw[:, y0][:, :, x1] * wx
    bot = chw[:, y1][:, :, x0] * (1 - wx) + chw[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def fit_min_side(chw, resize_min):
    """Scale so the smaller spatial side equals ``resize_min``."""
    _, h, w = chw.shape
    if min(h, w) == resize_min:
        return chw
    scale = resize_min / min(h, w)
    return resize_bilinear(chw, max(int(round(h * scale)), resize_min),
                           max(int(round(w * scale)), resize_min))


def random_crop(chw, size, rng):
    _, h, w = chw.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return chw[:, top:top + size, left:left + size]
