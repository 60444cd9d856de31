"""Missing-region bookkeeping at every feature resolution.

A binary mask (1 = missing pixel) is pushed down through the same 4x4
stride-2 geometry as the encoder, using a single-channel averaging filter
with all taps 1/16, no bias and no nonlinearity. Thresholding the averaged
coverage at each level yields the missing index set the shift layer works
with at that resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff


class MaskError(ValueError):
    """Malformed mask input."""


class EmptyKnownRegionError(ValueError):
    """A shift was requested at a level with no known positions."""


def validate_mask(mask):
    """Coerce to a 2-d {0,1} uint8 array, rejecting anything else."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MaskError(f"mask must be 2-d, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise MaskError(f"mask values must be 0 or 1, got {vals[:8]}")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class MaskLevel:
    """Averaged coverage map and its thresholded missing set at one level."""

    coverage: np.ndarray  # float map in [0, 1]
    missing: np.ndarray   # bool map, True where coverage >= threshold

    @property
    def missing_count(self):
        return int(self.missing.sum())

    @property
    def known_count(self):
        return int((~self.missing).sum())


@dataclass(frozen=True)
class MaskPyramid:
    """Per-level missing sets derived from one input mask."""

    mask: np.ndarray
    threshold: float
    levels: tuple

    def level(self, l):
        """1-based level access (level l matches encoder layer l)."""
        if not 1 <= l <= len(self.levels):
            raise IndexError(f"pyramid has {len(self.levels)} levels, asked for {l}")
        return self.levels[l - 1]

    def require_known(self, l):
        """The level, or an error when it offers no shift sources."""
        lv = self.level(l)
        if lv.known_count == 0:
            raise EmptyKnownRegionError(
                f"no known positions at pyramid level {l}; nothing to shift from"
            )
        return lv


_AVG_KERNEL = np.full((1, 1, 4, 4), 1.0 / 16.0)


def propagate_mask(mask, depth, threshold=5.0 / 16.0):
    """Build the mask pyramid for ``depth`` encoder levels.

    Each level halves the resolution with the 4x4 stride-2 pad-1 averaging
    filter; a position is missing at that level when its averaged coverage
    reaches ``threshold``. Raising the threshold can only shrink the sets.
    """
    arr = validate_mask(mask)
    if not 0.0 <= threshold <= 1.0:
        raise MaskError(f"threshold must be in [0, 1], got {threshold}")
    h, w = arr.shape
    if depth < 1:
        raise MaskError("depth must be >= 1")
    if min(h, w) >> depth < 1 and min(h, w) >> (depth - 1) < 2:
        raise MaskError(f"mask {h}x{w} is too small for {depth} halvings")

    levels = []
    cur = arr.astype(np.float64)[None, None]
    with autodiff.no_grad():
        for _ in range(depth):
            t = autodiff.conv2d(autodiff.constant(cur), autodiff.constant(_AVG_KERNEL),
                                stride=2, pad=1)
            cur = t.data
            coverage = cur[0, 0]
            levels.append(MaskLevel(coverage=coverage, missing=coverage >= threshold))
    return MaskPyramid(mask=arr, threshold=float(threshold), levels=tuple(levels))
