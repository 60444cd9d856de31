"""Feature rearrangement: cosine nearest-neighbor search and the shift op.

For every missing position of the decoder feature map, the search picks the
known encoder position with the highest cosine similarity; the shift op then
copies that encoder vector into the missing slot. Known positions pass
through unchanged, which extends the row-selection matrix with identity rows
so the rearranged map is full-size. The backward pass is the exact transpose:
known positions keep their own gradient and additionally accumulate the
gradients of every missing position assigned to them. The argmax itself is
treated as a constant, so only the linear rearrangement is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .masks import EmptyKnownRegionError

_EPS = 1e-8


@dataclass(frozen=True)
class ShiftAssignment:
    """Sparse source map: flat raster indices, one known source per missing y."""

    shape: tuple            # (H, W) of the feature level
    missing: np.ndarray     # int64 (K,) flat indices of missing positions
    source: np.ndarray      # int64 (K,) flat indices into the known region
    similarity: np.ndarray  # float (K,) cosine scores (0 for random assignments)

    def __post_init__(self):
        if self.missing.shape != self.source.shape:
            raise ValueError("assignment arrays disagree in length")

    @property
    def count(self):
        return int(self.missing.size)

    def shift_vectors(self):
        """Per-missing-position (drow, dcol) offsets to the chosen source."""
        h, w = self.shape
        yr, yc = np.divmod(self.missing, w)
        xr, xc = np.divmod(self.source, w)
        return np.stack([xr - yr, xc - yc], axis=1)

    def permuted(self, rng):
        """Same sources dealt to the missing positions in a shuffled order."""
        perm = rng.permutation(self.count)
        return ShiftAssignment(self.shape, self.missing, self.source[perm],
                               self.similarity[perm])


def _split_indices(missing_map):
    flat = np.asarray(missing_map, dtype=bool).ravel()
    return np.flatnonzero(flat), np.flatnonzero(~flat)


def _normalize_rows(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / (norms + _EPS)


def _check_features(dec, enc, missing_map):
    if dec.shape != enc.shape:
        raise ValueError(f"feature shapes differ: {dec.shape} vs {enc.shape}")
    if dec.ndim != 3:
        raise ValueError(f"expected CHW features, got shape {dec.shape}")
    if missing_map.shape != dec.shape[1:]:
        raise ValueError(
            f"missing map {missing_map.shape} does not match feature grid {dec.shape[1:]}"
        )


def nn_search(decoder_feat, encoder_feat, level):
    """Best known source per missing position by cosine similarity.

    Vectors are compared after dividing by (norm + 1e-8), which also settles
    the all-zero case. Ties go to the smallest raster index; the scoring is
    one matrix product, so any internal parallelism cannot reorder results.
    """
    dec = np.asarray(decoder_feat)
    enc = np.asarray(encoder_feat)
    missing_map = level.missing if hasattr(level, "missing") else np.asarray(level)
    _check_features(dec, enc, missing_map)
    miss, known = _split_indices(missing_map)
    if miss.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return ShiftAssignment(missing_map.shape, empty, empty.copy(), np.empty(0))
    if known.size == 0:
        raise EmptyKnownRegionError("cannot search: every position is missing")

    c = dec.shape[0]
    dvecs = _normalize_rows(dec.reshape(c, -1).T[miss])
    evecs = _normalize_rows(enc.reshape(c, -1).T[known])
    scores = dvecs @ evecs.T
    best = scores.argmax(axis=1)  # first maximum = smallest raster index
    sim = scores[np.arange(miss.size), best]
    return ShiftAssignment(missing_map.shape, miss.astype(np.int64),
                           known[best].astype(np.int64), sim)


def nn_search_as_correlation(decoder_feat, encoder_feat, level):
    """The same search phrased as a bank of 1x1 correlation filters.

    Each normalized known encoder vector becomes one filter; a single
    convolution over the normalized decoder map scores every (missing,
    known) pair at once, and a per-position argmax picks the source.
    """
    dec = np.asarray(decoder_feat)
    enc = np.asarray(encoder_feat)
    missing_map = level.missing if hasattr(level, "missing") else np.asarray(level)
    _check_features(dec, enc, missing_map)
    miss, known = _split_indices(missing_map)
    if miss.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return ShiftAssignment(missing_map.shape, empty, empty.copy(), np.empty(0))
    if known.size == 0:
        raise EmptyKnownRegionError("cannot search: every position is missing")

    c, h, w = dec.shape
    norms = np.linalg.norm(dec.reshape(c, -1), axis=0) + _EPS
    dec_hat = (dec.reshape(c, -1) / norms).reshape(1, c, h, w)
    filters = _normalize_rows(enc.reshape(c, -1).T[known]).reshape(known.size, c, 1, 1)
    with autodiff.no_grad():
        score_maps = autodiff.conv2d(autodiff.constant(dec_hat),
                                     autodiff.constant(filters)).data[0]
    scores = score_maps.reshape(known.size, h * w)[:, miss]
    best = scores.argmax(axis=0)
    sim = scores[best, np.arange(miss.size)]
    return ShiftAssignment(missing_map.shape, miss.astype(np.int64),
                           known[best].astype(np.int64), sim)


def random_assignment(level, rng):
    """Uniform random known source per missing position (ablation baseline)."""
    missing_map = level.missing if hasattr(level, "missing") else np.asarray(level)
    miss, known = _split_indices(missing_map)
    if miss.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return ShiftAssignment(missing_map.shape, empty, empty.copy(), np.empty(0))
    if known.size == 0:
        raise EmptyKnownRegionError("cannot shift: every position is missing")
    src = known[rng.integers(0, known.size, size=miss.size)]
    return ShiftAssignment(missing_map.shape, miss.astype(np.int64),
                           src.astype(np.int64), np.zeros(miss.size))


def _flat_spatial(arr):
    lead = arr.shape[:-2]
    return arr.reshape(*lead, arr.shape[-2] * arr.shape[-1])


def apply_shift_array(features, assignment):
    """Gather: missing positions take their source vector, known ones copy through."""
    arr = np.asarray(features)
    _check_grid(arr, assignment)
    out = arr.copy()
    flat = _flat_spatial(out)
    flat[..., assignment.missing] = _flat_spatial(arr)[..., assignment.source]
    return out


def shift_backward(grad_out, assignment):
    """Scatter-add transpose of apply_shift_array.

    Gradients at missing positions move to their sources (summing on
    collisions, in raster order); known positions keep their own gradient;
    the assignment receives none.
    """
    g = np.asarray(grad_out)
    _check_grid(g, assignment)
    out = g.copy()
    flat = _flat_spatial(out)
    flat[..., assignment.missing] = 0.0
    np.add.at(flat, (..., assignment.source), _flat_spatial(g)[..., assignment.missing])
    return out


def _check_grid(arr, assignment):
    if arr.shape[-2:] != assignment.shape:
        raise ValueError(
            f"feature grid {arr.shape[-2:]} does not match assignment grid {assignment.shape}"
        )


def apply_shift(features, assignment):
    """Tape-recorded shift of an NCHW (or CHW) feature tensor."""
    out = apply_shift_array(features.data, assignment)
    return autodiff._make(out, (features,),
                          lambda g: (shift_backward(g, assignment),), "shift")


def assignment_lines(assignment):
    """Debug dump, one ``y_row y_col -> x_row x_col sim=<value>`` line per shift."""
    h, w = assignment.shape
    lines = []
    for y, x, s in zip(assignment.missing, assignment.source, assignment.similarity):
        yr, yc = divmod(int(y), w)
        xr, xc = divmod(int(x), w)
        lines.append(f"{yr} {yc} -> {xr} {xc} sim={s:.6f}")
    return lines
