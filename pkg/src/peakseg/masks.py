"""Binary mask primitives: run-length encoding, IoU, bounding boxes, areas.

Masks are 2D boolean numpy arrays (row = image row, column = image column).
The on-disk form is an uncompressed RLE: run counts over a column-major scan
of the pixels, always starting with a background run, matching the common
annotation-tool convention.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    """Axis-aligned pixel box with inclusive bounds."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1


def as_mask(mask) -> np.ndarray:
    """Normalize input to a 2D boolean array, validating its shape."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask must have height, width >= 1, got {m.shape}")
    return m.astype(bool, copy=False)


def rle_encode(mask) -> list[int]:
    """Encode a mask as alternating background/foreground run counts.

    The scan is column-major and the first count is always a background
    run (possibly 0). Counts sum to height * width.
    """
    m = as_mask(mask)
    flat = m.ravel(order="F")
    # Sentinels turn run boundaries into diff != 0 positions.
    padded = np.concatenate(([np.int8(-1)], flat.astype(np.int8), [np.int8(-1)]))
    boundaries = np.flatnonzero(np.diff(padded))
    counts = np.diff(boundaries).tolist()
    if flat[0]:
        counts = [0] + counts
    return counts


def rle_decode(counts, height: int, width: int) -> np.ndarray:
    """Decode run counts back into a mask. Inverse of :func:`rle_encode`."""
    if height < 1 or width < 1:
        raise ValueError(f"invalid mask size {height}x{width}")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or len(counts) == 0:
        raise ValueError("RLE counts must be a non-empty 1D sequence")
    if (counts < 0).any():
        raise ValueError("RLE counts must be non-negative")
    total = int(counts.sum())
    if total != height * width:
        raise ValueError(
            f"malformed RLE: counts sum to {total}, expected {height * width}"
        )
    flat = np.zeros(total, dtype=bool)
    ends = np.cumsum(counts)
    # Odd-indexed runs are foreground.
    for k in range(1, len(counts), 2):
        flat[ends[k - 1] : ends[k]] = True
    return flat.reshape((height, width), order="F")


def rle_to_obj(mask) -> dict:
    """Mask to its JSON object form: {"size": [H, W], "counts": [...]}."""
    m = as_mask(mask)
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": rle_encode(m)}


def rle_from_obj(obj: dict) -> np.ndarray:
    """Inverse of :func:`rle_to_obj`."""
    h, w = obj["size"]
    return rle_decode(obj["counts"], int(h), int(w))


def area(mask) -> int:
    """Number of foreground pixels."""
    return int(np.count_nonzero(as_mask(mask)))


def iou(a, b) -> float:
    """Intersection-over-union (Jaccard similarity) of two same-size masks.

    Defined as 0 when both masks are empty, so degenerate masks never
    count as matches.
    """
    ma, mb = as_mask(a), as_mask(b)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return inter / union


def bbox(mask) -> Box:
    """Tightest axis-aligned box containing all foreground pixels."""
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if len(rows) == 0:
        raise ValueError("bbox of an empty mask is undefined")
    cols = np.flatnonzero(m.any(axis=0))
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def box_to_array(box: Box) -> np.ndarray:
    return np.array(box, dtype=np.float64)


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of inclusive boxes.

    Boxes are rows of [row_min, col_min, row_max, col_max].
    """
    a = np.atleast_2d(np.asarray(boxes_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(boxes_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    r0 = np.maximum(a[:, None, 0], b[None, :, 0])
    c0 = np.maximum(a[:, None, 1], b[None, :, 1])
    r1 = np.minimum(a[:, None, 2], b[None, :, 2])
    c1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(r1 - r0 + 1, 0, None) * np.clip(c1 - c0 + 1, 0, None)
    area_a = (a[:, 2] - a[:, 0] + 1) * (a[:, 3] - a[:, 1] + 1)
    area_b = (b[:, 2] - b[:, 0] + 1) * (b[:, 3] - b[:, 1] + 1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)
