"""Outer-border following on binary images and filled contour regions.

Only outermost borders are traced (the ``RETR_EXTERNAL`` notion): a raster
scan starts a trace at every foreground pixel whose left neighbour is
background and that is not already inside a previously traced region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 8-neighbourhood in counter-clockwise order on screen (row axis points down)
_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
_DIR = {d: i for i, d in enumerate(_OFFSETS)}


@dataclass
class Region:
    contour: list  # border pixels in tracing order, (row, col)
    mask: np.ndarray  # filled region, bool HxW

    @property
    def size(self):
        return int(self.mask.sum())


def trace_outer_border(padded, start):
    """Follow the outer border through ``start`` on a zero-padded binary image.

    ``start`` must have a background pixel to its left.  Returns the border
    pixels (padded coordinates) in visiting order; a closed border revisits
    nothing, so the list holds each border step once.
    """
    i, j = start

    def nonzero(r, c):
        return padded[r, c] != 0

    # clockwise search for the first foreground neighbour, beginning at the west pixel
    first = None
    d0 = _DIR[(0, -1)]
    for s in range(8):
        dr, dc = _OFFSETS[(d0 - s) % 8]
        if nonzero(i + dr, j + dc):
            first = (i + dr, j + dc)
            break
    if first is None:
        return [(i, j)]

    prev, cur = first, (i, j)
    border = []
    while True:
        # counter-clockwise from the element after `prev`
        d = _DIR[(prev[0] - cur[0], prev[1] - cur[1])]
        nxt = None
        for s in range(1, 9):
            dr, dc = _OFFSETS[(d + s) % 8]
            if nonzero(cur[0] + dr, cur[1] + dc):
                nxt = (cur[0] + dr, cur[1] + dc)
                break
        border.append(cur)
        if nxt == (i, j) and cur == first:
            break
        prev, cur = cur, nxt
    return border


def contour_regions(binary):
    """Filled regions of the outermost 8-connected borders of ``binary``."""
    img = np.asarray(binary) != 0
    if not img.any():
        return []
    h, w = img.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = img
    left_bg = img & ~padded[1:-1, :-2].astype(bool)
    claimed = np.zeros_like(img)
    regions = []
    for r, c in zip(*np.nonzero(left_bg)):
        if claimed[r, c]:
            continue
        border = trace_outer_border(padded, (r + 1, c + 1))
        outline = np.zeros_like(img)
        rows, cols = zip(*border)
        outline[np.array(rows) - 1, np.array(cols) - 1] = True
        mask = ndimage.binary_fill_holes(outline)
        claimed |= mask
        regions.append(Region([(a - 1, b - 1) for a, b in border], mask))
    return regions


def region_union(regions, shape):
    out = np.zeros(shape, dtype=bool)
    for reg in regions:
        out |= reg.mask
    return out
