"""Box and component geometry.

Bounding boxes follow the COCO convention: ``[x, y, w, h]`` with a top-left
origin, ``x`` indexing columns and ``y`` indexing rows, and width/height
counted inclusively of the last pixel (a single pixel has w = h = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyComponent

# 4-connectivity: edge-adjacent pixels only. 8-connectivity also joins
# diagonal neighbours, which keeps thin diagonal bridges in one component.
_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}

DEFAULT_CONNECTIVITY = 8


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, COCO [x, y, w, h] with w > 0 and h > 0."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    def within(self, width: int, height: int) -> bool:
        """True when the box lies inside a width x height image."""
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class Component:
    """One connected pixel component of a single label value.

    ``rows``/``cols`` hold the pixel coordinates (parallel arrays). They are
    kept rather than run-length encoded; masks in this pipeline are modest.
    """

    label_value: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)

    def min_yx(self) -> tuple[int, int]:
        """Lexicographically smallest (row, col) pixel; the ordering key."""
        top = int(self.rows.min())
        return top, int(self.cols[self.rows == top].min())


def connected_components(pixels: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> list[Component]:
    """Split every nonzero label of a 2-D label image into connected components.

    Returns components sorted by (label value, min (y, x) pixel) so output
    order never depends on scan internals. Labels with no pixels contribute
    nothing; an all-zero image yields an empty list.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    if pixels.ndim != 2:
        raise ValueError(f"label image must be 2-D, got shape {pixels.shape}")
    structure = _STRUCTURES[connectivity]

    out: list[Component] = []
    for value in np.unique(pixels):
        if value == 0:
            continue
        labelled, count = ndimage.label(pixels == value, structure=structure)
        per_label: list[Component] = []
        for comp_id in range(1, count + 1):
            rows, cols = np.nonzero(labelled == comp_id)
            per_label.append(Component(int(value), rows, cols))
        per_label.sort(key=Component.min_yx)
        out.extend(per_label)
    return out


def merge_components(components: list[Component]) -> Component:
    """Union several components of the same label into one pixel set.

    Used by the one-box-per-label mode, where every pixel of a label backs a
    single annotation regardless of connectivity.
    """
    if not components:
        raise EmptyComponent("cannot merge zero components")
    labels = {c.label_value for c in components}
    if len(labels) != 1:
        raise ValueError(f"components carry different labels: {sorted(labels)}")
    rows = np.concatenate([c.rows for c in components])
    cols = np.concatenate([c.cols for c in components])
    return Component(components[0].label_value, rows, cols)


def bbox_of(component: Component) -> BBox:
    """Tight axis-aligned box around a component's pixels."""
    if component.pixel_count == 0:
        raise EmptyComponent("component has no pixels")
    x0 = int(component.cols.min())
    x1 = int(component.cols.max())
    y0 = int(component.rows.min())
    y1 = int(component.rows.max())
    return BBox(x=x0, y=y0, w=x1 - x0 + 1, h=y1 - y0 + 1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def rle_encode(rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> list[int]:
    """Run-length encode a pixel set, column-major, first run counting zeros."""
    flat = np.zeros(height * width, dtype=bool)
    flat[np.asarray(cols, dtype=np.int64) * height + np.asarray(rows, dtype=np.int64)] = True
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def rle_decode(counts, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of rle_encode; returns (rows, cols) of the set pixels."""
    if sum(counts) != height * width:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for i, run in enumerate(counts):
        if i % 2 == 1:
            flat[pos : pos + run] = True
        pos += run
    idx = np.flatnonzero(flat)
    return idx % height, idx // height
