"""Evaluation metrics over layouts, saliency grids, and attention grids.

Pixel membership uses pixel centers: pixel (px, py) of an h x w grid lies
in a box iff ((px + 0.5) / w, (py + 0.5) / h) falls inside the closed box
interval. The absence sentinel (no underlays, protocol without partials or
attribute) is represented as None in reports and rendered as "-" by the CLI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constraints import AttributeConstraint, PartialLayout
from .core import BBox, Category, Layout
from .errors import (
    EmptySetError,
    GridTooSmallError,
    ShapeError,
    UnspecifiedAttributeError,
    ValidationError,
)


@dataclass(frozen=True, eq=False)
class Grid:
    """Raster of values in [0, 1], row-major, shape (h, w)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValidationError(f"grid must be 2-D, got shape {values.shape}")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValidationError("grid values must lie in [0, 1]")
        values.setflags(write=False)

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Grid) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class MetricReport:
    """One evaluation report; None marks metrics that do not apply."""

    r_ove: float
    r_ali: float
    r_com: float
    r_shm: float
    r_sub: float
    r_occ: float
    r_und: float | None = None
    r_lac: float | None = None
    r_plc: float | None = None

    def to_dict(self) -> dict:
        out = {}
        for key in ("r_ove", "r_ali", "r_com", "r_shm", "r_sub", "r_occ",
                    "r_und", "r_lac", "r_plc"):
            value = getattr(self, key)
            out[key] = "absent" if value is None else float(value)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _edge_area(box: BBox) -> float:
    # Areas derive from edges so that intersections of identical boxes cancel
    # exactly (w * h can differ from (x1 - x0) * (y1 - y0) by float dust).
    return (box.x1 - box.x0) * (box.y1 - box.y0)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = _edge_area(a) + _edge_area(b) - inter
    return inter / union if union > 0.0 else 0.0


def r_ove(layout: Layout) -> float:
    """Mean pairwise IoU over non-underlay elements; 0 below two elements."""
    boxes = [el.box for el in layout.elements if el.category != Category.UNDERLAY]
    if len(boxes) < 2:
        return 0.0
    total = 0.0
    pairs = 0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            total += iou(boxes[i], boxes[j])
            pairs += 1
    return total / pairs


def r_und(layout: Layout) -> float | None:
    """Mean over underlays of their best coverage of a non-underlay element.

    Coverage of element e by underlay u is area(u & e) / area(e). Returns
    None when the layout has no underlays.
    """
    underlays = [el.box for el in layout.elements if el.category == Category.UNDERLAY]
    others = [el.box for el in layout.elements if el.category != Category.UNDERLAY]
    if not underlays:
        return None
    total = 0.0
    for u in underlays:
        best = 0.0
        for e in others:
            ix = max(0.0, min(u.x1, e.x1) - max(u.x0, e.x0))
            iy = max(0.0, min(u.y1, e.y1) - max(u.y0, e.y0))
            best = max(best, ix * iy / _edge_area(e))
        total += best
    return total / len(underlays)


_AXES = ("x0", "cx", "x1", "y0", "cy", "y1")


def _axis_values(box: BBox) -> np.ndarray:
    return np.array([box.x0, box.cx, box.x1, box.y0, box.cy, box.y1])


def r_ali(layout: Layout) -> float:
    """Mean over elements of the closest alignment axis to any other element.

    Six axes per element: left, x-center, right, top, y-center, bottom.
    Returns 0 for layouts with fewer than two elements.
    """
    if len(layout) < 2:
        return 0.0
    axes = np.stack([_axis_values(el.box) for el in layout.elements])
    n = axes.shape[0]
    total = 0.0
    for i in range(n):
        diffs = np.abs(axes[i][None, :] - axes[np.arange(n) != i])
        total += diffs.min()
    return total / n


def r_occ(layouts: Sequence[Layout]) -> float:
    """Fraction of non-empty layouts."""
    if len(layouts) == 0:
        raise EmptySetError("r_occ needs at least one layout")
    return sum(1 for lay in layouts if len(lay) > 0) / len(layouts)


def satisfies_attribute(layout: Layout, attr: AttributeConstraint) -> bool:
    """At least one attribute element and no undesired element."""
    if not attr.is_specified:
        raise UnspecifiedAttributeError("attribute satisfaction needs a concrete attribute")
    cats = layout.categories()
    return attr.attribute_category in cats and not (cats & attr.undesired)


def r_lac(layouts: Sequence[Layout], attr: AttributeConstraint) -> float:
    """Fraction of layouts satisfying the attribute constraint."""
    if len(layouts) == 0:
        raise EmptySetError("r_lac needs at least one layout")
    return sum(1 for lay in layouts if satisfies_attribute(lay, attr)) / len(layouts)


def r_plc(pred_flats: Sequence[np.ndarray], pls: Sequence[PartialLayout]) -> float:
    """Mean absolute deviation over all constrained slots across the set.

    Correspondence is positional: row i of a prediction answers row i of
    its partial layout.
    """
    if len(pred_flats) != len(pls):
        raise ShapeError("predictions and partial layouts must pair up")
    total = 0.0
    n = 0
    for flat, pl in zip(pred_flats, pls):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != pl.entries.shape:
            raise ShapeError(
                f"prediction shape {flat.shape} does not match partial layout "
                f"{pl.entries.shape}"
            )
        diffs = np.abs(flat - pl.entries)[pl.presence]
        total += diffs.sum()
        n += diffs.size
    if n == 0:
        raise EmptySetError("no constrained slots across the set")
    return total / n


def _sobel_magnitude(values: np.ndarray) -> np.ndarray:
    # Positive and negative kernel taps are accumulated separately with the
    # same operation order, so constant regions cancel to exactly zero.
    p = np.pad(values, 1, mode="edge")
    h, w = values.shape

    def window(dy, dx):
        return p[dy:dy + h, dx:dx + w]

    gx_pos = window(0, 2) + 2.0 * window(1, 2) + window(2, 2)
    gx_neg = window(0, 0) + 2.0 * window(1, 0) + window(2, 0)
    gy_pos = window(2, 0) + 2.0 * window(2, 1) + window(2, 2)
    gy_neg = window(0, 0) + 2.0 * window(0, 1) + window(0, 2)
    return np.hypot((gx_pos - gx_neg) / 8.0, (gy_pos - gy_neg) / 8.0)


def _box_pixel_mask(box: BBox, h: int, w: int) -> np.ndarray:
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    in_x = (xs >= box.x0) & (xs <= box.x1)
    in_y = (ys >= box.y0) & (ys <= box.y1)
    return in_y[:, None] & in_x[None, :]


def r_com(layout: Layout, gray: Grid) -> float:
    """Mean Sobel gradient magnitude under text elements; 0 with no text."""
    if gray.h < 3 or gray.w < 3:
        raise GridTooSmallError("gradient metric needs a grid of at least 3x3")
    texts = [el.box for el in layout.elements if el.category == Category.TEXT]
    if not texts:
        return 0.0
    magnitude = _sobel_magnitude(gray.values)
    total = 0.0
    for box in texts:
        mask = _box_pixel_mask(box, gray.h, gray.w)
        covered = magnitude[mask]
        total += covered.mean() if covered.size else 0.0
    return total / len(texts)


def _occlusion(layout: Layout, grid: Grid) -> float:
    if len(layout) == 0:
        return 0.0
    union = np.zeros((grid.h, grid.w), dtype=bool)
    for el in layout.elements:
        union |= _box_pixel_mask(el.box, grid.h, grid.w)
    covered = grid.values[union]
    return float(covered.mean()) if covered.size else 0.0


def r_shm(layout: Layout, saliency: Grid) -> float:
    """Mean saliency over pixels covered by any element."""
    return _occlusion(layout, saliency)


def r_sub(layout: Layout, attention: Grid) -> float:
    """Mean attention over pixels covered by any element."""
    return _occlusion(layout, attention)
