"""Domain types for layouts and their canonical flat encodings.

A layout is an ordered list of categorised, axis-aligned boxes on a reference
canvas. Boxes use a center+size convention with every coordinate normalised
to [0, 1]. The flat encoding of an element is a row of 9 scalars: a one-hot
block over the 5 categories followed by (cx, cy, w, h); unoccupied query
slots are padded with a one-hot on the "none" category and a zero box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import CapacityError, ParseError, ValidationError

Q_MAX = 10
CANVAS_W = 240
CANVAS_H = 350
N_CATEGORIES = 5
FLAT_WIDTH = 9
CAT_SLOTS = slice(0, 5)
BOX_SLOTS = slice(5, 9)

# Boxes overhanging the canvas by no more than this are treated as float
# noise and clamped silently.
EDGE_SLACK = 1e-6


class Category(IntEnum):
    """Element categories; the ordinal index is fixed across file formats."""

    TEXT = 0
    LOGO = 1
    UNDERLAY = 2
    EMBELLISHMENT = 3
    NONE = 4

    @property
    def json_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "Category":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValidationError(f"unknown category name: {name!r}") from None


REAL_CATEGORIES = (
    Category.TEXT,
    Category.LOGO,
    Category.UNDERLAY,
    Category.EMBELLISHMENT,
)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center+size, normalised to the unit canvas."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"box size out of range: ({self.w}, {self.h})")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h


def clamped_bbox(cx: float, cy: float, w: float, h: float) -> BBox:
    """Build a BBox, clamping edges that overhang the canvas.

    The center must lie inside the canvas and the size in (0, 1]; any part of
    the box outside the canvas is cut off. Boxes already inside pass through
    with their floats untouched, which keeps codec round-trips exact.
    """
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise ValidationError(f"box center out of range: ({cx}, {cy})")
    if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
        raise ValidationError(f"box size out of range: ({w}, {h})")
    x0, x1 = cx - w / 2.0, cx + w / 2.0
    y0, y1 = cy - h / 2.0, cy + h / 2.0
    if x0 < 0.0 or x1 > 1.0:
        x0, x1 = max(x0, 0.0), min(x1, 1.0)
        cx, w = (x0 + x1) / 2.0, x1 - x0
    if y0 < 0.0 or y1 > 1.0:
        y0, y1 = max(y0, 0.0), min(y1, 1.0)
        cy, h = (y0 + y1) / 2.0, y1 - y0
    return BBox(cx, cy, w, h)


@dataclass(frozen=True)
class Element:
    category: Category
    box: BBox

    def __post_init__(self):
        if self.category == Category.NONE:
            raise ValidationError("layout elements cannot have category 'none'")


@dataclass(frozen=True)
class Layout:
    """Ordered set of elements on a pixel canvas (reference 240x350)."""

    elements: tuple[Element, ...]
    canvas_w: int = CANVAS_W
    canvas_h: int = CANVAS_H

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if len(self.elements) > Q_MAX:
            raise ValidationError(
                f"layout has {len(self.elements)} elements, maximum is {Q_MAX}"
            )
        if self.canvas_w <= 0 or self.canvas_h <= 0:
            raise ValidationError("canvas dimensions must be positive")

    def __len__(self) -> int:
        return len(self.elements)

    def categories(self) -> set[Category]:
        return {el.category for el in self.elements}


@dataclass(frozen=True)
class PredictionBatch:
    """Per-query category probabilities and boxes emitted by a generator."""

    probs: np.ndarray   # (Q, 5), rows sum to 1
    boxes: np.ndarray   # (Q, 4), entries in [0, 1]
    logits: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "boxes", boxes)
        if probs.ndim != 2 or probs.shape[1] != N_CATEGORIES:
            raise ValidationError(f"probs must be (Q, 5), got {probs.shape}")
        if boxes.shape != (probs.shape[0], 4):
            raise ValidationError(f"boxes must be (Q, 4), got {boxes.shape}")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("probability rows must sum to 1 within 1e-9")
        if np.any(probs < 0.0):
            raise ValidationError("probabilities must be nonnegative")
        if np.any(boxes < 0.0) or np.any(boxes > 1.0):
            raise ValidationError("box coordinates must lie in [0, 1]")

    @property
    def n_queries(self) -> int:
        return self.probs.shape[0]


def hard_counts(pred: PredictionBatch) -> dict[Category, int]:
    """Count queries per argmax category; ties go to the lowest index."""
    idx = np.argmax(pred.probs, axis=1)
    return {cat: int(np.sum(idx == cat)) for cat in Category}


def flatten(layout: Layout, q_total: int = Q_MAX) -> np.ndarray:
    """Encode a layout as a (q_total, 9) matrix, element i in row i.

    Rows beyond the element count are padding: one-hot on "none", zero box.
    """
    if len(layout) > q_total:
        raise CapacityError(f"{len(layout)} elements exceed {q_total} slots")
    flat = np.zeros((q_total, FLAT_WIDTH), dtype=np.float64)
    flat[:, Category.NONE] = 1.0
    for i, el in enumerate(layout.elements):
        flat[i, :] = 0.0
        flat[i, el.category] = 1.0
        flat[i, BOX_SLOTS] = (el.box.cx, el.box.cy, el.box.w, el.box.h)
    return flat


def unflatten(
    flat: np.ndarray, canvas_w: int = CANVAS_W, canvas_h: int = CANVAS_H
) -> Layout:
    """Inverse of flatten: rows whose one-hot argmax is not "none" become elements."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[1] != FLAT_WIDTH:
        raise ValidationError(f"flat matrix must be (q, 9), got {flat.shape}")
    elements = []
    for row in flat:
        cat = Category(int(np.argmax(row[CAT_SLOTS])))
        if cat == Category.NONE:
            continue
        cx, cy, w, h = row[BOX_SLOTS]
        elements.append(Element(cat, BBox(float(cx), float(cy), float(w), float(h))))
    return Layout(tuple(elements), canvas_w, canvas_h)


def layout_from_json(text: str) -> Layout:
    """Decode and validate a layout from its JSON form."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed layout JSON: {exc}") from None
    if not isinstance(raw, dict) or "canvas" not in raw or "elements" not in raw:
        raise ValidationError("layout JSON needs 'canvas' and 'elements' keys")
    canvas = raw["canvas"]
    try:
        canvas_w, canvas_h = int(canvas["w"]), int(canvas["h"])
    except (TypeError, KeyError, ValueError):
        raise ValidationError("canvas must carry integer 'w' and 'h'") from None
    elements = []
    for entry in raw["elements"]:
        cat = Category.from_name(str(entry.get("category")))
        if cat == Category.NONE:
            raise ValidationError("category 'none' is not allowed in a layout")
        try:
            coords = [float(entry[k]) for k in ("cx", "cy", "w", "h")]
        except (TypeError, KeyError, ValueError):
            raise ValidationError(f"element is missing box coordinates: {entry}") from None
        elements.append(Element(cat, clamped_bbox(*coords)))
    return Layout(tuple(elements), canvas_w, canvas_h)


def layout_to_json(layout: Layout) -> str:
    """Serialise a layout; floats keep full round-trip precision."""
    doc = {
        "canvas": {"w": layout.canvas_w, "h": layout.canvas_h},
        "elements": [
            {
                "category": el.category.json_name,
                "cx": el.box.cx,
                "cy": el.box.cy,
                "w": el.box.w,
                "h": el.box.h,
            }
            for el in layout.elements
        ],
    }
    return json.dumps(doc)
