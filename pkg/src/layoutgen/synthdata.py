"""Deterministic synthetic dataset: layouts with realistic category
statistics, paired saliency/attention rasters, attribute labels, and
extracted partial layouts, plus ASCII PGM grid I/O.

Every sample is generated from a counter-derived seed, so a dataset is a
pure function of its spec. Saliency is a sum of 1-3 Gaussian blobs (the
subject); attention is the first blob alone (the product region), hence a
pointwise subset of the saliency. Each underlay is paired with a text
element it fully contains, and element boxes avoid the saliency peak with
probability 0.9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constraints import (
    AttributeConstraint,
    AttributeKind,
    PartialLayout,
)
from .core import (
    BBox,
    CAT_SLOTS,
    Category,
    Element,
    FLAT_WIDTH,
    Layout,
    Q_MAX,
    flatten,
    layout_from_json,
    layout_to_json,
)
from .errors import EmptyLayoutError, FormatError, ValidationError
from .metrics import Grid

# Target category shares: text, logo, underlay, embellishment.
DEFAULT_PROPORTIONS = (0.6112, 0.1289, 0.2276, 0.0323)


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int
    seed: int = 0
    grid_h: int = 93
    grid_w: int = 64
    proportions: tuple[float, float, float, float] = DEFAULT_PROPORTIONS
    min_elements: int = 1
    max_elements: int = Q_MAX

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if abs(sum(self.proportions) - 1.0) > 1e-4:
            raise ValidationError("category proportions must sum to 1 within 1e-4")
        if not (1 <= self.min_elements <= self.max_elements <= Q_MAX):
            raise ValidationError("element count range must fit in [1, Q_MAX]")


@dataclass
class Sample:
    layout: Layout
    saliency: Grid
    attention: Grid
    attribute: AttributeConstraint
    partial: PartialLayout

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.layout == other.layout
            and self.saliency == other.saliency
            and self.attention == other.attention
            and self.attribute == other.attribute
            and self.partial == other.partial
        )


def label_attribute(layout: Layout) -> AttributeConstraint:
    """Most restrictive attribute the layout satisfies, or unspecified."""
    order = (
        AttributeKind.TEXT_ONLY,
        AttributeKind.UNDERLAY_NO_LOGO_EMB,
        AttributeKind.LOGO_NO_EMB,
        AttributeKind.WITH_EMBELLISHMENT,
    )
    cats = layout.categories()
    for kind in order:
        attr = AttributeConstraint(kind)
        if attr.attribute_category in cats and not (cats & attr.undesired):
            return attr
    return AttributeConstraint(AttributeKind.UNSPECIFIED)


def _grids(rng: np.random.Generator, h: int, w: int) -> tuple[Grid, Grid]:
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    xx, yy = np.meshgrid(xs, ys)
    n_blobs = int(rng.integers(1, 4))
    total = np.zeros((h, w))
    first = None
    for _ in range(n_blobs):
        bx, by = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.08, 0.18)
        amp = rng.uniform(0.5, 1.0)
        blob = amp * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2.0 * sigma**2))
        total += blob
        if first is None:
            first = blob
    return Grid(np.clip(total, 0.0, 1.0)), Grid(np.clip(first, 0.0, 1.0))


_SIZE_RANGES = {
    Category.TEXT: ((0.25, 0.65), (0.04, 0.10)),
    Category.LOGO: ((0.10, 0.30), (0.05, 0.14)),
    Category.UNDERLAY: ((0.30, 0.70), (0.10, 0.24)),
    Category.EMBELLISHMENT: ((0.05, 0.20), (0.05, 0.20)),
}


def _place(rng: np.random.Generator, w: float, h: float,
           peak: tuple[float, float], avoid: bool) -> BBox:
    for _ in range(20):
        cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
        cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
        box = BBox(cx, cy, w, h)
        if not avoid:
            return box
        if not (box.x0 <= peak[0] <= box.x1 and box.y0 <= peak[1] <= box.y1):
            return box
    return box


def _sample_box(rng: np.random.Generator, cat: Category,
                peak: tuple[float, float]) -> BBox:
    (w_lo, w_hi), (h_lo, h_hi) = _SIZE_RANGES[cat]
    w = rng.uniform(w_lo, w_hi)
    h = rng.uniform(h_lo, h_hi)
    avoid = rng.random() < 0.9
    return _place(rng, w, h, peak, avoid)


def _contained_text(rng: np.random.Generator, underlay: BBox) -> BBox:
    w = underlay.w * rng.uniform(0.5, 0.85)
    h = underlay.h * rng.uniform(0.35, 0.7)
    cx = rng.uniform(underlay.x0 + w / 2.0, underlay.x1 - w / 2.0)
    cy = rng.uniform(underlay.y0 + h / 2.0, underlay.y1 - h / 2.0)
    return BBox(cx, cy, w, h)


def _draw_probs(proportions: tuple[float, float, float, float]) -> np.ndarray:
    """Per-draw category probabilities, correcting for the underlay+text pair.

    An underlay draw emits two elements (underlay plus its text), so the
    draw distribution is solved from the target slot shares.
    """
    p_t, p_l, p_u, p_e = proportions
    q_u = p_u / (1.0 - p_u)
    scale = 1.0 + q_u
    q = np.array([p_t * scale - q_u, p_l * scale, q_u, p_e * scale])
    return q / q.sum()


def _sample_layout(rng: np.random.Generator, spec: DatasetSpec,
                   saliency: Grid) -> Layout:
    peak_idx = np.unravel_index(int(np.argmax(saliency.values)), saliency.values.shape)
    peak = ((peak_idx[1] + 0.5) / saliency.w, (peak_idx[0] + 0.5) / saliency.h)
    n_target = int(rng.integers(spec.min_elements, spec.max_elements + 1))
    draw_p = _draw_probs(spec.proportions)
    cats = (Category.TEXT, Category.LOGO, Category.UNDERLAY, Category.EMBELLISHMENT)
    elements: list[Element] = []
    while len(elements) < n_target:
        remaining = n_target - len(elements)
        p = draw_p
        if remaining < 2:
            # No room for the underlay+text pair; renormalise over the rest.
            p = draw_p.copy()
            p[2] = 0.0
            p = p / p.sum()
        cat = cats[int(rng.choice(4, p=p))]
        if cat == Category.UNDERLAY:
            under = _sample_box(rng, cat, peak)
            elements.append(Element(Category.UNDERLAY, under))
            elements.append(Element(Category.TEXT, _contained_text(rng, under)))
        else:
            elements.append(Element(cat, _sample_box(rng, cat, peak)))
    return Layout(tuple(elements))


def extract_partial(layout: Layout, seed: int, q_total: int = Q_MAX) -> PartialLayout:
    """Constrain 25% of the layout's box scalar slots, chosen uniformly.

    When all four box slots of an element are selected, the whole element is
    considered given and its category block is constrained as well.
    """
    m = len(layout)
    if m == 0:
        raise EmptyLayoutError("cannot extract a partial layout from an empty layout")
    rng = np.random.default_rng(seed)
    n_slots = 4 * m
    k = int(math.floor(0.25 * n_slots + 0.5))
    picks = rng.choice(n_slots, size=k, replace=False)
    flat = flatten(layout, q_total)
    entries = np.zeros((q_total, FLAT_WIDTH))
    presence = np.zeros((q_total, FLAT_WIDTH), dtype=bool)
    per_element: dict[int, set[int]] = {}
    for pick in sorted(int(p) for p in picks):
        row, offset = divmod(pick, 4)
        slot = 5 + offset
        presence[row, slot] = True
        entries[row, slot] = flat[row, slot]
        per_element.setdefault(row, set()).add(offset)
    for row, offsets in per_element.items():
        if len(offsets) == 4:
            presence[row, CAT_SLOTS] = True
            entries[row, CAT_SLOTS] = flat[row, CAT_SLOTS]
    return PartialLayout(entries, presence)


def _pick_elements(rng: np.random.Generator, m: int) -> list[int]:
    k = max(1, int(math.floor(0.25 * m + 0.5)))
    return sorted(int(r) for r in rng.choice(m, size=k, replace=False))


def extract_partial_elements(layout: Layout, seed: int, q_total: int = Q_MAX) -> PartialLayout:
    """Constrain about a quarter of the elements completely (class and box).

    This is the training-time flavour of partial layouts: whole elements are
    given, and the random mask then manufactures incomplete ones from them.
    """
    m = len(layout)
    if m == 0:
        raise EmptyLayoutError("cannot extract a partial layout from an empty layout")
    rng = np.random.default_rng(seed)
    flat = flatten(layout, q_total)
    entries = np.zeros((q_total, FLAT_WIDTH))
    presence = np.zeros((q_total, FLAT_WIDTH), dtype=bool)
    for row in _pick_elements(rng, m):
        presence[row, :] = True
        entries[row, :] = flat[row, :]
    return PartialLayout(entries, presence)


def coords_only_partial(layout: Layout, seed: int, q_total: int = Q_MAX) -> PartialLayout:
    """Complete box coordinates for about a quarter of the elements, no classes.

    Used by the incomplete-element evaluation protocol: the generator sees
    where boxes must go but not what they are.
    """
    m = len(layout)
    if m == 0:
        raise EmptyLayoutError("cannot extract a partial layout from an empty layout")
    rng = np.random.default_rng(seed)
    flat = flatten(layout, q_total)
    entries = np.zeros((q_total, FLAT_WIDTH))
    presence = np.zeros((q_total, FLAT_WIDTH), dtype=bool)
    for row in _pick_elements(rng, m):
        presence[row, 5:] = True
        entries[row, 5:] = flat[row, 5:]
    return PartialLayout(entries, presence)


def generate(spec: DatasetSpec) -> list[Sample]:
    """Produce the dataset for a spec; identical specs give identical data."""
    samples = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, i])
        saliency, attention = _grids(rng, spec.grid_h, spec.grid_w)
        layout = _sample_layout(rng, spec, saliency)
        partial = extract_partial_elements(layout, seed=int(rng.integers(0, 2**31)))
        samples.append(
            Sample(layout, saliency, attention, label_attribute(layout), partial)
        )
    return samples


def save_grid(grid: Grid, path: str | Path) -> None:
    """Write an ASCII PGM (P2, maxval 255); values are rounded half-up."""
    ints = np.floor(grid.values * 255.0 + 0.5).astype(int)
    ints = np.clip(ints, 0, 255)
    lines = ["P2", f"{grid.w} {grid.h}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in ints)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def load_grid(path: str | Path) -> Grid:
    """Read an ASCII PGM (P2, maxval 255) into a [0, 1] grid."""
    text = Path(path).read_text(encoding="ascii")
    stripped = []
    for line in text.splitlines():
        hash_pos = line.find("#")
        stripped.append(line if hash_pos < 0 else line[:hash_pos])
    tokens = " ".join(stripped).split()
    if not tokens or tokens[0] != "P2":
        raise FormatError("not an ASCII PGM (missing P2 magic)")
    if len(tokens) < 4:
        raise FormatError("truncated PGM header")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("PGM header fields must be integers") from None
    if w < 1 or h < 1:
        raise FormatError("PGM dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"expected maxval 255, got {maxval}")
    values = tokens[4:]
    if len(values) != w * h:
        raise FormatError(f"expected {w * h} pixel values, found {len(values)}")
    try:
        pixels = np.array([int(value) for value in values], dtype=np.float64)
    except ValueError:
        raise FormatError("PGM pixel values must be integers") from None
    if np.any(pixels < 0) or np.any(pixels > maxval):
        raise FormatError("PGM pixel value out of range")
    return Grid(pixels.reshape(h, w) / 255.0)


def save_dataset(directory: str | Path, samples: list[Sample]) -> None:
    """One subdirectory per sample with layout, partial, grids, and label."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        d = root / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        (d / "layout.json").write_text(layout_to_json(sample.layout))
        (d / "partial.json").write_text(sample.partial.to_json())
        save_grid(sample.saliency, d / "saliency.pgm")
        save_grid(sample.attention, d / "attention.pgm")
        (d / "attr.txt").write_text(sample.attribute.kind.value + "\n")


def load_dataset(directory: str | Path) -> list[Sample]:
    root = Path(directory)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not dirs:
        raise FormatError(f"no sample directories under {root}")
    samples = []
    for d in dirs:
        layout = layout_from_json((d / "layout.json").read_text())
        partial = PartialLayout.from_json((d / "partial.json").read_text())
        saliency = load_grid(d / "saliency.pgm")
        attention = load_grid(d / "attention.pgm")
        attribute = AttributeConstraint.from_name((d / "attr.txt").read_text().strip())
        samples.append(Sample(layout, saliency, attention, attribute, partial))
    return samples
