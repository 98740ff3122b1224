"""User constraints: attribute taxonomy, attribute noise, partial layouts.

Two constraint families are supported. An attribute constraint asks for
layouts that contain one category and exclude a set of undesired categories;
it is encoded for the generator as a 4-channel Gaussian noise field whose
per-channel means identify the attribute. A partial layout pins individual
scalar slots of the flat encoding (category block and/or box coordinates)
at specific query indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import BOX_SLOTS, CAT_SLOTS, FLAT_WIDTH, Q_MAX, Category
from .errors import (
    EmptyConstraintError,
    ParseError,
    ShapeError,
    ValidationError,
)


class AttributeKind(Enum):
    """The four attribute constraints plus the unspecified fallback."""

    TEXT_ONLY = "text"
    UNDERLAY_NO_LOGO_EMB = "underlay"
    LOGO_NO_EMB = "logo"
    WITH_EMBELLISHMENT = "embellishment"
    UNSPECIFIED = "unspecified"


_ATTRIBUTE_CATEGORY = {
    AttributeKind.TEXT_ONLY: Category.TEXT,
    AttributeKind.UNDERLAY_NO_LOGO_EMB: Category.UNDERLAY,
    AttributeKind.LOGO_NO_EMB: Category.LOGO,
    AttributeKind.WITH_EMBELLISHMENT: Category.EMBELLISHMENT,
}

_UNDESIRED = {
    AttributeKind.TEXT_ONLY: frozenset(
        {Category.UNDERLAY, Category.LOGO, Category.EMBELLISHMENT}
    ),
    AttributeKind.UNDERLAY_NO_LOGO_EMB: frozenset(
        {Category.LOGO, Category.EMBELLISHMENT}
    ),
    AttributeKind.LOGO_NO_EMB: frozenset({Category.EMBELLISHMENT}),
    AttributeKind.WITH_EMBELLISHMENT: frozenset(),
    AttributeKind.UNSPECIFIED: frozenset(),
}

_NOISE_MEAN = {
    AttributeKind.TEXT_ONLY: (1.0, -1.0, -1.0, 1.0),
    AttributeKind.UNDERLAY_NO_LOGO_EMB: (1.0, -1.0, 1.0, -1.0),
    AttributeKind.LOGO_NO_EMB: (1.0, 1.0, -1.0, -1.0),
    AttributeKind.WITH_EMBELLISHMENT: (1.0, 1.0, 1.0, 1.0),
    AttributeKind.UNSPECIFIED: (0.0, 0.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class AttributeConstraint:
    kind: AttributeKind

    @property
    def attribute_category(self) -> Category | None:
        return _ATTRIBUTE_CATEGORY.get(self.kind)

    @property
    def undesired(self) -> frozenset[Category]:
        return _UNDESIRED[self.kind]

    @property
    def is_specified(self) -> bool:
        return self.kind != AttributeKind.UNSPECIFIED

    @classmethod
    def from_name(cls, name: str) -> "AttributeConstraint":
        try:
            return cls(AttributeKind(name.strip().lower()))
        except ValueError:
            raise ValidationError(f"unknown attribute kind: {name!r}") from None


def attribute_mean(kind: AttributeKind | AttributeConstraint) -> np.ndarray:
    """The 4-channel noise mean identifying an attribute constraint."""
    if isinstance(kind, AttributeConstraint):
        kind = kind.kind
    return np.array(_NOISE_MEAN[kind], dtype=np.float64)


@dataclass(frozen=True)
class NoiseSpec:
    """Mean and spatial extent of the 4-channel conditioning noise."""

    mean: tuple[float, float, float, float]
    grid_h: int = 8
    grid_w: int = 8
    variance: float = 1.0

    def __post_init__(self):
        if len(self.mean) != 4:
            raise ValidationError("noise mean must have 4 channels")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValidationError("noise grid dimensions must be >= 1")
        if self.variance <= 0.0:
            raise ValidationError("noise variance must be positive")

    @classmethod
    def for_attribute(
        cls, kind: AttributeKind | AttributeConstraint, grid_h: int = 8, grid_w: int = 8
    ) -> "NoiseSpec":
        return cls(tuple(attribute_mean(kind)), grid_h, grid_w)


def sample_noise(spec: NoiseSpec, seed: int) -> np.ndarray:
    """Draw a (4, grid_h, grid_w) field of independent normals, one mean per channel."""
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((4, spec.grid_h, spec.grid_w))
    draws *= math.sqrt(spec.variance)
    draws += np.asarray(spec.mean, dtype=np.float64)[:, None, None]
    return draws


class PartialLayout:
    """Per-slot constraint values with explicit presence flags.

    entries is a (q, 9) float matrix; presence is a boolean matrix of the
    same shape that is true exactly on constrained slots. Entries outside
    the presence set are normalised to zero. On the canonical JSON path a
    constrained category always occupies its whole 5-slot one-hot block;
    the zero-convention ingest below may produce looser patterns.
    """

    __slots__ = ("entries", "presence")

    def __init__(self, entries: np.ndarray, presence: np.ndarray):
        entries = np.asarray(entries, dtype=np.float64)
        presence = np.asarray(presence, dtype=bool)
        if entries.ndim != 2 or entries.shape[1] != FLAT_WIDTH:
            raise ShapeError(f"partial layout entries must be (q, 9), got {entries.shape}")
        if presence.shape != entries.shape:
            raise ShapeError("presence mask must match entries shape")
        box_vals = entries[:, BOX_SLOTS][presence[:, BOX_SLOTS]]
        if box_vals.size and (np.any(box_vals < 0.0) or np.any(box_vals > 1.0)):
            raise ValidationError("constrained box values must lie in [0, 1]")
        self.entries = np.where(presence, entries, 0.0)
        self.presence = presence
        self.entries.setflags(write=False)
        self.presence.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_constrained(self) -> int:
        return int(self.presence.sum())

    def constrained_rows(self) -> np.ndarray:
        return np.flatnonzero(self.presence.any(axis=1))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PartialLayout)
            and np.array_equal(self.entries, other.entries)
            and np.array_equal(self.presence, other.presence)
        )

    @classmethod
    def empty(cls, q_total: int = Q_MAX) -> "PartialLayout":
        z = np.zeros((q_total, FLAT_WIDTH))
        return cls(z, np.zeros_like(z, dtype=bool))

    @classmethod
    def from_json(cls, text: str, q_total: int = Q_MAX) -> "PartialLayout":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed partial layout JSON: {exc}") from None
        if not isinstance(raw, dict) or "elements" not in raw:
            raise ValidationError("partial layout JSON needs an 'elements' key")
        entries = np.zeros((q_total, FLAT_WIDTH))
        presence = np.zeros((q_total, FLAT_WIDTH), dtype=bool)
        seen = set()
        for entry in raw["elements"]:
            idx = entry.get("index")
            if not isinstance(idx, int) or not (0 <= idx < q_total):
                raise ValidationError(f"element index out of range: {idx!r}")
            if idx in seen:
                raise ValidationError(f"duplicate element index: {idx}")
            seen.add(idx)
            cat_name = entry.get("category")
            if cat_name is not None:
                cat = Category.from_name(str(cat_name))
                if cat == Category.NONE:
                    raise ValidationError("cannot constrain category 'none'")
                presence[idx, CAT_SLOTS] = True
                entries[idx, cat] = 1.0
            for offset, key in enumerate(("cx", "cy", "w", "h")):
                value = entry.get(key)
                if value is not None:
                    presence[idx, 5 + offset] = True
                    entries[idx, 5 + offset] = float(value)
        return cls(entries, presence)

    def to_json(self) -> str:
        elements = []
        for idx in self.constrained_rows():
            entry: dict = {"index": int(idx)}
            if self.presence[idx, CAT_SLOTS].any():
                cat = Category(int(np.argmax(self.entries[idx, CAT_SLOTS])))
                entry["category"] = cat.json_name
            else:
                entry["category"] = None
            for offset, key in enumerate(("cx", "cy", "w", "h")):
                slot = 5 + offset
                entry[key] = float(self.entries[idx, slot]) if self.presence[idx, slot] else None
            elements.append(entry)
        return json.dumps({"elements": elements})


def presence_from_zero_convention(pl_values: np.ndarray) -> PartialLayout:
    """Build a PartialLayout marking every non-zero value as constrained.

    This mirrors the convention that derives the presence matrix from the
    raw value matrix; a legitimate constraint with value 0.0 is invisible to
    it, which is why the canonical ingest path uses explicit presence flags.
    """
    pl_values = np.asarray(pl_values, dtype=np.float64)
    if pl_values.ndim != 2 or pl_values.shape[1] != FLAT_WIDTH:
        raise ShapeError(f"value matrix must be (q, 9), got {pl_values.shape}")
    return PartialLayout(pl_values, pl_values != 0.0)


@dataclass(frozen=True)
class RandomMask:
    """Keep/drop mask over the constrained slots of a partial layout.

    mask holds 1 on kept slots and 0 on dropped slots; it is meaningful only
    where the partial layout's presence is true and is stored as 0 elsewhere.
    """

    mask: np.ndarray
    presence: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.float64))
        if self.mask.shape != self.presence.shape:
            raise ShapeError("mask and presence shapes differ")

    @property
    def n_zeros(self) -> int:
        return int(np.sum((self.mask == 0.0) & self.presence))

    @classmethod
    def all_ones(cls, pl: PartialLayout) -> "RandomMask":
        return cls(pl.presence.astype(np.float64), pl.presence)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _mask_units(presence: np.ndarray) -> list[list[int]]:
    """Flat-index groups that share one mask decision.

    The category block of a row is a single unit (class information is

    dropped as a whole); each box scalar is its own unit.
    """
    q = presence.shape[0]
    units = []
    for r in range(q):
        cat_idx = [r * FLAT_WIDTH + c for c in range(5) if presence[r, c]]
        if cat_idx:
            units.append(cat_idx)
        for c in range(5, FLAT_WIDTH):
            if presence[r, c]:
                units.append([r * FLAT_WIDTH + c])
    return units


def sample_random_mask(pl: PartialLayout, seed: int) -> RandomMask:
    """Draw a mask that zeroes exactly round(0.25 * n) of n constrained slots.

    Selection works over information units (whole category blocks, single
    box scalars). When the exact count cannot be met with whole units, one
    block is split; this keeps the zero count exact on every input.
    """
    n = pl.n_constrained
    if n == 0:
        raise EmptyConstraintError("partial layout has no constrained slot")
    target = _round_half_up(0.25 * n)
    rng = np.random.default_rng(seed)
    units = _mask_units(pl.presence)
    order = rng.permutation(len(units))
    dropped: list[int] = []
    remaining = target
    skipped: list[int] = []
    for ui in order:
        unit = units[ui]
        if remaining <= 0:
            break
        if len(unit) <= remaining:
            dropped.extend(unit)
            remaining -= len(unit)
        else:
            skipped.append(ui)
    if remaining > 0:
        # Only multi-slot units are ever skipped, so one of them can be split
        # to land exactly on the target.
        unit = units[skipped[0]]
        picks = rng.choice(len(unit), size=remaining, replace=False)
        dropped.extend(unit[p] for p in sorted(int(p) for p in picks))
    mask = pl.presence.astype(np.float64).copy()
    flat = mask.ravel()
    flat[dropped] = 0.0
    return RandomMask(mask, pl.presence)


def apply_mask(pl: PartialLayout, mask: RandomMask) -> PartialLayout:
    """The partial layout actually shown to the generator: dropped slots vanish."""
    if mask.mask.shape != pl.presence.shape:
        raise ShapeError("mask shape does not match partial layout")
    keep = pl.presence & (mask.mask != 0.0)
    return PartialLayout(np.where(keep, pl.entries, 0.0), keep)
