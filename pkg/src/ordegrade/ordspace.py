"""Composition ordinal embedding space.

A bin center for a degradation type is ``anchor + ordinal(level) + shift``: a
fixed type direction, a sinusoidal code of the normalized severity and a
learnable per-bin offset.  Continuous targets between bins come from slerp.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .degrade import LEVEL_RANGES, TYPES, DegradationType, as_type
from .errors import InvalidGapError, OutOfRangeError, ShapeMismatchError
from .numerics import normalize_rows, slerp_rows

DEFAULT_D = 512
DEFAULT_F = 10000.0
DEFAULT_GAP = 5.0


@dataclass(frozen=True)
class OrdinalEncoderSpec:
    d: int = DEFAULT_D
    f: float = DEFAULT_F

    def __post_init__(self):
        if self.d < 8 or self.d % 2:
            raise ValueError("embedding dimension must be even and >= 8")
        if not self.f > 1:
            raise ValueError("frequency base must be > 1")

    def frequencies(self) -> np.ndarray:
        j = np.arange(self.d)
        return np.exp(-j / self.d * math.log(self.f))


def ordinal_embeddings(spec: OrdinalEncoderSpec, level_norms) -> np.ndarray:
    """Rows of sinusoidal codes: cos on even components, sin on odd ones."""
    u = np.atleast_1d(np.asarray(level_norms, dtype=np.float64))
    if np.any(u < 0.0) or np.any(u > 1.0) or not np.all(np.isfinite(u)):
        raise OutOfRangeError("normalized level must lie in [0, 1]")
    phase = u[:, None] * spec.frequencies()[None, :]
    out = np.empty_like(phase)
    out[:, 0::2] = np.cos(phase[:, 0::2])
    out[:, 1::2] = np.sin(phase[:, 1::2])
    return out


def ordinal_embedding(spec: OrdinalEncoderSpec, level_norm: float) -> np.ndarray:
    return ordinal_embeddings(spec, [level_norm])[0]


@dataclass(frozen=True)
class TypeAnchor:
    type: DegradationType
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("type anchors must have unit norm")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "type", as_type(self.type))
        object.__setattr__(self, "vector", v)


def make_anchors(d: int, seed: int = 0) -> dict[DegradationType, TypeAnchor]:
    """Orthonormal type directions from a seeded QR of Gaussian vectors."""
    rng = np.random.default_rng([seed, 0xA17C])
    g = rng.standard_normal((d, len(TYPES)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))[None, :]
    return {t: TypeAnchor(t, q[:, i]) for i, t in enumerate(TYPES)}


def n_bins(gap: float) -> int:
    if not 0 < gap <= 100:
        raise InvalidGapError(f"gap must lie in (0, 100], got {gap}")
    return int(math.floor(100.0 / gap + 1e-9)) + 1


def bin_level_norms(gap: float) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins(gap))


@dataclass
class ShiftTable:
    """Learnable per-bin offsets, one (n_bins, d) array per type."""

    tables: dict[DegradationType, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, spec: OrdinalEncoderSpec, gap: float) -> "ShiftTable":
        n = n_bins(gap)
        return cls({t: np.zeros((n, spec.d)) for t in TYPES})

    def __getitem__(self, t) -> np.ndarray:
        return self.tables[as_type(t)]

    def copy(self) -> "ShiftTable":
        return ShiftTable({t: a.copy() for t, a in self.tables.items()})


@dataclass(frozen=True)
class BinGrid:
    type: DegradationType
    gap: float | None
    levels: np.ndarray
    level_norms: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.level_norms) <= 0):
            raise ValueError("bin levels must be strictly increasing in severity")
        if self.centers.shape[0] != self.level_norms.size:
            raise ShapeMismatchError("one center per bin required")

    @property
    def n_bins(self) -> int:
        return int(self.level_norms.size)

    def unit_centers(self) -> np.ndarray:
        return normalize_rows(self.centers)[0]


def _anchor_vector(anchor) -> tuple[np.ndarray, DegradationType | None]:
    if isinstance(anchor, TypeAnchor):
        return anchor.vector, anchor.type
    return np.asarray(anchor, dtype=np.float64), None


def normalize_level(t: DegradationType, level: float) -> float:
    r = LEVEL_RANGES[as_type(t)]
    if not r.contains(level):
        raise OutOfRangeError(f"{r.type.value} level {level} outside [{r.min}, {r.max}]")
    return float(np.clip(r.normalize(level), 0.0, 1.0))


def compose_bin(anchor, spec: OrdinalEncoderSpec, level: float, shift, type_=None) -> np.ndarray:
    """anchor + ordinal(normalized level) + shift.

    ``anchor`` is a TypeAnchor or a raw vector; with a raw vector pass ``type_``
    so the level can be normalized against the right range.
    """
    vec, t = _anchor_vector(anchor)
    t = as_type(type_) if type_ is not None else t
    if t is None:
        raise ValueError("degradation type required to normalize the level")
    shift = np.asarray(shift, dtype=np.float64)
    if vec.shape != (spec.d,) or shift.shape != (spec.d,):
        raise ShapeMismatchError("anchor and shift must have length d")
    return vec + ordinal_embedding(spec, normalize_level(t, level)) + shift


def build_bin_grid(
    type_,
    spec: OrdinalEncoderSpec,
    anchors: Mapping[DegradationType, TypeAnchor],
    shifts: ShiftTable,
    gap: float = DEFAULT_GAP,
) -> BinGrid:
    t = as_type(type_)
    norms = bin_level_norms(gap)
    shift = shifts[t]
    if shift.shape != (norms.size, spec.d):
        raise ShapeMismatchError(f"shift table {shift.shape} does not match {norms.size} bins of dim {spec.d}")
    r = LEVEL_RANGES[t]
    levels = np.array([r.denormalize(u) for u in norms])
    centers = anchors[t].vector[None, :] + ordinal_embeddings(spec, norms) + shift
    return BinGrid(t, float(gap), levels, norms, centers)


def build_grids(spec, anchors, shifts, gap=DEFAULT_GAP) -> dict[DegradationType, BinGrid]:
    return {t: build_bin_grid(t, spec, anchors, shifts, gap) for t in TYPES}


def grid_from_levels(type_, spec: OrdinalEncoderSpec, anchor, levels, shifts=None) -> BinGrid:
    """A grid at explicit raw levels, e.g. to reproduce a hand-picked bin layout."""
    t = as_type(type_)
    levels = np.asarray(levels, dtype=np.float64)
    norms = np.array([normalize_level(t, v) for v in levels])
    order = np.argsort(norms)
    levels, norms = levels[order], norms[order]
    vec, _ = _anchor_vector(anchor)
    shift = np.zeros((levels.size, spec.d)) if shifts is None else np.asarray(shifts)[order]
    centers = vec[None, :] + ordinal_embeddings(spec, norms) + shift
    return BinGrid(t, None, levels, norms, centers)


def locate(grid: BinGrid, level_norms) -> tuple[np.ndarray, np.ndarray]:
    """Lower bracketing bin index and local fraction in [0, 1] for each level."""
    return bracket(grid.level_norms, level_norms)


def bracket(norms: np.ndarray, level_norms) -> tuple[np.ndarray, np.ndarray]:
    u = np.atleast_1d(np.asarray(level_norms, dtype=np.float64))
    if np.any(u < norms[0] - 1e-12) or np.any(u > norms[-1] + 1e-12):
        raise OutOfRangeError("level outside the grid's span")
    lo = np.clip(np.searchsorted(norms, u, side="right") - 1, 0, norms.size - 2)
    frac = np.clip((u - norms[lo]) / (norms[lo + 1] - norms[lo]), 0.0, 1.0)
    return lo, frac


def slerp_targets(grid: BinGrid, level_norms) -> np.ndarray:
    lo, frac = locate(grid, level_norms)
    out, _ = slerp_rows(grid.centers[lo], grid.centers[lo + 1], frac)
    return out


def slerp_target(grid: BinGrid, level: float) -> np.ndarray:
    """Unit target embedding for a raw level, slerped between its bracketing bins."""
    r = LEVEL_RANGES[grid.type]
    if not r.contains(level):
        raise OutOfRangeError(f"{grid.type.value} level {level} outside [{r.min}, {r.max}]")
    u = float(np.clip(r.normalize(level), 0.0, 1.0))
    hit = np.flatnonzero(np.isclose(grid.level_norms, u, rtol=0.0, atol=1e-12))
    if hit.size:
        return grid.unit_centers()[hit[0]]
    return slerp_targets(grid, [u])[0]


def grid_to_json(grid: BinGrid, spec: OrdinalEncoderSpec) -> dict:
    return {
        "type": grid.type.value,
        "gap": grid.gap,
        "bins": [{"level": float(v), "level_norm": float(u)} for v, u in zip(grid.levels, grid.level_norms)],
        "d": spec.d,
        "f": spec.f,
    }


def dump_grid(grid: BinGrid, spec: OrdinalEncoderSpec, path) -> None:
    Path(path).write_text(json.dumps(grid_to_json(grid, spec), indent=2), encoding="utf-8")


def export_centers_csv(grid: BinGrid, path) -> None:
    """One row per bin: level, level_norm, then the d center components."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "level_norm"] + [f"c{j}" for j in range(grid.centers.shape[1])])
        for v, u, c in zip(grid.levels, grid.level_norms, grid.centers):
            w.writerow([repr(float(v)), repr(float(u))] + [repr(float(x)) for x in c])


def similarity_matrix(grid: BinGrid) -> np.ndarray:
    """Cosine similarity between every pair of bin centers."""
    u = grid.unit_centers()
    return np.clip(u @ u.T, -1.0, 1.0)
