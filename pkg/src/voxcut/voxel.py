"""Attributed voxel grids, slices, masks and slab-cut geometry.

Arrays are stored row-major as ``[z, y, x]`` so the linear voxel index is
``(z * K + y) * K + x``. Plane indices exposed to callers are 1-based
(``1..K``) along the named axis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

EMPTY_ID = 0
SHELL_ID = 1


class VoxelError(ValueError):
    """Raised for out-of-range indices and malformed grids."""


class ConfigError(ValueError):
    """Raised for invalid configuration such as an empty part table."""


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2

    @property
    def dim(self) -> int:
        # array dimension holding this axis in [z, y, x] layout
        return 2 - int(self)


class Side(enum.IntEnum):
    LOW = 0
    HIGH = 1


@dataclass(frozen=True, order=True)
class CutAction:
    """Remove every layer on ``side`` of plane ``index`` (inclusive) along ``axis``."""

    axis: Axis
    index: int
    side: Side = Side.LOW

    def as_pair(self) -> tuple[int, str]:
        return self.index, self.axis.name

    def to_dict(self) -> dict:
        return {"axis": self.axis.name, "index": int(self.index), "side": self.side.name}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CutAction":
        return cls(Axis[d["axis"]], int(d["index"]), Side[d["side"]])

    @classmethod
    def parse(cls, text: str) -> "CutAction":
        """Parse ``"Y:1:low"`` style strings."""
        parts = text.replace(",", ":").split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"cannot parse cut action {text!r}; expected AXIS:INDEX[:SIDE]")
        side = Side[parts[2].upper()] if len(parts) == 3 else Side.LOW
        return cls(Axis[parts[0].upper()], int(parts[1]), side)

    def __str__(self) -> str:
        return f"{self.axis.name}:{self.index}:{self.side.name.lower()}"


def all_actions(K: int) -> list[CutAction]:
    """Every candidate action in tie-break order (axis, side, index)."""
    return [CutAction(a, i, s) for a in Axis for s in Side for i in range(1, K + 1)]


def _check_index(K: int, index: int) -> None:
    if not 1 <= index <= K:
        raise VoxelError(f"plane index {index} outside [1, {K}]")


def plane_selector(K: int, axis: Axis, index: int) -> tuple:
    _check_index(K, index)
    sel: list = [slice(None)] * 3
    sel[axis.dim] = index - 1
    return tuple(sel)


def slab_selector(K: int, action: CutAction) -> tuple:
    """Index expression selecting the slab removed by ``action``."""
    _check_index(K, action.index)
    sel: list = [slice(None)] * 3
    if action.side is Side.LOW:
        sel[action.axis.dim] = slice(0, action.index)
    else:
        sel[action.axis.dim] = slice(action.index - 1, K)
    return tuple(sel)


@dataclass(frozen=True)
class Slice:
    axis: Axis
    index: int
    features: np.ndarray  # (K, K, 3)
    occupancy: np.ndarray  # (K, K) bool


class AttributedVoxelGrid:
    """K^3 grid of part ids with a 3-channel feature colour per voxel.

    Occupancy is derived from ``part_ids != 0``. Instances are treated as
    immutable; the arrays are marked read-only.
    """

    __slots__ = ("part_ids", "features")

    def __init__(self, part_ids: np.ndarray, features: np.ndarray) -> None:
        part_ids = np.array(part_ids, dtype=np.uint8, copy=True)
        features = np.array(features, dtype=np.float32, copy=True)
        if part_ids.ndim != 3 or len(set(part_ids.shape)) != 1:
            raise VoxelError(f"part_ids must be K x K x K, got {part_ids.shape}")
        if features.shape != part_ids.shape + (3,):
            raise VoxelError(f"features shape {features.shape} does not match part_ids {part_ids.shape}")
        occ = part_ids != EMPTY_ID
        f = features[occ]
        if f.size and (not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0):
            raise VoxelError("occupied voxel features must be finite and in [0, 1]")
        features[~occ] = 0.0
        part_ids.setflags(write=False)
        features.setflags(write=False)
        self.part_ids = part_ids
        self.features = features

    @property
    def K(self) -> int:
        return self.part_ids.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return self.part_ids != EMPTY_ID

    @classmethod
    def empty(cls, K: int) -> "AttributedVoxelGrid":
        return cls(np.zeros((K, K, K), np.uint8), np.zeros((K, K, K, 3), np.float32))

    @classmethod
    def from_part_ids(cls, part_ids: np.ndarray, part_table: Mapping[int, tuple]) -> "AttributedVoxelGrid":
        part_ids = np.asarray(part_ids, dtype=np.uint8)
        lut = np.zeros((256, 3), np.float32)
        for pid, color in part_table.items():
            lut[pid] = color
        return cls(part_ids, lut[part_ids])

    def count(self, part_id: int | None = None) -> int:
        if part_id is None:
            return int(np.count_nonzero(self.part_ids))
        return int(np.count_nonzero(self.part_ids == part_id))

    def counts_by_part(self) -> dict[int, int]:
        ids, n = np.unique(self.part_ids[self.part_ids != EMPTY_ID], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, n)}

    def bounding_box(self) -> tuple[tuple[int, int], ...] | None:
        """Occupied extent as 1-based inclusive ``(lo, hi)`` per axis X, Y, Z."""
        occ = self.occupancy
        if not occ.any():
            return None
        out = []
        for axis in Axis:
            other = tuple(d for d in range(3) if d != axis.dim)
            nz = np.flatnonzero(occ.any(axis=other))
            out.append((int(nz[0]) + 1, int(nz[-1]) + 1))
        return tuple(out)

    def region_mask(self) -> np.ndarray:
        """Boolean mask of the occupied bounding box (the externally visible shape)."""
        box = self.bounding_box()
        mask = np.zeros(self.part_ids.shape, bool)
        if box is None:
            return mask
        (x0, x1), (y0, y1), (z0, z1) = box
        mask[z0 - 1:z1, y0 - 1:y1, x0 - 1:x1] = True
        return mask

    def masked(self, keep: np.ndarray) -> "AttributedVoxelGrid":
        ids = np.where(keep, self.part_ids, EMPTY_ID)
        return AttributedVoxelGrid(ids, self.features)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttributedVoxelGrid):
            return NotImplemented
        return np.array_equal(self.part_ids, other.part_ids) and np.array_equal(self.features, other.features)

    def __repr__(self) -> str:
        return f"AttributedVoxelGrid(K={self.K}, occupied={self.count()})"


def extract_slice(grid: AttributedVoxelGrid, axis: Axis, index: int) -> Slice:
    sel = plane_selector(grid.K, axis, index)
    return Slice(axis, index, grid.features[sel].copy(), grid.occupancy[sel].copy())


def assemble_slices(slices: list[Slice], part_ids: list[np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack K slices along their common axis back into (features, occupancy) volumes."""
    K = len(slices)
    axis = slices[0].axis
    feats = np.zeros((K, K, K, 3), np.float32)
    occ = np.zeros((K, K, K), bool)
    for s in slices:
        if s.axis is not axis:
            raise VoxelError("slices must share one axis")
        sel = plane_selector(K, axis, s.index)
        feats[sel] = s.features
        occ[sel] = s.occupancy
    return feats, occ


def apply_cut(grid: AttributedVoxelGrid, action: CutAction) -> tuple[AttributedVoxelGrid, AttributedVoxelGrid]:
    """Split ``grid`` into ``(removed, kept)`` along the slab of ``action``.

    The slab runs from the grid boundary on ``action.side`` to the cut plane
    inclusive; outside the occupied extent there is nothing to remove, so this
    equals the slab from the current bounding extent.
    """
    in_slab = np.zeros(grid.part_ids.shape, bool)
    in_slab[slab_selector(grid.K, action)] = True
    return grid.masked(in_slab), grid.masked(~in_slab)


def slab_volume(grid: AttributedVoxelGrid, action: CutAction) -> int:
    return int(np.count_nonzero(grid.part_ids[slab_selector(grid.K, action)]))


# --- tensor bridge -----------------------------------------------------------

def voxelize_to_tensor(grid: AttributedVoxelGrid) -> np.ndarray:
    """Map features to ``[-1, 1]`` (``2f - 1``); empty voxels become ``(-1, -1, -1)``."""
    t = 2.0 * grid.features - 1.0
    t[~grid.occupancy] = -1.0
    return t.astype(np.float32)


def canonical_palette(part_table: Mapping[int, tuple]) -> tuple[np.ndarray, np.ndarray]:
    """Sorted part ids (empty first) and their tensor-space colours."""
    if not part_table:
        raise ConfigError("part table is empty")
    ids = sorted(int(p) for p in part_table if int(p) != EMPTY_ID)
    colors = [(-1.0, -1.0, -1.0)] + [tuple(2.0 * np.asarray(part_table[p], float) - 1.0) for p in ids]
    return np.array([EMPTY_ID] + ids, np.int64), np.array(colors, np.float64)


def quantize_ids(tensor: np.ndarray, part_table: Mapping[int, tuple]) -> np.ndarray:
    """Nearest canonical part id per voxel; ties go to the lowest id."""
    tensor = np.asarray(tensor)
    if not np.all(np.isfinite(tensor)):
        raise VoxelError("tensor contains non-finite values")
    ids, palette = canonical_palette(part_table)
    flat = tensor.reshape(-1, 3).astype(np.float64)
    d2 = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(-1)
    return ids[np.argmin(d2, axis=1)].reshape(tensor.shape[:-1]).astype(np.uint8)


def quantize_to_grid(tensor: np.ndarray, part_table: Mapping[int, tuple]) -> AttributedVoxelGrid:
    return AttributedVoxelGrid.from_part_ids(quantize_ids(tensor, part_table), part_table)
