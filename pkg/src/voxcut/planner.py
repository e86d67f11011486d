"""Presence score maps over sampled structures and risk-constrained cut selection.

A score map holds one value per candidate cutting surface ``(axis, index)``;
arrays have shape ``(3, K)`` indexed ``[axis, index - 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .voxel import (AttributedVoxelGrid, Axis, CutAction, Side, all_actions, plane_selector,
                    quantize_ids)

NO_FEASIBLE_ACTION = None  # plan() returns None when nothing can be cut


@dataclass(frozen=True)
class TargetColorRange:
    f_min: tuple[float, float, float]
    f_max: tuple[float, float, float]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.f_min, self.f_max)):
            raise ValueError("f_min must not exceed f_max on any channel")

    @classmethod
    def around(cls, color: Sequence[float], tol: float = 0.1) -> "TargetColorRange":
        return cls(tuple(float(c) - tol for c in color), tuple(float(c) + tol for c in color))

    def contains(self, features: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.f_min), np.asarray(self.f_max)
        return np.all((features >= lo) & (features <= hi), axis=-1)


@dataclass(frozen=True)
class PlannerConfig:
    eta: float = 0.5
    gamma: float = 1.0
    M: int = 32
    scope: str = "slab"  # "slab" (whole removed slab) or "surface" (cut plane only)
    risk: str = "ucb"  # "ucb" or "max"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.scope not in ("slab", "surface"):
            raise ValueError(f"unknown feasibility scope {self.scope!r}")
        if self.risk not in ("ucb", "max"):
            raise ValueError(f"unknown risk functional {self.risk!r}")


@dataclass
class ScoreMap:
    mean: np.ndarray
    std: np.ndarray
    score: np.ndarray
    gamma: float

    @property
    def K(self) -> int:
        return self.mean.shape[1]

    def at(self, axis: Axis, index: int) -> float:
        return float(self.score[int(axis), index - 1])

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def part_detect(sample: AttributedVoxelGrid, axis: Axis, index: int, color_range: TargetColorRange,
                region: np.ndarray | None = None) -> int:
    """1 if any occupied voxel on the plane (inside ``region``) has a target-range colour."""
    sel = plane_selector(sample.K, axis, index)
    hit = sample.occupancy[sel] & color_range.contains(sample.features[sel])
    if region is not None:
        hit &= region[sel]
    return int(hit.any())


def target_hits(sample_ids: np.ndarray, part_table: Mapping[int, tuple], color_range: TargetColorRange) -> np.ndarray:
    """Boolean volume(s) of voxels whose quantized colour falls in the target range."""
    lut = np.zeros(256, bool)
    for pid, color in part_table.items():
        if pid != 0 and color_range.contains(np.asarray(color, float)):
            lut[pid] = True
    return lut[sample_ids]


def plane_presence(hits: np.ndarray) -> np.ndarray:
    """Per-sample ``(M, 3, K)`` plane detections from ``(M, K, K, K)`` hit volumes (z, y, x)."""
    x = hits.any(axis=(1, 2))  # planes along X: reduce z, y
    y = hits.any(axis=(1, 3))
    z = hits.any(axis=(2, 3))
    return np.stack([x, y, z], axis=1)


def score_from_detections(det: np.ndarray, gamma: float, risk: str = "ucb") -> ScoreMap:
    det = np.asarray(det, np.float64)
    mean = det.mean(axis=0)
    std = det.std(axis=0)  # population std
    score = mean + gamma * std if risk == "ucb" else det.max(axis=0)
    return ScoreMap(mean, std, score, gamma)


def score_map(samples, part_table: Mapping[int, tuple], color_range: TargetColorRange, gamma: float = 1.0,
              region: np.ndarray | None = None, risk: str = "ucb") -> ScoreMap:
    """Target presence score per cutting surface from M sampled tensors ``(M, K, K, K, 3)``.

    Samples are quantized to canonical part colours first; ``region`` restricts
    detection to the part of the grid still present.
    """
    arr = samples.samples if hasattr(samples, "samples") else np.asarray(samples)
    ids = np.stack([quantize_ids(s, part_table) for s in arr])
    hits = target_hits(ids, part_table, color_range)
    if region is not None:
        hits &= region[None]
    return score_from_detections(plane_presence(hits), gamma, risk)


def ground_truth_score_map(grid: AttributedVoxelGrid, target_part_id: int, gamma: float = 1.0,
                           region: np.ndarray | None = None) -> ScoreMap:
    hits = grid.part_ids == target_part_id
    if region is not None:
        hits = hits & region
    return score_from_detections(plane_presence(hits[None]), gamma)


# --- feasibility and volume --------------------------------------------------

def _slab_max(score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Running max from each end: low[a, i-1] = max score over planes 1..i, high over i..K."""
    low = np.maximum.accumulate(score, axis=1)
    high = np.maximum.accumulate(score[:, ::-1], axis=1)[:, ::-1]
    return low, high


def action_risk(smap: ScoreMap, action: CutAction, scope: str = "slab") -> float:
    if scope == "surface":
        return smap.at(action.axis, action.index)
    a, i = int(action.axis), action.index
    seg = smap.score[a, :i] if action.side is Side.LOW else smap.score[a, i - 1:]
    return float(seg.max())


def feasible_actions(smap: ScoreMap, kept: AttributedVoxelGrid | None, eta: float,
                     scope: str = "slab") -> list[CutAction]:
    K = smap.K
    low, high = _slab_max(smap.score)
    out = []
    for act in all_actions(K):
        a, i = int(act.axis), act.index - 1
        if scope == "surface":
            r = smap.score[a, i]
        else:
            r = low[a, i] if act.side is Side.LOW else high[a, i]
        if r <= eta:
            out.append(act)
    return out


def plane_counts(grid: AttributedVoxelGrid) -> np.ndarray:
    """Occupied voxels per plane, shape (3, K)."""
    occ = grid.occupancy
    return np.stack([occ.sum(axis=(0, 1)), occ.sum(axis=(0, 2)), occ.sum(axis=(1, 2))]).astype(np.int64)


def f_vol(kept: AttributedVoxelGrid, action: CutAction) -> int:
    counts = plane_counts(kept)[int(action.axis)]
    i = action.index
    return int(counts[:i].sum() if action.side is Side.LOW else counts[i - 1:].sum())


def volume_table(kept: AttributedVoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    counts = plane_counts(kept)
    low = np.cumsum(counts, axis=1)
    high = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1]
    return low, high


def plan(smap: ScoreMap, kept: AttributedVoxelGrid, config: PlannerConfig) -> CutAction | None:
    """Feasible action removing the most occupied voxels, or None.

    Ties resolve to the smaller axis (X < Y < Z), then Low before High, then
    the smaller index. Returns None when nothing is feasible or every feasible
    action removes zero voxels.
    """
    vlow, vhigh = volume_table(kept)
    best, best_vol = None, 0
    for act in feasible_actions(smap, kept, config.eta, config.scope):
        a, i = int(act.axis), act.index - 1
        vol = vlow[a, i] if act.side is Side.LOW else vhigh[a, i]
        if vol > best_vol:
            best, best_vol = act, int(vol)
    return best
