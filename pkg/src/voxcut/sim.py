"""Cutting episodes on a ground-truth scene.

Each cut removes a slab, credits the removed voxels to a per-part ledger and
exposes the adjacent kept plane as a new observation. Observations of
voxels that are later cut away are dropped from the condition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .voxel import (AttributedVoxelGrid, ConfigError, CutAction, Side, Slice, apply_cut, extract_slice,
                    plane_selector)
from .diffusion import Condition


class IntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scene:
    grid: AttributedVoxelGrid
    part_table: Mapping[int, tuple]
    target_part_id: int
    name: str = "scene"

    @property
    def K(self) -> int:
        return self.grid.K


@dataclass
class ObservationState:
    observed: np.ndarray  # (K, K, K, 3) tensor space, zero off-mask
    mask: np.ndarray  # (K, K, K) bool
    history: list[tuple[int, CutAction, Slice | None]] = field(default_factory=list)

    @classmethod
    def empty(cls, K: int) -> "ObservationState":
        return cls(np.zeros((K, K, K, 3), np.float32), np.zeros((K, K, K), bool), [])

    def condition(self) -> Condition:
        return Condition(self.observed.copy(), self.mask.copy(), False)

    def record(self, t: int, action: CutAction, kept: AttributedVoxelGrid) -> Slice | None:
        """Drop observations of removed voxels, then observe the plane exposed by ``action``."""
        self.mask &= kept.occupancy
        self.observed[~self.mask] = 0.0
        plane = action.index + 1 if action.side is Side.LOW else action.index - 1
        sl = None
        if 1 <= plane <= kept.K:
            sl = extract_slice(kept, action.axis, plane)
            sel = plane_selector(kept.K, action.axis, plane)
            self.mask[sel] |= sl.occupancy
            self.observed[sel] = np.where(sl.occupancy[..., None], 2.0 * sl.features - 1.0, 0.0)
            self.observed[~self.mask] = 0.0
        self.history.append((t, action, sl))
        return sl

    def rebuild(self, kept: AttributedVoxelGrid) -> tuple[np.ndarray, np.ndarray]:
        """Recompute (observed, mask) from the surviving history; used as a consistency check."""
        K = kept.K
        observed = np.zeros((K, K, K, 3), np.float32)
        mask = np.zeros((K, K, K), bool)
        for _, _, sl in self.history:
            if sl is None:
                continue
            sel = plane_selector(K, sl.axis, sl.index)
            mask[sel] |= sl.occupancy
            observed[sel] = np.where(sl.occupancy[..., None], 2.0 * sl.features - 1.0, observed[sel])
        mask &= kept.occupancy
        observed[~mask] = 0.0
        return observed, mask


@dataclass
class EpisodeState:
    kept: AttributedVoxelGrid
    target_part_id: int
    initial_counts: dict[int, int]
    discarded: dict[int, int] = field(default_factory=dict)
    t: int = 0

    @property
    def initial_target(self) -> int:
        return self.initial_counts.get(self.target_part_id, 0)

    def metrics(self) -> dict:
        target = self.kept.count(self.target_part_id)
        total = self.kept.count()
        init = self.initial_target
        return {
            "cut_error_volume": int(self.discarded.get(self.target_part_id, 0)),
            "remaining_rate": 100.0 * target / init if init else 0.0,
            "occupancy_rate": 100.0 * target / total if total else 0.0,
        }

    def check_conservation(self) -> None:
        now = self.kept.counts_by_part()
        for pid in set(self.initial_counts) | set(now) | set(self.discarded):
            if now.get(pid, 0) + self.discarded.get(pid, 0) != self.initial_counts.get(pid, 0):
                raise IntegrityError(f"volume of part {pid} not conserved")


def _cut(ep: EpisodeState, obs: ObservationState, action: CutAction) -> dict[int, int]:
    removed, kept = apply_cut(ep.kept, action)
    counts = removed.counts_by_part()
    for pid, n in counts.items():
        ep.discarded[pid] = ep.discarded.get(pid, 0) + n
    ep.kept = kept
    ep.t += 1
    obs.record(ep.t, action, kept)
    return counts


def init_episode(scene: Scene, initial_action: CutAction) -> tuple[EpisodeState, ObservationState]:
    """Apply the configured first cut, which must not touch the target part."""
    removed, _ = apply_cut(scene.grid, initial_action)
    if removed.count(scene.target_part_id):
        raise ConfigError(f"initial cut {initial_action} removes target voxels")
    ep = EpisodeState(scene.grid, scene.target_part_id, scene.grid.counts_by_part())
    obs = ObservationState.empty(scene.K)
    _cut(ep, obs, initial_action)
    return ep, obs


def step(ep: EpisodeState, obs: ObservationState, action: CutAction | None, T: int | None = None) -> dict[int, int]:
    """Execute one cut (or a no-op when ``action`` is None); returns removed voxels per part."""
    if T is not None and ep.t >= T:
        raise ConfigError(f"episode already at t={ep.t} >= T={T}")
    if action is None:
        ep.t += 1
        return {}
    return _cut(ep, obs, action)


# --- full episodes -----------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    T: int = 8
    initial_action: CutAction = CutAction.parse("Y:1:low")
    seed: int = 0


class Planner(Protocol):
    name: str

    def propose(self, scene: Scene, ep: EpisodeState, obs: ObservationState, seed: int) -> "Proposal": ...


@dataclass
class Proposal:
    action: CutAction | None
    score_map: object | None = None
    summary: dict = field(default_factory=dict)


@dataclass
class EpisodeRecord:
    scene: str
    planner: str
    config: dict
    steps: list[dict]
    final: dict

    def to_jsonl(self) -> str:
        lines = [json.dumps(s, sort_keys=True) for s in self.steps]
        lines.append(json.dumps({"final": self.final, "scene": self.scene, "planner": self.planner,
                                 "config": self.config}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeRecord":
        rows = [json.loads(l) for l in text.splitlines() if l.strip()]
        last = rows[-1]
        return cls(last["scene"], last["planner"], last["config"], rows[:-1], last["final"])


def step_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1, np.uint32)[0])


def run_episode(scene: Scene, planner: Planner, config: EpisodeConfig = EpisodeConfig(),
                extra_config: Mapping | None = None) -> EpisodeRecord:
    """Initial cut, then observe, estimate, score, plan and cut until ``t == T``."""
    ep, obs = init_episode(scene, config.initial_action)
    steps = [{
        "t": ep.t, "action": config.initial_action.to_dict(), "score_map": None,
        "removed_counts": {str(k): v for k, v in sorted(ep.discarded.items())},
        "metrics": ep.metrics(), "samples": None,
    }]
    while ep.t < config.T:
        prop = planner.propose(scene, ep, obs, step_seed(config.seed, ep.t))
        removed = step(ep, obs, prop.action, config.T)
        ep.check_conservation()
        steps.append({
            "t": ep.t,
            "action": prop.action.to_dict() if prop.action is not None else None,
            "score_map": prop.score_map.to_dict() if prop.score_map is not None else None,
            "removed_counts": {str(k): v for k, v in sorted(removed.items())},
            "metrics": ep.metrics(),
            "samples": prop.summary or None,
        })
    cfg = {"T": config.T, "initial_action": str(config.initial_action), "seed": config.seed}
    cfg.update(extra_config or {})
    final = ep.metrics()
    final["kept_volume"] = ep.kept.count()
    final["target_volume_before"] = ep.initial_target
    return EpisodeRecord(scene.name, planner.name, cfg, steps, final)
