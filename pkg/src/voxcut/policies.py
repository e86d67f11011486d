"""Cut-selection policies used by episodes: the diffusion planner and baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Condition, Sampler, sample_conditional
from .planner import (PlannerConfig, TargetColorRange, ground_truth_score_map, plan, score_map,
                      target_hits)
from .sim import EpisodeState, ObservationState, Proposal, Scene
from .voxel import all_actions, quantize_ids


def target_range(scene: Scene, tol: float = 0.1) -> TargetColorRange:
    return TargetColorRange.around(scene.part_table[scene.target_part_id], tol)


@dataclass
class RandomPlanner:
    """Uniform draw over every candidate action."""

    name: str = "random"

    def propose(self, scene: Scene, ep: EpisodeState, obs: ObservationState, seed: int) -> Proposal:
        acts = all_actions(scene.K)
        rng = np.random.default_rng(seed)
        return Proposal(acts[int(rng.integers(len(acts)))])


@dataclass
class GroundTruthPlanner:
    """Plans on the true structure (a single hypothesis, so std is 0)."""

    config: PlannerConfig
    name: str = "gt"

    def propose(self, scene: Scene, ep: EpisodeState, obs: ObservationState, seed: int) -> Proposal:
        smap = ground_truth_score_map(scene.grid, scene.target_part_id, self.config.gamma, ep.kept.region_mask())
        return Proposal(plan(smap, ep.kept, self.config), smap)


@dataclass
class DiffusionPlanner:
    """Samples M structures from the denoiser and plans on their presence scores.

    With ``conditional=False`` the observations are ignored (the no-condition
    baseline).
    """

    model: object
    config: PlannerConfig
    w: float = 0.2
    sampler: Sampler = Sampler()
    conditional: bool = True
    replacement: bool = True
    name: str = "proposed"

    def propose(self, scene: Scene, ep: EpisodeState, obs: ObservationState, seed: int) -> Proposal:
        cond = obs.condition() if self.conditional else Condition.null(scene.K)
        batch = sample_conditional(self.model, cond, self.config.M, self.w, self.sampler, seed,
                                   replacement=self.replacement)
        region = ep.kept.region_mask()
        smap = score_map(batch, scene.part_table, target_range(scene), self.config.gamma, region, self.config.risk)
        ids = np.stack([quantize_ids(s, scene.part_table) for s in batch.samples])
        tvol = target_hits(ids, scene.part_table, target_range(scene)).sum(axis=(1, 2, 3))
        summary = {"M": len(batch), "seed": seed, "target_volume_mean": float(tvol.mean()),
                   "target_volume_std": float(tvol.std())}
        return Proposal(plan(smap, ep.kept, self.config), smap, summary)


def nocond_planner(model, config: PlannerConfig, sampler: Sampler = Sampler()) -> DiffusionPlanner:
    return DiffusionPlanner(model, config, 0.0, sampler, conditional=False, name="nocond")


def baseline_random(scene: Scene, seed: int):
    return RandomPlanner().propose(scene, None, None, seed).action


def baseline_gt(scene: Scene, kept, config: PlannerConfig):
    smap = ground_truth_score_map(scene.grid, scene.target_part_id, config.gamma, kept.region_mask())
    return plan(smap, kept, config)


def baseline_nocond(model, scene: Scene, kept, config: PlannerConfig, seed: int, sampler: Sampler = Sampler()):
    ep = EpisodeState(kept, scene.target_part_id, scene.grid.counts_by_part(), {})
    return nocond_planner(model, config, sampler).propose(scene, ep, ObservationState.empty(scene.K), seed).action
