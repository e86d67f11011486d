import numpy as np
import pytest

from voxcut.planner import PlannerConfig
from voxcut.policies import GroundTruthPlanner, RandomPlanner
from voxcut.scenes import default_modes, sample_scene
from voxcut.sim import (EpisodeConfig, EpisodeRecord, ObservationState, Proposal, Scene, init_episode, run_episode,
                        step)
from voxcut.voxel import AttributedVoxelGrid, Axis, ConfigError, CutAction, Side, apply_cut, voxelize_to_tensor

from conftest import PART_TABLE


def _scene(mode=0, seed=0, K=16):
    d = default_modes(K)[mode]
    table = {1: d.shell.color, **{p.part_id: p.color for p in d.parts}}
    return Scene(sample_scene(d, seed), table, d.target_part_id, f"mode{mode}")


def _block_scene(K=8):
    ids = np.ones((K, K, K), np.uint8)
    ids[3:5, 3:5, 3:5] = 2
    ids[:, :, 0] = 0  # x = 1 is empty space
    return Scene(AttributedVoxelGrid.from_part_ids(ids, PART_TABLE), PART_TABLE, 2, "block")


def test_init_episode_shell_cut():
    scene = _scene()
    ep, obs = init_episode(scene, CutAction.parse("Y:1:low"))
    assert ep.discarded.get(2, 0) == 0
    assert len(obs.history) == 1
    # exposed plane is y = 2; only its occupied cells are observed
    plane_occ = scene.grid.occupancy[:, 1, :].sum()
    assert obs.mask.sum() == plane_occ
    assert obs.mask[:, 1, :].sum() == plane_occ


def test_init_cut_through_target_rejected():
    scene = _block_scene()
    with pytest.raises(ConfigError):
        init_episode(scene, CutAction.parse("Z:4:low"))


def test_step_through_empty_space_is_ledger_noop():
    scene = _block_scene()
    ep, obs = init_episode(scene, CutAction.parse("Y:1:low"))
    before = dict(ep.discarded)
    removed = step(ep, obs, CutAction(Axis.X, 1, Side.LOW))
    assert removed == {} and ep.discarded == before


def test_step_through_target_counts_exactly():
    scene = _block_scene()
    ep, obs = init_episode(scene, CutAction.parse("Y:1:low"))
    act = CutAction(Axis.Z, 5, Side.HIGH)  # removes z = 5..8, half of the 2x2x2 block at z = 4..5
    truth = int((scene.grid.part_ids[4:, 1:, :] == 2).sum())
    step(ep, obs, act)
    assert ep.discarded[2] == truth == 4
    ep.check_conservation()


def test_noop_step_consumes_time():
    scene = _block_scene()
    ep, obs = init_episode(scene, CutAction.parse("Y:1:low"))
    kept = ep.kept
    step(ep, obs, None)
    assert ep.t == 2 and ep.kept == kept
    with pytest.raises(ConfigError):
        step(ep, obs, None, T=2)


def test_conservation_soundness_and_shrinkage_random_episode():
    scene = _scene(2)
    ep, obs = init_episode(scene, CutAction.parse("Y:1:low"))
    truth = voxelize_to_tensor(scene.grid)
    rng = np.random.default_rng(0)
    sizes = [ep.kept.count()]
    for t in range(12):
        act = CutAction(Axis(int(rng.integers(3))), int(rng.integers(1, 17)), Side(int(rng.integers(2))))
        step(ep, obs, act)
        ep.check_conservation()
        assert np.array_equal(obs.observed[obs.mask], truth[obs.mask])
        assert not obs.observed[~obs.mask].any()
        assert not (obs.mask & ~ep.kept.occupancy).any()
        observed, mask = obs.rebuild(ep.kept)
        assert np.array_equal(mask, obs.mask) and np.array_equal(observed, obs.observed)
        sizes.append(ep.kept.count())
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_gt_episode_is_perfect():
    for mode in range(5):
        scene = _scene(mode, seed=mode)
        rec = run_episode(scene, GroundTruthPlanner(PlannerConfig(eta=0.5)), EpisodeConfig(T=8))
        assert rec.final["cut_error_volume"] == 0
        assert rec.final["remaining_rate"] == 100.0


def test_zero_horizon_has_only_initial_cut():
    rec = run_episode(_scene(), RandomPlanner(), EpisodeConfig(T=0))
    assert len(rec.steps) == 1 and rec.steps[0]["t"] == 1


def test_horizon_counts_cuts():
    rec = run_episode(_scene(), RandomPlanner(), EpisodeConfig(T=8))
    assert [s["t"] for s in rec.steps] == list(range(1, 9))


def test_episode_records_are_deterministic():
    scene = _scene(1)
    a = run_episode(scene, RandomPlanner(), EpisodeConfig(T=6, seed=4)).to_jsonl()
    b = run_episode(scene, RandomPlanner(), EpisodeConfig(T=6, seed=4)).to_jsonl()
    c = run_episode(scene, RandomPlanner(), EpisodeConfig(T=6, seed=5)).to_jsonl()
    assert a == b and a != c
    assert EpisodeRecord.from_jsonl(a).to_jsonl() == a


def test_planner_proposing_none_keeps_shape():
    class Idle:
        name = "idle"

        def propose(self, scene, ep, obs, seed):
            return Proposal(None)

    scene = _scene()
    rec = run_episode(scene, Idle(), EpisodeConfig(T=4))
    _, kept = apply_cut(scene.grid, CutAction.parse("Y:1:low"))
    assert rec.final["kept_volume"] == kept.count()
    assert [s["action"] for s in rec.steps[1:]] == [None] * 3


def test_observation_state_empty_condition():
    cond = ObservationState.empty(4).condition()
    assert not cond.mask.any() and not cond.null_flag
