import collections
import filecmp

import numpy as np
import pytest

from voxcut.scenes import (ArrangementDistribution, GenerationError, PartSpec, ShellSpec, build_dataset,
                           default_modes, format_scene_config, parse_scene_config, sample_scene,
                           sample_training_mask, toy_modes)
from voxcut.voxel import SHELL_ID, ConfigError


def _center(grid, pid, size):
    """Recover a part centre from the rendered grid (independent of the sampler)."""
    z, y, x = np.nonzero(grid.part_ids == pid)
    lo = (x.min() + 1, y.min() + 1, z.min() + 1)
    return tuple(int(l + s // 2) for l, s in zip(lo, size))


def _single_part_mode(jitter=(0, 0, 0), center=(8, 8, 8), K=16):
    shell = ShellSpec((1, 1, 1), (K, K, K))
    return ArrangementDistribution(0, K, shell, (PartSpec(2, (0, 0, 1), (2, 2, 2), center, jitter),))


def test_zero_jitter_hits_reference_center():
    d = _single_part_mode()
    for s in range(5):
        assert _center(sample_scene(d, s), 2, (2, 2, 2)) == (8, 8, 8)


def test_jitter_histogram_covers_exact_support():
    d = _single_part_mode(jitter=(2, 0, 0))
    xs = collections.Counter(_center(sample_scene(d, s), 2, (2, 2, 2))[0] for s in range(1000))
    assert set(xs) == {6, 7, 8, 9, 10}
    # uniform: each of 5 bins expects 200, generous 5-sigma band
    assert all(abs(n - 200) < 5 * np.sqrt(200 * 0.8) for n in xs.values())


def test_modes_with_disjoint_targets_stay_apart():
    a, b = toy_modes(8)
    pos_a = {_center(sample_scene(a, s), 2, (2, 2, 2)) for s in range(50)}
    pos_b = {_center(sample_scene(b, s), 2, (2, 2, 2)) for s in range(50)}
    assert pos_a and pos_b and not (pos_a & pos_b)


def test_default_modes_invariants():
    for d in default_modes(16):
        ilo, ihi = d.shell.interior()
        for s in range(40):
            g = sample_scene(d, s)
            ids = g.part_ids
            # containment: boundary layer is all shell
            for face in (ids[0], ids[-1], ids[:, 0], ids[:, -1], ids[:, :, 0], ids[:, :, -1]):
                assert np.all(face == SHELL_ID)
            # non-overlap: each part keeps its full cuboid volume
            for p in d.parts:
                assert g.count(p.part_id) == int(np.prod(p.size))
            assert g.count() == 16 ** 3


def test_unsatisfiable_distribution_names_constraint():
    K = 8
    shell = ShellSpec((1, 1, 1), (K, K, K))
    d = ArrangementDistribution(0, K, shell, (PartSpec(2, (0, 0, 1), (7, 2, 2), (4, 4, 4)),), max_attempts=10)
    with pytest.raises(GenerationError, match="containment"):
        sample_scene(d, 0)
    d2 = ArrangementDistribution(0, K, shell, (PartSpec(2, (0, 0, 1), (2, 2, 2), (4, 4, 4)),
                                               PartSpec(3, (0, 1, 0), (2, 2, 2), (4, 4, 4))), max_attempts=10)
    with pytest.raises(GenerationError, match="non-overlap"):
        sample_scene(d2, 0)


def test_target_must_be_unique():
    shell = ShellSpec((1, 1, 1), (8, 8, 8))
    with pytest.raises(ConfigError):
        ArrangementDistribution(0, 8, shell, (PartSpec(3, (0, 1, 0), (1, 1, 1), (4, 4, 4)),))


def test_build_dataset_counts_and_provenance():
    ds = build_dataset(toy_modes(8), 5, seed=3)
    assert len(ds) == 10
    labels = ds.provenance["mode_labels"]
    recount = collections.Counter(str(l) for l in labels)
    assert dict(recount) == ds.provenance["mode_counts"]
    ds.validate()


def test_dataset_files_are_deterministic(tmp_path):
    for name in ("a", "b"):
        build_dataset(default_modes(8, 2), 4, seed=7).save(tmp_path / f"{name}.vxdc")
    assert filecmp.cmp(tmp_path / "a.vxdc", tmp_path / "b.vxdc", shallow=False)
    assert filecmp.cmp(tmp_path / "a.vxdc.json", tmp_path / "b.vxdc.json", shallow=False)


def test_dataset_save_load(tmp_path):
    ds = build_dataset(toy_modes(8), 3, seed=1)
    ds.save(tmp_path / "d.vxdc")
    back = type(ds).load(tmp_path / "d.vxdc")
    assert back.grids == ds.grids
    assert back.part_table == ds.part_table
    assert back.target_part_id == 2


def test_mask_zero_planes_is_empty():
    rng = np.random.default_rng(0)
    w = [1.0, 0, 0, 0, 0, 0, 0]
    assert not sample_training_mask(8, rng, weights=w).any()


def test_mask_single_plane_cardinality():
    rng = np.random.default_rng(0)
    w = [0, 1.0, 0, 0, 0, 0, 0]
    for _ in range(20):
        assert sample_training_mask(8, rng, weights=w).sum() == 64


def _distinct_count_pmf(n_draws: int, options: int) -> np.ndarray:
    """P(#distinct values = d) after n uniform draws from ``options`` values (DP oracle)."""
    pmf = np.zeros(n_draws + 1)
    pmf[0] = 1.0
    for _ in range(n_draws):
        nxt = np.zeros_like(pmf)
        for d, p in enumerate(pmf):
            if p:
                nxt[d] += p * d / options
                if d + 1 <= n_draws:
                    nxt[d + 1] += p * (options - d) / options
        pmf = nxt
    return pmf


def test_plane_count_frequencies():
    K = 32
    rng = np.random.default_rng(5)
    weights = np.array([1, 2, 3, 4, 0, 0, 2], float)
    p_n = weights / weights.sum()
    expected = np.zeros(7)
    for n, pn in enumerate(p_n):
        expected[:n + 1] += pn * _distinct_count_pmf(n, 3 * K)
    counts = np.zeros(7)
    draws = 10_000
    for _ in range(draws):
        m = sample_training_mask(K, rng, max_planes=6, weights=weights)
        # a plane is present iff it is completely set; unions of other-axis planes never fill one
        full = sum(int(m.all(axis=tuple(d for d in range(3) if d != ax)).sum()) for ax in range(3))
        counts[full] += 1
    for d in range(7):
        sigma = np.sqrt(draws * expected[d] * (1 - expected[d]))
        assert abs(counts[d] - draws * expected[d]) <= 3 * sigma + 1e-9


def test_scene_config_round_trip():
    modes = default_modes(16, 3)
    text = format_scene_config(modes)
    back = parse_scene_config(text)
    assert back == modes


def test_scene_config_errors():
    with pytest.raises(ConfigError):
        parse_scene_config("[mode 0]\npart2 = size 1 1 1 center 2 2 2\n")
    with pytest.raises(ConfigError):
        parse_scene_config("[scene]\nK = 8\n[mode 0]\npart2 = size 1 1 1 center 2 2 2\n")
