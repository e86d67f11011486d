import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxcut.io import FormatError, read_grids, write_grids
from voxcut.voxel import (AttributedVoxelGrid, Axis, ConfigError, CutAction, Side, VoxelError, all_actions,
                          apply_cut, assemble_slices, extract_slice, quantize_ids, quantize_to_grid,
                          voxelize_to_tensor)

from conftest import PART_TABLE, random_grid


def test_uniform_grid_slices_are_constant():
    K = 6
    g = AttributedVoxelGrid(np.ones((K, K, K), np.uint8), np.full((K, K, K, 3), 0.5, np.float32))
    for axis in Axis:
        for i in (1, 3, K):
            sl = extract_slice(g, axis, i)
            assert sl.features.shape == (K, K, 3)
            assert np.all(sl.features == 0.5)


def test_single_voxel_slice_position():
    K = 8
    ids = np.zeros((K, K, K), np.uint8)
    # x=3, y=4, z=5 (1-based) -> [z-1, y-1, x-1]
    ids[4, 3, 2] = 4
    g = AttributedVoxelGrid.from_part_ids(ids, PART_TABLE)
    sl = extract_slice(g, Axis.Y, 4)
    # remaining dims of a Y plane are (z, x)
    assert sl.occupancy.sum() == 1
    assert sl.occupancy[4, 2]
    assert tuple(sl.features[4, 2]) == (1.0, 0.0, 0.0)
    assert not extract_slice(g, Axis.Y, 3).occupancy.any()


def test_linear_index_is_row_major_zyx():
    K = 4
    ids = np.zeros((K, K, K), np.uint8)
    ids[1, 2, 3] = 2
    g = AttributedVoxelGrid.from_part_ids(ids, PART_TABLE)
    assert np.flatnonzero(g.part_ids.ravel()) == [(1 * K + 2) * K + 3]


def test_slice_reassembly_reproduces_grid(rng):
    g = random_grid(rng, 8)
    for axis in Axis:
        slices = [extract_slice(g, axis, i) for i in range(1, 9)]
        feats, occ = assemble_slices(slices)
        # brute-force oracle: rebuild voxel by voxel from slice coordinates
        for sl in slices:
            for u in range(8):
                for v in range(8):
                    idx = [u, v]
                    idx.insert(axis.dim, sl.index - 1)
                    assert occ[tuple(idx)] == g.occupancy[tuple(idx)]
        assert np.array_equal(feats, g.features)
        assert np.array_equal(occ, g.occupancy)


def test_extract_slice_out_of_range():
    g = AttributedVoxelGrid.empty(4)
    with pytest.raises(VoxelError):
        extract_slice(g, Axis.X, 0)
    with pytest.raises(VoxelError):
        extract_slice(g, Axis.X, 5)


def test_full_solid_slab_cut():
    K = 16
    g = AttributedVoxelGrid.from_part_ids(np.ones((K, K, K), np.uint8), PART_TABLE)
    removed, kept = apply_cut(g, CutAction(Axis.Y, 3, Side.LOW))
    assert removed.count() == 3 * 16 * 16 == 768
    removed2, kept2 = apply_cut(kept, CutAction(Axis.Y, 2, Side.LOW))
    assert removed2.count() == 0
    assert kept2 == kept
    removed3, _ = apply_cut(g, CutAction(Axis.Z, 14, Side.HIGH))
    assert removed3.count() == 3 * 256


def test_apply_cut_range_error():
    with pytest.raises(VoxelError):
        apply_cut(AttributedVoxelGrid.empty(4), CutAction(Axis.X, 5, Side.LOW))


def test_slab_conservation_random(rng):
    for _ in range(50):
        g = random_grid(rng, 8)
        acts = all_actions(8)
        act = acts[rng.integers(len(acts))]
        removed, kept = apply_cut(g, act)
        assert removed.count() + kept.count() == g.count()
        assert not np.any(removed.occupancy & kept.occupancy)
        both = np.where(removed.occupancy, removed.part_ids, kept.part_ids)
        assert np.array_equal(both, g.part_ids)


def test_voxelize_affine_and_empty():
    ids = np.zeros((2, 2, 2), np.uint8)
    ids[0, 0, 0] = 4
    g = AttributedVoxelGrid.from_part_ids(ids, PART_TABLE)
    t = voxelize_to_tensor(g)
    assert tuple(t[0, 0, 0]) == (1.0, -1.0, -1.0)
    assert tuple(t[1, 1, 1]) == (-1.0, -1.0, -1.0)


def test_quantize_tie_goes_to_lowest_id():
    table = {2: (0.0, 0.0, 1.0), 3: (0.0, 1.0, 0.0)}
    # tensor colours: 2 -> (-1,-1,1), 3 -> (-1,1,-1); midpoint is (-1,0,0),
    # which is also sqrt(2) from empty (-1,-1,-1)? no: distance to empty is 1.
    mid = np.array([[[[-1.0, 0.0, 0.0]]]])
    assert quantize_ids(mid, table)[0, 0, 0] == 0
    # equidistant between parts 2 and 3 but far from empty
    t = np.array([[[[-1.0, 1.0, 1.0]]]])
    assert quantize_ids(t, table)[0, 0, 0] == 2


def test_quantize_empty_table():
    with pytest.raises(ConfigError):
        quantize_ids(np.zeros((1, 1, 1, 3)), {})


def test_round_trip_over_random_grids(rng):
    for _ in range(20):
        g = random_grid(rng, 6)
        assert quantize_to_grid(voxelize_to_tensor(g), PART_TABLE) == g


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), axis=st.sampled_from(list(Axis)), index=st.integers(1, 6),
       side=st.sampled_from(list(Side)))
def test_slab_conservation_property(seed, axis, index, side):
    g = random_grid(np.random.default_rng(seed), 6)
    removed, kept = apply_cut(g, CutAction(axis, index, side))
    assert removed.counts_by_part().keys() | kept.counts_by_part().keys() <= g.counts_by_part().keys()
    for pid, n in g.counts_by_part().items():
        assert removed.count(pid) + kept.count(pid) == n


def test_vxdc_round_trip_and_header(rng):
    grids = [random_grid(rng, 4) for _ in range(3)]
    buf = io.BytesIO()
    write_grids(buf, grids)
    raw = buf.getvalue()
    assert raw[:4] == b"VXDC"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:8] == (4).to_bytes(2, "little")
    assert raw[8:10] == (3).to_bytes(2, "little")
    assert raw[10:14] == (3).to_bytes(4, "little")
    assert len(raw) == 14 + 3 * (64 + 64 * 12)
    # first grid's part ids follow the header in z, y, x order
    assert raw[14:14 + 64] == grids[0].part_ids.tobytes()
    back = read_grids(io.BytesIO(raw))
    assert back == grids


def test_vxdc_rejects_bad_magic():
    with pytest.raises(FormatError):
        read_grids(io.BytesIO(b"XXXX" + bytes(10)))


def test_grid_invariants_enforced():
    with pytest.raises(VoxelError):
        AttributedVoxelGrid(np.ones((2, 2, 2), np.uint8), np.full((2, 2, 2, 3), 1.5, np.float32))
    g = AttributedVoxelGrid(np.zeros((2, 2, 2), np.uint8), np.full((2, 2, 2, 3), 7.0, np.float32))
    assert np.all(g.features == 0)  # unoccupied features are irrelevant and zeroed


def test_cut_action_parse_and_dict():
    a = CutAction.parse("z:5:high")
    assert a == CutAction(Axis.Z, 5, Side.HIGH)
    assert CutAction.from_dict(a.to_dict()) == a
    assert a.as_pair() == (5, "Z")
