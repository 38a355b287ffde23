import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirpcc.pointset_io import VoxelCloud
from nirpcc.spatial import (
    NeighborIndex, Partition, build_partition, cube_of, enumerate_candidates,
    iter_candidate_chunks, morton_code, morton_decode, nearest,
)
from oracles import brute_nearest, naive_morton


@given(st.integers(0, 65535), st.integers(0, 65535), st.integers(0, 65535))
def test_morton_matches_bit_loop(x, y, z):
    assert int(morton_code([x, y, z])) == naive_morton(x, y, z)


def test_morton_decode_inverts(rng):
    c = rng.integers(0, 1 << 10, size=(500, 3))
    np.testing.assert_array_equal(morton_decode(morton_code(c), 10), c)


def test_cube_of_hand_value():
    assert cube_of((1023, 0, 512), 10, 5).tolist() == [31, 0, 16]


def test_cube_side_at_five_cube_bits():
    vox = VoxelCloud(10, [[0, 0, 0]])
    p = build_partition(vox, 5)
    assert p.cube_side == 32 and p.voxels_per_cube == 32 ** 3


def test_partition_cubes_sorted_by_morton(rng):
    from oracles import random_voxels

    vox = random_voxels(rng, 400, 8, colored=False)
    p = build_partition(vox, 4)
    codes = morton_code(p.nonempty_cubes)
    assert np.all(np.diff(codes) > 0)
    expected = {tuple(c) for c in (vox.voxels >> 4)}
    assert {tuple(c) for c in p.nonempty_cubes} == expected


def test_bitmap_round_trip(rng):
    from oracles import random_voxels

    vox = random_voxels(rng, 200, 7, colored=False)
    p = build_partition(vox, 3)
    q = Partition.from_bitmap(p.bitmap(), 7, 3)
    np.testing.assert_array_equal(p.nonempty_cubes, q.nonempty_cubes)


def test_two_cubes_candidate_set_matches_double_loop():
    N, T = 4, 2
    vox = VoxelCloud(N, [[0, 0, 0], [15, 5, 9]])
    p = build_partition(vox, T)
    got = list(enumerate_candidates(p))
    assert len(got) == 2 * 2 ** (3 * (N - T)) == len(set(got))
    side = 1 << (N - T)
    expected = set()
    for cube in p.nonempty_cubes:
        for off in itertools.product(range(side), repeat=3):
            expected.add(tuple(int(c) * side + o for c, o in zip(cube, off)))
    assert set(got) == expected


def test_chunks_hold_whole_cubes():
    vox = VoxelCloud(6, [[0, 0, 0], [40, 40, 40], [63, 0, 63]])
    p = build_partition(vox, 3)
    chunks = list(iter_candidate_chunks(p, chunk_voxels=600))
    assert all(len(c) % p.voxels_per_cube == 0 for c in chunks)
    assert sum(len(c) for c in chunks) == p.num_candidates


def test_nearest_hand_example():
    idx = NeighborIndex([[0, 0, 0], [10, 0, 0]])
    assert nearest(idx, (4, 0, 0)) == ((0, 0, 0), 16)


def test_tie_goes_to_smaller_morton_code():
    # (2,0,0) has a larger Morton code than (0,0,2)? x is least significant, so no
    pts = [[2, 0, 0], [0, 0, 2]]
    idx = NeighborIndex(pts)
    i, d2 = idx.query([[1, 0, 1]])
    winner = min(range(2), key=lambda k: naive_morton(*pts[k]))
    assert i[0] == winner and d2[0] == 2


def test_matches_exhaustive_scan(rng):
    pts = rng.integers(0, 64, size=(1000, 3))
    pts = np.unique(pts, axis=0)
    queries = rng.integers(0, 64, size=(100, 3))
    i, d2 = NeighborIndex(pts).query(queries)
    bi, bd = brute_nearest(pts, queries)
    np.testing.assert_array_equal(d2, bd)
    np.testing.assert_array_equal(i, bi)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 7)] * 3), min_size=1, max_size=40, unique=True),
       st.lists(st.tuples(*[st.integers(0, 7)] * 3), min_size=1, max_size=20))
def test_dense_ties_match_exhaustive_scan(points, queries):
    i, d2 = NeighborIndex(points).query(queries)
    bi, bd = brute_nearest(points, queries)
    assert d2.tolist() == bd.tolist()
    assert i.tolist() == bi.tolist()


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        NeighborIndex(np.zeros((0, 3)))
