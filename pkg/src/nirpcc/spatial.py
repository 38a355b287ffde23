"""Cube partitioning of the voxel grid and nearest-neighbor lookup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from nirpcc.pointset_io import VoxelCloud


def _spread_bits(v):
    # spread the low 16 bits of v so that bit i lands on bit 3i
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x249249249249)
    return v


def morton_code(coords) -> np.ndarray:
    """Interleave coordinate bits as ``... z1 y1 x1 z0 y0 x0`` (x least significant).

    Accepts an ``(n, 3)`` array or a single 3-vector; coordinates must fit
    in 16 bits.
    """
    c = np.asarray(coords, dtype=np.int64)
    single = c.ndim == 1
    c = c.reshape(-1, 3)
    code = _spread_bits(c[:, 0]) | (_spread_bits(c[:, 1]) << np.uint64(1)) | (_spread_bits(c[:, 2]) << np.uint64(2))
    code = code.astype(np.int64)
    return code[0] if single else code


def morton_decode(codes, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for b in range(bits):
        for axis in range(3):
            out[:, axis] |= ((codes >> (3 * b + axis)) & 1) << b
    return out


def cube_of(x, N: int, T: int):
    """Cube coordinate containing voxel ``x``: component-wise ``x >> (N - T)``."""
    if not 0 <= T <= N:
        raise ValueError("need 0 <= T <= N")
    arr = np.asarray(x, dtype=np.int64)
    return arr >> (N - T)


@dataclass(frozen=True)
class Partition:
    """Non-empty cubes of a ``2**T`` per-axis split of an N-bit grid.

    ``nonempty_cubes`` is stored sorted by Morton code.
    """

    resolution_bits: int
    cube_bits: int
    nonempty_cubes: np.ndarray

    @property
    def cube_side(self) -> int:
        return 1 << (self.resolution_bits - self.cube_bits)

    @property
    def voxels_per_cube(self) -> int:
        return self.cube_side ** 3

    @property
    def num_candidates(self) -> int:
        return len(self.nonempty_cubes) * self.voxels_per_cube

    def bitmap(self) -> np.ndarray:
        """Boolean occupancy of all ``2**(3T)`` cubes, indexed by Morton code."""
        flags = np.zeros(1 << (3 * self.cube_bits), dtype=bool)
        flags[morton_code(self.nonempty_cubes)] = True
        return flags

    @classmethod
    def from_bitmap(cls, flags, resolution_bits: int, cube_bits: int) -> "Partition":
        codes = np.flatnonzero(np.asarray(flags, dtype=bool))
        return cls(resolution_bits, cube_bits, morton_decode(codes, cube_bits))


def build_partition(vox: VoxelCloud, T: int) -> Partition:
    N = vox.resolution_bits
    if not 0 <= T <= N:
        raise ValueError(f"cube bits T={T} must satisfy 0 <= T <= N={N}")
    cubes = cube_of(vox.voxels, N, T)
    codes = np.unique(morton_code(cubes)) if len(cubes) else np.zeros(0, dtype=np.int64)
    return Partition(N, T, morton_decode(codes, T))


def _local_offsets(side_bits: int) -> np.ndarray:
    codes = np.arange(1 << (3 * side_bits), dtype=np.int64)
    return morton_decode(codes, side_bits)


def iter_candidate_chunks(p: Partition, chunk_voxels: int = 1 << 18):
    """Yield ``(m, 3)`` arrays covering the candidate voxel set in Morton order.

    Cubes are visited in Morton order; inside a cube voxels follow the
    Morton order of their local offset.  Chunks hold whole cubes only.
    """
    side_bits = p.resolution_bits - p.cube_bits
    local = _local_offsets(side_bits)
    per_chunk = max(1, chunk_voxels // len(local))
    cubes = p.nonempty_cubes
    for start in range(0, len(cubes), per_chunk):
        base = cubes[start:start + per_chunk] << side_bits
        yield (base[:, None, :] + local[None, :, :]).reshape(-1, 3)


def enumerate_candidates(p: Partition):
    """Stream every voxel of every non-empty cube exactly once, as tuples."""
    for chunk in iter_candidate_chunks(p):
        for row in chunk:
            yield (int(row[0]), int(row[1]), int(row[2]))


class NeighborIndex:
    """Exact nearest-neighbor queries over integer voxel coordinates.

    Backed by a kd-tree; distance ties resolve to the point with the
    smallest Morton code so results do not depend on tree layout.
    """

    def __init__(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(coords) == 0:
            raise ValueError("cannot index an empty point set")
        self.coords = coords
        self.codes = morton_code(coords)
        self._tree = cKDTree(coords.astype(np.float64))

    def __len__(self):
        return len(self.coords)

    def query(self, queries):
        """Return ``(indices, squared_distances)`` for each query row."""
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        n = len(self.coords)
        result_idx = np.empty(len(q), dtype=np.int64)
        result_d2 = np.empty(len(q), dtype=np.int64)
        pending = np.arange(len(q))
        k = min(4, n)
        while len(pending):
            _, idx = self._tree.query(q[pending].astype(np.float64), k=k)
            idx = np.asarray(idx).reshape(len(pending), k)
            diff = self.coords[idx] - q[pending][:, None, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            best = d2.min(axis=1)
            # a tie may extend past the k-th neighbour; retry those rows with a larger k
            undecided = (d2[:, -1] == best) & (k < n)
            done = ~undecided
            cand_codes = np.where(d2 == best[:, None], self.codes[idx], np.iinfo(np.int64).max)
            pick = np.argmin(cand_codes, axis=1)
            rows = pending[done]
            result_idx[rows] = idx[done, pick[done]]
            result_d2[rows] = best[done]
            pending = pending[undecided]
            k = min(n, k * 4)
        return result_idx, result_d2


def build_index(vox: VoxelCloud) -> NeighborIndex:
    return NeighborIndex(vox.voxels)


def nearest(index: NeighborIndex, query):
    """Nearest indexed point to a single voxel: ``(coordinate, squared distance)``."""
    idx, d2 = index.query(np.asarray(query).reshape(1, 3))
    return tuple(int(v) for v in index.coords[idx[0]]), int(d2[0])
