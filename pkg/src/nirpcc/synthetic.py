"""Synthetic voxel clouds for tests and quick demos."""

import numpy as np

from nirpcc.pointset_io import VoxelCloud


def sphere_shell(resolution_bits: int, radius: float, center=None, colored: bool = True) -> VoxelCloud:
    """Voxels within half a voxel of a sphere surface.

    Colors, when requested, vary smoothly with the surface normal.
    """
    side = 1 << resolution_bits
    if center is None:
        center = (side - 1) / 2.0
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), (3,))
    lo = np.maximum(np.floor(center - radius - 1), 0).astype(int)
    hi = np.minimum(np.ceil(center + radius + 1), side - 1).astype(int)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.linalg.norm(grid - center, axis=1)
    voxels = grid[np.abs(dist - radius) < 0.5]
    colors = None
    if colored:
        normal = (voxels - center) / radius
        colors = np.clip(np.rint(127.5 + 110.0 * normal), 0, 255).astype(np.uint8)
    return VoxelCloud(resolution_bits, voxels, colors)
