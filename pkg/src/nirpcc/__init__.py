"""Point cloud compression with implicit neural representations.

Two coordinate networks are overfit to a single voxelized cloud: one predicts
voxel occupancy, the other predicts RGB color on the reconstructed geometry.
Their parameters are quantized and entropy coded into a self-contained
``.nirp`` container.
"""

from nirpcc.pointset_io import PointCloud, VoxelCloud, read_ply, write_ply, voxelize, devoxelize

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "VoxelCloud",
    "read_ply",
    "write_ply",
    "voxelize",
    "devoxelize",
]
