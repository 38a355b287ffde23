"""Geometry/attribute distortion and rate measures.

Conventions (shared with common MPEG tooling):

* D1 PSNR uses peak ``3 * (2**N - 1)**2`` and the symmetric max of the two
  one-directional point-to-point MSEs.
* Y PSNR uses BT.709 luma on 0..255 RGB with peak ``255**2`` and the same
  symmetric rule, pairing each point with its nearest neighbour.
* Infinite PSNR is written as 999 dB in CSV output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nirpcc.pointset_io import VoxelCloud
from nirpcc.spatial import NeighborIndex

PSNR_CAP = 999.0
LUMA_MATRICES = {
    "bt709": (0.2126, 0.7152, 0.0722),
    "bt601": (0.299, 0.587, 0.114),
}
RD_COLUMNS = ("bpp", "d1_psnr", "y_psnr", "scaling_ratio", "tau", "lambda_f", "lambda_g")


@dataclass
class RDPoint:
    bpp: float
    d1_psnr: float
    y_psnr: float | None = None
    scaling_ratio: float = 1.0
    tau: float | None = None
    lambda_f: float | None = None
    lambda_g: float | None = None

    def csv_row(self) -> str:
        vals = []
        for name in RD_COLUMNS:
            v = getattr(self, name)
            if v is None:
                vals.append("")
            elif name in ("d1_psnr", "y_psnr"):
                vals.append(f"{cap_psnr(v):.6f}")
            else:
                vals.append(f"{v:.6g}")
        return ",".join(vals)


def cap_psnr(value: float) -> float:
    return PSNR_CAP if math.isinf(value) and value > 0 else value


def _check_pair(reference: VoxelCloud, test: VoxelCloud):
    if len(reference) == 0 or len(test) == 0:
        raise ValueError("PSNR requires two non-empty clouds")
    if reference.resolution_bits != test.resolution_bits:
        raise ValueError(
            f"resolution mismatch: {reference.resolution_bits} vs {test.resolution_bits} bits"
        )


def _psnr(peak_sq: float, mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak_sq / mse)


def d1_mse(reference: VoxelCloud, test: VoxelCloud) -> float:
    _check_pair(reference, test)
    _, d2_ab = NeighborIndex(test.voxels).query(reference.voxels)
    _, d2_ba = NeighborIndex(reference.voxels).query(test.voxels)
    # integer sums are exact, so the result is independent of summation order
    return max(int(d2_ab.sum()) / len(d2_ab), int(d2_ba.sum()) / len(d2_ba))


def d1_psnr(reference: VoxelCloud, test: VoxelCloud) -> float:
    """Symmetric point-to-point geometry PSNR in dB (``inf`` for a perfect match)."""
    mse = d1_mse(reference, test)
    peak = (1 << reference.resolution_bits) - 1
    return _psnr(3.0 * peak * peak, mse)


def luma(colors, matrix: str = "bt709") -> np.ndarray:
    kr, kg, kb = LUMA_MATRICES[matrix]
    c = np.asarray(colors, dtype=np.float64)
    return kr * c[:, 0] + kg * c[:, 1] + kb * c[:, 2]


def y_mse(reference: VoxelCloud, test: VoxelCloud, matrix: str = "bt709") -> float:
    _check_pair(reference, test)
    if reference.colors is None or test.colors is None:
        raise ValueError("Y PSNR requires colors on both clouds")
    y_ref, y_test = luma(reference.colors, matrix), luma(test.colors, matrix)
    idx_ab, _ = NeighborIndex(test.voxels).query(reference.voxels)
    idx_ba, _ = NeighborIndex(reference.voxels).query(test.voxels)
    mse_ab = math.fsum((y_ref - y_test[idx_ab]) ** 2) / len(y_ref)
    mse_ba = math.fsum((y_test - y_ref[idx_ba]) ** 2) / len(y_test)
    return max(mse_ab, mse_ba)


def y_psnr(reference: VoxelCloud, test: VoxelCloud, matrix: str = "bt709") -> float:
    """Symmetric nearest-neighbour luma PSNR in dB."""
    return _psnr(255.0 ** 2, y_mse(reference, test, matrix))


def bpp(stream_bits: int, original_point_count: int) -> float:
    if original_point_count <= 0:
        raise ValueError("original point count must be positive")
    return stream_bits / original_point_count


def scaling_ratio(reconstructed: VoxelCloud, original: VoxelCloud) -> float:
    if len(original) == 0:
        raise ValueError("original cloud is empty")
    return len(reconstructed) / len(original)
