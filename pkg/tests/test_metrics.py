import math

import numpy as np
import pytest

from nirpcc import metrics as mt
from nirpcc.pointset_io import VoxelCloud
from oracles import brute_d1_psnr, brute_y_psnr, random_voxels


def test_single_point_offset_d1():
    ref, test = VoxelCloud(10, [[0, 0, 0]]), VoxelCloud(10, [[1, 0, 0]])
    assert mt.d1_mse(ref, test) == 1
    assert mt.d1_psnr(ref, test) == pytest.approx(10 * math.log10(3 * 1023 ** 2))
    assert mt.d1_psnr(ref, test) == pytest.approx(64.97, abs=0.01)


def test_red_offset_y_psnr(rng):
    vox = random_voxels(rng, 50, 8)
    colors = vox.colors.copy()
    colors[:, 0] = np.minimum(colors[:, 0], 254)
    ref = VoxelCloud(8, vox.voxels, colors)
    test = VoxelCloud(8, vox.voxels, colors + np.array([1, 0, 0], dtype=np.uint8))
    assert mt.y_mse(ref, test) == pytest.approx(0.2126 ** 2, rel=1e-12)
    assert mt.y_psnr(ref, test) == pytest.approx(10 * math.log10(255 ** 2 / 0.2126 ** 2), rel=1e-12)
    assert mt.y_psnr(ref, test) == pytest.approx(61.58, abs=0.01)


def test_bt601_option():
    ref = VoxelCloud(4, [[0, 0, 0]], [[10, 10, 10]])
    test = VoxelCloud(4, [[0, 0, 0]], [[11, 10, 10]])
    assert mt.y_mse(ref, test, "bt601") == pytest.approx(0.299 ** 2)


def test_asymmetric_pair_takes_the_worse_direction():
    ref = VoxelCloud(6, [[0, 0, 0]])
    test = VoxelCloud(6, [[0, 0, 0], [0, 0, 4]])
    # ref->test: 0, test->ref: (0 + 16) / 2
    assert mt.d1_mse(ref, test) == 8


def test_identical_clouds_are_capped():
    vox = VoxelCloud(8, [[1, 2, 3]], [[4, 5, 6]])
    assert math.isinf(mt.d1_psnr(vox, vox)) and math.isinf(mt.y_psnr(vox, vox))
    row = mt.RDPoint(1.0, mt.d1_psnr(vox, vox), mt.y_psnr(vox, vox)).csv_row()
    assert row.split(",")[1:3] == ["999.000000", "999.000000"]


def test_matches_exhaustive_oracle(rng):
    for _ in range(5):
        a, b = random_voxels(rng, 80, 4), random_voxels(rng, 60, 4)
        assert mt.d1_psnr(a, b) == brute_d1_psnr(a.voxels, b.voxels, 4)
        assert mt.y_psnr(a, b) == brute_y_psnr(a.voxels, a.colors, b.voxels, b.colors)


def test_errors():
    a = VoxelCloud(8, [[0, 0, 0]])
    with pytest.raises(ValueError):
        mt.d1_psnr(a, VoxelCloud(8, np.zeros((0, 3))))
    with pytest.raises(ValueError, match="resolution"):
        mt.d1_psnr(a, VoxelCloud(9, [[0, 0, 0]]))
    with pytest.raises(ValueError, match="colors"):
        mt.y_psnr(a, a)
    with pytest.raises(ValueError):
        mt.bpp(100, 0)


def test_bpp_and_ratio():
    assert mt.bpp(8000, 1000) == 8.0
    a, b = VoxelCloud(4, [[0, 0, 0], [1, 1, 1]]), VoxelCloud(4, [[0, 0, 0]])
    assert mt.scaling_ratio(b, a) == 0.5


def test_csv_schema():
    assert mt.RD_COLUMNS == ("bpp", "d1_psnr", "y_psnr", "scaling_ratio", "tau", "lambda_f", "lambda_g")
    row = mt.RDPoint(1.5, 60.0, None, 1.2, 0.4, 2.0, 0.0).csv_row()
    assert row == "1.5,60.000000,,1.2,0.4,2,0"
