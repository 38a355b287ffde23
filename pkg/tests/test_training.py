import math

import numpy as np
import pytest

from nirpcc import neuralnet as nn
from nirpcc import training as tr
from nirpcc.neuralnet import NetworkConfig
from nirpcc.pointset_io import VoxelCloud
from nirpcc.spatial import build_partition, morton_code
from oracles import random_voxels

TINY = NetworkConfig(3, 1, 2, 1, 16, 8)


def test_focal_positive_and_negative_branches():
    loss, _ = tr.focal_loss(0.5, 1, 0.7)
    assert float(loss) == pytest.approx(0.7 * 0.25 * math.log(2), abs=1e-12)
    loss, _ = tr.focal_loss(0.5, 0, 0.7)
    assert float(loss) == pytest.approx(0.3 * 0.25 * math.log(2), abs=1e-12)


def test_focal_gradient_matches_difference_quotient():
    p = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    for y in (0, 1):
        _, g = tr.focal_loss(p, np.full_like(p, y), 0.3)
        num = (tr.focal_loss(p + h, np.full_like(p, y), 0.3)[0]
               - tr.focal_loss(p - h, np.full_like(p, y), 0.3)[0]) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6)


def test_focal_clamps_extreme_probabilities():
    loss, grad = tr.focal_loss(np.array([0.0, 1.0]), np.array([1, 0]), 0.5)
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))
    assert loss[0] == pytest.approx(-0.5 * (1 - 1e-7) ** 2 * math.log(1e-7))


def test_attribute_loss_hand_value():
    loss, grad = tr.attribute_loss([[0.5, 0.25, 0.0]], [[0.0, 0.0, 0.0]])
    assert loss[0] == pytest.approx(0.3125)
    np.testing.assert_allclose(grad, [[1.0, 0.5, 0.0]])


def test_l1_penalty_hand_value():
    cfg = NetworkConfig(3, 1, 0, 1, 1, 1)
    model = nn.init_model(cfg, 0)
    for t in model.tensors():
        t[...] = 0
    model.layers[0].weights[0, 0] = 0.5
    model.layers[2].bias[0] = -0.25
    assert tr.l1_penalty(model, 2.0, 100) == pytest.approx(0.015)
    assert tr.total_loss([1.0, 3.0], model, 2.0, 100) == pytest.approx(2.015)


def test_alpha_must_complement_beta():
    assert tr.TrainConfig(beta=0.3).alpha == pytest.approx(0.7)
    with pytest.raises(ValueError, match="alpha"):
        tr.TrainConfig(beta=0.3, alpha=0.5)


def test_occupied_share_at_half():
    assert tr.occupied_draw_count(0.5, 4096) == 2048


def test_sampler_labels_and_support(rng):
    vox = random_voxels(rng, 300, 6, colored=False)
    part = build_partition(vox, 3)
    voxels, labels = tr.sample_geometry_batch(part, vox, 0.25, rng, 4000)
    occupied = {tuple(v) for v in vox.voxels}
    assert labels[:1000].all()
    for v, y in zip(voxels, labels):
        assert y == (tuple(v) in occupied)
    cubes = {tuple(c) for c in part.nonempty_cubes}
    assert all(tuple(c) in cubes for c in voxels >> 3)


def test_beta_equal_to_occupancy_fraction_is_near_uniform(rng):
    # occupancy fraction zeta over the candidate set, then beta = zeta
    vox = random_voxels(rng, 50, 6, colored=False)
    part = build_partition(vox, 2)
    zeta = len(vox) / part.num_candidates
    _, labels = tr.sample_geometry_batch(part, vox, zeta, rng, 200_000)
    # round(beta B) forced positives plus uniform draws: mean = beta + (1 - beta) zeta
    expected = zeta + (1 - zeta) * zeta
    assert labels.mean() == pytest.approx(expected, abs=4 * math.sqrt(zeta / 200_000))
    assert abs(labels.mean() - zeta) < 2 * zeta * zeta + 1e-3


def test_color_target_tie_goes_to_smaller_morton():
    orig = VoxelCloud(6, [[2, 0, 0], [0, 0, 2]], [[255, 0, 0], [0, 0, 255]])
    rec = VoxelCloud(6, [[1, 0, 1]])
    target = tr.assign_color_targets(rec, orig)
    winner = int(np.argmin(morton_code(orig.voxels)))
    assert target[0].tolist() == orig.colors[winner].tolist()


def _constant_model(p, cfg=TINY):
    model = nn.init_model(cfg, 0)
    model.layers[-1].weights[:] = 0
    model.layers[-1].bias[:] = math.log(p / (1 - p))
    return model


def test_threshold_ties_prefer_smaller_tau():
    full = np.stack(np.meshgrid(range(4), range(4), range(4), indexing="ij"), -1).reshape(-1, 3)
    vox = VoxelCloud(2, full)
    part = build_partition(vox, 0)
    res = tr.search_threshold(_constant_model(0.7), part, vox, (0.3, 0.5, 0.6, 0.8))
    assert res.tau == 0.3 and math.isinf(res.d1_psnr) and res.scaling_ratio == 1.0
    assert [c[3] for c in res.curve] == [64, 64, 64, 0]


def test_reconstruction_is_strictly_above_tau():
    vox = VoxelCloud(3, [[0, 0, 0]])
    part = build_partition(vox, 1)
    model = _constant_model(0.5)
    p = nn.predict(model, [[0, 0, 0]], 3)[0, 0]
    assert len(tr.reconstruct_geometry(model, part, float(p))) == 0
    assert len(tr.reconstruct_geometry(model, part, float(p) - 1e-9)) == part.num_candidates


def test_every_tau_empty_raises():
    vox = VoxelCloud(3, [[0, 0, 0]])
    part = build_partition(vox, 1)
    with pytest.raises(tr.EmptyReconstruction):
        tr.search_threshold(_constant_model(0.1), part, vox, (0.5, 0.9))


def test_training_is_seed_deterministic(tiny_sphere):
    part = build_partition(tiny_sphere, 2)
    cfg = tr.TrainConfig(batch_size=256, steps_geometry=30, seed=5)
    a = tr.train_geometry(tiny_sphere, part, TINY, cfg)
    b = tr.train_geometry(tiny_sphere, part, TINY, cfg)
    c = tr.train_geometry(tiny_sphere, part, TINY, tr.TrainConfig(batch_size=256, steps_geometry=30, seed=6))
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())
    assert not np.array_equal(a.flat_parameters(), c.flat_parameters())


def test_trace_and_callback(tiny_sphere):
    part = build_partition(tiny_sphere, 2)
    seen, trace = [], []
    tr.train_geometry(tiny_sphere, part, TINY, tr.TrainConfig(batch_size=64, steps_geometry=205), trace,
                      callback=lambda step, v, y: seen.append((step, len(v), int(y.sum()))))
    assert [t[0] for t in trace] == [0, 100, 200, 204]
    assert len(seen) == 205 and all(n == 64 and pos >= 32 for _, n, pos in seen)
    assert trace[0][2] == pytest.approx(1e-3)


def test_l1_strength_shrinks_parameters(tiny_sphere):
    part = build_partition(tiny_sphere, 2)
    norms = []
    for lam in (0.0, 50.0):
        m = tr.train_geometry(tiny_sphere, part, TINY,
                              tr.TrainConfig(batch_size=256, steps_geometry=300, lambda_f=lam))
        norms.append(m.l1_norm())
    assert norms[1] < norms[0]


def test_constant_color_is_learned():
    vox = random_voxels(np.random.default_rng(0), 200, 6, colored=False)
    vox = VoxelCloud(6, vox.voxels, np.tile([200, 60, 128], (200, 1)))
    cfg = NetworkConfig(3, 3, 2, 1, 16, 8)
    trace = []
    g = tr.train_attribute(vox, vox, cfg, tr.TrainConfig(batch_size=64, steps_attribute=4000), trace)
    colors = tr.predict_colors(g, vox.voxels, 6).astype(float)
    np.testing.assert_allclose(colors.mean(axis=0), [200, 60, 128], atol=1.0)
    assert trace[-1][1] < trace[0][1] / 100


def test_attribute_training_needs_points():
    vox = VoxelCloud(6, [[0, 0, 0]], [[1, 2, 3]])
    with pytest.raises(tr.EmptyReconstruction):
        tr.train_attribute(VoxelCloud(6, np.zeros((0, 3))), vox, TINY, tr.TrainConfig())
