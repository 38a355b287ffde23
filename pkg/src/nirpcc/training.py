"""Losses, batch sampling and the per-cloud overfitting loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from nirpcc import neuralnet as nn
from nirpcc.metrics import d1_psnr, scaling_ratio
from nirpcc.numeric import round_half_away
from nirpcc.pointset_io import VoxelCloud
from nirpcc.spatial import NeighborIndex, Partition, iter_candidate_chunks

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
TRACE_EVERY = 100
DEFAULT_TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class TrainingDiverged(RuntimeError):
    pass


class EmptyReconstruction(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4096
    steps_geometry: int = 1_200_000
    steps_attribute: int = 200_000
    beta: float = 0.5
    alpha: float | None = None
    lambda_f: float = 0.0
    lambda_g: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.alpha is None:
            self.alpha = 1.0 - self.beta
        elif not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-12):
            raise ValueError(f"alpha + beta must equal 1 (got {self.alpha} + {self.beta})")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lambda_f < 0 or self.lambda_g < 0:
            raise ValueError("regularization strengths must be >= 0")
        if self.steps_geometry < 0 or self.steps_attribute < 0:
            raise ValueError("step counts must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")


@dataclass
class ThresholdResult:
    tau: float
    d1_psnr: float
    scaling_ratio: float
    curve: list = field(default_factory=list)  # (tau, d1_psnr, scaling_ratio, count) per grid value


# --------------------------------------------------------------------------
# losses


def focal_loss(p, y, alpha: float):
    """Alpha-balanced focal loss with gamma = 2, elementwise.

    Returns ``(loss, dloss/dp)``.  ``p`` is clamped to [1e-7, 1 - 1e-7] and
    the derivative is taken at the clamped value.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y)
    pos = y == 1
    p_hat = np.where(pos, p, 1.0 - p)
    a_hat = np.where(pos, alpha, 1.0 - alpha)
    one_minus = 1.0 - p_hat
    log_p = np.log(p_hat)
    loss = -a_hat * one_minus * one_minus * log_p
    dloss_dphat = a_hat * (2.0 * one_minus * log_p - one_minus * one_minus / p_hat)
    grad = np.where(pos, dloss_dphat, -dloss_dphat)
    return loss, grad


def attribute_loss(c_hat, c_target):
    """Squared Euclidean color error per row; returns ``(loss, dloss/dc_hat)``."""
    diff = np.asarray(c_hat, dtype=np.float64) - np.asarray(c_target, dtype=np.float64)
    return (diff * diff).sum(axis=-1), 2.0 * diff


def l1_penalty(model: nn.NetworkModel, strength: float, num_points: int) -> float:
    if num_points <= 0:
        raise ValueError("num_points must be positive")
    return strength / num_points * model.l1_norm()


def total_loss(batch_losses, model: nn.NetworkModel, strength: float, num_points: int) -> float:
    """Batch-mean distortion plus the scaled l1 norm of all parameters."""
    return float(np.mean(batch_losses)) + l1_penalty(model, strength, num_points)


total_loss_f = total_loss
total_loss_g = total_loss


def _add_l1_grad(grads, model, strength, num_points):
    if strength == 0:
        return
    scale = strength / num_points
    for g, layer in zip(grads, model.layers):
        g.weights += scale * np.sign(layer.weights)
        g.bias += scale * np.sign(layer.bias)


# --------------------------------------------------------------------------
# sampling


def voxel_keys(coords, N: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] << (2 * N)) | (c[:, 1] << N) | c[:, 2]


class OccupancyLookup:
    """Sorted-key membership test against a voxel set."""

    def __init__(self, vox: VoxelCloud):
        self.N = vox.resolution_bits
        self.keys = np.sort(voxel_keys(vox.voxels, self.N))

    def contains(self, coords) -> np.ndarray:
        k = voxel_keys(coords, self.N)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == k


def occupied_draw_count(beta: float, batch_size: int) -> int:
    return int(round_half_away(beta * batch_size))


def sample_geometry_batch(partition: Partition, occupied: VoxelCloud, beta: float, rng,
                          batch_size: int = 4096, lookup: OccupancyLookup | None = None):
    """Draw a geometry batch: ``(voxels (B, 3), labels (B,))``.

    ``round(beta * B)`` voxels come from the occupied set with replacement
    (label 1).  The rest are uniform over the candidate set, generated as a
    random non-empty cube plus a random local offset, and labelled by
    membership in the occupied set.
    """
    if len(partition.nonempty_cubes) == 0:
        raise ValueError("partition has no non-empty cubes")
    if len(occupied) == 0:
        raise ValueError("occupied set is empty")
    n_occ = occupied_draw_count(beta, batch_size)
    if n_occ < 1:
        raise ValueError("beta * batch_size must be at least 1")
    n_occ = min(n_occ, batch_size)
    lookup = lookup or OccupancyLookup(occupied)

    occ = occupied.voxels[rng.integers(0, len(occupied), size=n_occ)]
    n_rand = batch_size - n_occ
    cubes = partition.nonempty_cubes[rng.integers(0, len(partition.nonempty_cubes), size=n_rand)]
    local = rng.integers(0, partition.cube_side, size=(n_rand, 3))
    rand = (cubes << (partition.resolution_bits - partition.cube_bits)) + local
    voxels = np.concatenate([occ, rand])
    labels = np.concatenate([np.ones(n_occ, dtype=np.int8), lookup.contains(rand).astype(np.int8)])
    return voxels, labels


def assign_color_targets(reconstructed: VoxelCloud, original: VoxelCloud,
                         index: NeighborIndex | None = None) -> np.ndarray:
    """Color of the nearest original point for every reconstructed voxel."""
    if original.colors is None:
        raise ValueError("original cloud has no colors")
    index = index or NeighborIndex(original.voxels)
    idx, _ = index.query(reconstructed.voxels)
    return original.colors[idx]


# --------------------------------------------------------------------------
# training loops


def _check_finite(loss, step, which):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{which} loss became non-finite at step {step}")


GRAD_CHUNK = 512


def _batch_gradients(model, voxels, N, chunk_grad):
    """Forward/backward over ``voxels`` in sub-chunks, summing gradients.

    ``chunk_grad(outputs, sl)`` returns ``(losses, dL/dlogits)`` for the rows
    in slice ``sl``; small chunks keep activations cache-resident.
    """
    L = model.config.num_frequencies
    losses, total = [], None
    for s in range(0, len(voxels), GRAD_CHUNK):
        sl = slice(s, s + GRAD_CHUNK)
        out, cache = nn.forward(model, nn.positional_encode(voxels[sl], N, L, model.dtype))
        chunk_losses, dz = chunk_grad(out, sl)
        losses.append(chunk_losses)
        grads = nn.backward_logits(model, cache, dz)
        if total is None:
            total = grads
        else:
            for acc, g in zip(total, grads):
                acc.weights += g.weights
                acc.bias += g.bias
    return np.concatenate(losses), total


def _fit(model, steps, draw, chunk_grad, strength, num_points, N, which, trace, callback):
    opt = nn.OptimizerState.for_model(model, steps)
    for step in range(steps):
        batch = draw()
        if callback is not None:
            callback(step, *batch)
        losses, grads = _batch_gradients(model, batch[0], N, lambda out, sl: chunk_grad(out, batch, sl))
        _add_l1_grad(grads, model, strength, num_points)
        if trace is not None and (step % TRACE_EVERY == 0 or step == steps - 1):
            loss = total_loss(losses, model, strength, num_points)
            _check_finite(loss, step, which)
            trace.append((step, loss, opt.lr))
        elif not np.isfinite(losses).all():
            _check_finite(float("nan"), step, which)
        nn.adam_step(model, opt, grads)
    return model.astype(np.float64)


def train_geometry(vox: VoxelCloud, partition: Partition, net_config: nn.NetworkConfig,
                   config: TrainConfig, trace: list | None = None, callback=None,
                   init: nn.NetworkModel | None = None) -> nn.NetworkModel:
    """Overfit an occupancy network to ``vox``.

    ``trace`` collects ``(step, loss, lr)`` every 100 steps and at the end.
    ``callback(step, voxels, labels)`` sees every batch.
    """
    model = init if init is not None else nn.init_model(net_config, config.seed)
    model = model.astype(config.dtype)
    rng = np.random.default_rng([config.seed, 1])
    lookup = OccupancyLookup(vox)

    def draw():
        return sample_geometry_batch(partition, vox, config.beta, rng, config.batch_size, lookup)

    def chunk_grad(out, batch, sl):
        p = out[:, 0].astype(np.float64)
        losses, dldp = focal_loss(p, batch[1][sl], config.alpha)
        # chain through the sigmoid; divide by the full batch for a batch mean
        return losses, (dldp * p * (1.0 - p) / len(batch[1]))[:, None]

    return _fit(model, config.steps_geometry, draw, chunk_grad, config.lambda_f, len(vox),
                vox.resolution_bits, "geometry", trace, callback)


def train_attribute(reconstructed: VoxelCloud, original: VoxelCloud, net_config: nn.NetworkConfig,
                    config: TrainConfig, trace: list | None = None, callback=None,
                    index: NeighborIndex | None = None) -> nn.NetworkModel:
    """Overfit a color network on the reconstructed geometry.

    Targets are the colors of each reconstructed voxel's nearest original
    point; batches are drawn uniformly with replacement from ``reconstructed``.
    ``callback(step, voxels, targets)`` sees every batch.
    """
    if len(reconstructed) == 0:
        raise EmptyReconstruction("cannot train attributes on an empty reconstruction")
    targets = assign_color_targets(reconstructed, original, index).astype(np.float64) / 255.0
    model = nn.init_model(net_config, config.seed + 1).astype(config.dtype)
    rng = np.random.default_rng([config.seed, 2])

    def draw():
        pick = rng.integers(0, len(reconstructed), size=config.batch_size)
        return reconstructed.voxels[pick], targets[pick]

    def chunk_grad(out, batch, sl):
        c = out.astype(np.float64)
        losses, dldc = attribute_loss(c, batch[1][sl])
        return losses, dldc * c * (1.0 - c) / len(batch[1])

    return _fit(model, config.steps_attribute, draw, chunk_grad, config.lambda_g, len(original),
                reconstructed.resolution_bits, "attribute", trace, callback)


# --------------------------------------------------------------------------
# inference


def occupancy_candidates(model: nn.NetworkModel, partition: Partition, min_prob: float = 0.0):
    """Candidates with occupancy probability strictly above ``min_prob``.

    Returns ``(voxels, probs)`` in candidate (Morton) order.
    """
    kept_v, kept_p = [], []
    for chunk in iter_candidate_chunks(partition):
        p = nn.predict(model, chunk, partition.resolution_bits)[:, 0]
        keep = p > min_prob
        kept_v.append(chunk[keep])
        kept_p.append(p[keep])
    if not kept_v:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0)
    return np.concatenate(kept_v), np.concatenate(kept_p)


def reconstruct_geometry(model: nn.NetworkModel, partition: Partition, tau: float) -> VoxelCloud:
    """Candidate voxels whose predicted occupancy exceeds ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    voxels, _ = occupancy_candidates(model, partition, tau)
    if len(voxels) == 0:
        log.warning("reconstruction at tau=%g is empty", tau)
    return VoxelCloud(partition.resolution_bits, voxels)


def search_threshold(model: nn.NetworkModel, partition: Partition, original: VoxelCloud,
                     candidate_taus=DEFAULT_TAU_GRID) -> ThresholdResult:
    """Pick the tau on the grid that maximizes D1 PSNR; ties go to the smaller tau."""
    taus = sorted(float(t) for t in candidate_taus)
    if not taus:
        raise ValueError("empty tau grid")
    if any(not 0.0 < t < 1.0 for t in taus):
        raise ValueError("every tau must lie in (0, 1)")
    voxels, probs = occupancy_candidates(model, partition, taus[0])
    best = None
    curve = []
    for tau in taus:
        rec = VoxelCloud(partition.resolution_bits, voxels[probs > tau])
        ratio = scaling_ratio(rec, original)
        psnr = d1_psnr(original, rec) if len(rec) else -math.inf
        curve.append((tau, psnr, ratio, len(rec)))
        if len(rec) and (best is None or psnr > best.d1_psnr):
            best = ThresholdResult(tau, psnr, ratio)
    if best is None:
        raise EmptyReconstruction("every tau on the grid gives an empty reconstruction")
    best.curve = curve
    return best


def predict_colors(model: nn.NetworkModel, voxels, N: int) -> np.ndarray:
    """Network colors mapped back to 0..255 with half-away rounding."""
    out = nn.predict(model, voxels, N)
    return np.clip(round_half_away(out * 255.0), 0, 255).astype(np.uint8)
