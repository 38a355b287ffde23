"""End-to-end encode/decode of a voxel cloud to and from a ``.nirp`` stream."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from nirpcc import bitstream as bs
from nirpcc import neuralnet as nn
from nirpcc import training as tr
from nirpcc import weight_codec as wc
from nirpcc.pointset_io import VoxelCloud
from nirpcc.spatial import Partition, build_partition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Profile:
    resolution_bits: int
    cube_bits: int
    geometry: nn.NetworkConfig
    attribute: nn.NetworkConfig
    geometry_step_exponent: int
    attribute_step_exponent: int
    train: tr.TrainConfig


def _net(out_channels, L, blocks, outer, inner):
    return nn.NetworkConfig(3, out_channels, L, blocks, outer, inner)


PROFILES = {
    # full-size settings used for the 10-bit reference clouds
    "paper": Profile(
        resolution_bits=10,
        cube_bits=5,
        geometry=_net(1, 12, 2, 512, 128),
        attribute=_net(3, 12, 3, 512, 128),
        geometry_step_exponent=10,
        attribute_step_exponent=12,
        train=tr.TrainConfig(batch_size=4096, steps_geometry=1_200_000, steps_attribute=200_000, beta=0.5),
    ),
    # desk-scale settings; one encode of a ~5K-voxel cloud takes ~30 s on one core
    "toy": Profile(
        resolution_bits=8,
        cube_bits=5,
        geometry=_net(1, 6, 1, 64, 32),
        attribute=_net(3, 6, 1, 64, 32),
        geometry_step_exponent=10,
        attribute_step_exponent=12,
        train=tr.TrainConfig(batch_size=1024, steps_geometry=6_000, steps_attribute=2_000, beta=0.5),
    ),
}


@dataclass
class EncodeOptions:
    profile: str = "toy"
    resolution_bits: int | None = None
    cube_bits: int | None = None
    lambda_f: float = 0.0
    lambda_g: float = 0.0
    steps_geometry: int | None = None
    steps_attribute: int | None = None
    batch_size: int | None = None
    beta: float | None = None
    seed: int = 0
    geometry_only: bool = False
    num_frequencies: int | None = None
    num_resblocks_geometry: int | None = None
    num_resblocks_attribute: int | None = None
    outer_width: int | None = None
    inner_width: int | None = None
    geometry_step_exponent: int | None = None
    attribute_step_exponent: int | None = None
    tau_grid: tuple | None = None

    def resolve(self) -> Profile:
        """Apply overrides on top of the named profile."""
        try:
            base = PROFILES[self.profile]
        except KeyError:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}") from None

        def net(cfg, blocks):
            return replace(
                cfg,
                num_frequencies=_pick(self.num_frequencies, cfg.num_frequencies),
                num_resblocks=_pick(blocks, cfg.num_resblocks),
                block_outer_width=_pick(self.outer_width, cfg.block_outer_width),
                block_inner_width=_pick(self.inner_width, cfg.block_inner_width),
            )

        train = replace(
            base.train,
            alpha=None,
            batch_size=_pick(self.batch_size, base.train.batch_size),
            steps_geometry=_pick(self.steps_geometry, base.train.steps_geometry),
            steps_attribute=_pick(self.steps_attribute, base.train.steps_attribute),
            beta=_pick(self.beta, base.train.beta),
            lambda_f=self.lambda_f,
            lambda_g=self.lambda_g,
            seed=self.seed,
        )
        return Profile(
            resolution_bits=_pick(self.resolution_bits, base.resolution_bits),
            cube_bits=_pick(self.cube_bits, base.cube_bits),
            geometry=net(base.geometry, self.num_resblocks_geometry),
            attribute=net(base.attribute, self.num_resblocks_attribute),
            geometry_step_exponent=_pick(self.geometry_step_exponent, base.geometry_step_exponent),
            attribute_step_exponent=_pick(self.attribute_step_exponent, base.attribute_step_exponent),
            train=train,
        )


def _pick(override, default):
    return default if override is None else override


@dataclass
class EncodeResult:
    data: bytes
    container: bs.CompressedCloud
    threshold: tr.ThresholdResult
    reconstructed: VoxelCloud
    geometry_trace: list = field(default_factory=list)
    attribute_trace: list = field(default_factory=list)

    @property
    def bits(self) -> int:
        return 8 * len(self.data)


def encode_voxels(vox: VoxelCloud, opts: EncodeOptions) -> EncodeResult:
    """Train, quantize and code both networks for ``vox``.

    The threshold search and the attribute network both run on the
    dequantized occupancy network, i.e. on exactly what a decoder will see.
    """
    prof = opts.resolve()
    if vox.resolution_bits != prof.resolution_bits:
        raise ValueError(
            f"cloud has {vox.resolution_bits}-bit resolution, profile expects {prof.resolution_bits}"
        )
    if len(vox) == 0:
        raise ValueError("cannot encode an empty cloud")
    partition = build_partition(vox, prof.cube_bits)
    log.info("partition: %d non-empty cubes, %d candidate voxels",
             len(partition.nonempty_cubes), partition.num_candidates)

    geometry_trace = []
    f = tr.train_geometry(vox, partition, prof.geometry, prof.train, geometry_trace)
    qf = wc.quantize(f, prof.geometry_step_exponent)
    f_hat = wc.dequantize(qf)

    grid = opts.tau_grid or tr.DEFAULT_TAU_GRID
    thr = tr.search_threshold(f_hat, partition, vox, grid)
    tau_q = bs.quantize_tau(thr.tau)
    recon = tr.reconstruct_geometry(f_hat, partition, tau_q / 65535.0)
    log.info("tau=%.4f  D1=%.3f dB  ratio=%.4f", thr.tau, thr.d1_psnr, thr.scaling_ratio)

    attribute_header = attribute_payload = None
    attribute_trace = []
    if vox.has_colors and not opts.geometry_only:
        if len(recon) == 0:
            raise tr.EmptyReconstruction("reconstructed geometry is empty; cannot code attributes")
        g = tr.train_attribute(recon, vox, prof.attribute, prof.train, attribute_trace)
        qg = wc.quantize(g, prof.attribute_step_exponent)
        attribute_header = bs.NetworkHeader.from_config(prof.attribute, prof.attribute_step_exponent)
        attribute_payload = wc.encode_levels(qg)

    container = bs.CompressedCloud(
        resolution_bits=prof.resolution_bits,
        cube_bits=prof.cube_bits,
        tau_q=tau_q,
        geometry=bs.NetworkHeader.from_config(prof.geometry, prof.geometry_step_exponent),
        cube_bitmap=bs.pack_bitmap(partition.bitmap()),
        geometry_payload=wc.encode_levels(qf),
        attribute=attribute_header,
        attribute_payload=attribute_payload,
    )
    data = bs.serialize(container)
    return EncodeResult(data, container, thr, recon, geometry_trace, attribute_trace)


def decode_container(c: bs.CompressedCloud) -> VoxelCloud:
    partition = Partition.from_bitmap(bs.unpack_bitmap(c.cube_bitmap, c.cube_bits),
                                      c.resolution_bits, c.cube_bits)
    gcfg = c.geometry.network_config(out_channels=1)
    f_hat = wc.dequantize(wc.decode_levels(c.geometry_payload, gcfg, c.geometry.step_exponent))
    recon = tr.reconstruct_geometry(f_hat, partition, c.tau)
    if not c.has_attributes:
        return recon
    acfg = c.attribute.network_config(out_channels=3)
    g_hat = wc.dequantize(wc.decode_levels(c.attribute_payload, acfg, c.attribute.step_exponent))
    colors = tr.predict_colors(g_hat, recon.voxels, c.resolution_bits)
    return VoxelCloud(c.resolution_bits, recon.voxels, colors)


def decode_bytes(data: bytes) -> VoxelCloud:
    return decode_container(bs.parse(data))


def write_trace(path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,lr\n")
        for step, loss, lr in trace:
            fh.write(f"{step},{loss:.9g},{lr:.6g}\n")


def parameter_l1(data: bytes) -> float:
    """l1 norm of the dequantized occupancy network inside a stream (diagnostics)."""
    c = bs.parse(data)
    qm = wc.decode_levels(c.geometry_payload, c.geometry.network_config(1), c.geometry.step_exponent)
    return float(np.abs(qm.flat_levels()).sum() * qm.step)
