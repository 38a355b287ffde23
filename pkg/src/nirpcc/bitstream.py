"""The ``.nirp`` container.

Layout (all multi-byte integers little-endian)::

    magic        4s   b"NIRP"
    version      u8   1
    flags        u8   bit 0 = attribute network present
    N            u8   grid resolution bits
    T            u8   cube bits
    tau_q        u16  occupancy threshold, tau = tau_q / 65535
    geometry     7 B  L u8, resblocks u8, outer u16, inner u16, step exponent u8
    attribute    7 B  same shape, only when flag bit 0 is set
    cube bitmap  ceil(2**(3T) / 8) bytes; bit m (LSB-first within each byte)
                 is set when the cube with Morton code m is non-empty
    geometry     u32 length + level payload
    attribute    u32 length + level payload, only when flag bit 0 is set
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from nirpcc.neuralnet import NetworkConfig
from nirpcc.numeric import round_half_away

MAGIC = b"NIRP"
VERSION = 1
FLAG_ATTRIBUTES = 0x01

_HEAD = struct.Struct("<4sBBBBH")
_NET = struct.Struct("<BBHHB")
_LEN = struct.Struct("<I")


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class UnknownVersion(ContainerError):
    pass


class LengthMismatch(ContainerError):
    pass


class TrailingBytes(ContainerError):
    pass


class Unrepresentable(ContainerError):
    pass


@dataclass(frozen=True)
class NetworkHeader:
    num_frequencies: int
    num_resblocks: int
    outer_width: int
    inner_width: int
    step_exponent: int

    def network_config(self, out_channels: int) -> NetworkConfig:
        return NetworkConfig(
            in_channels=3,
            out_channels=out_channels,
            num_frequencies=self.num_frequencies,
            num_resblocks=self.num_resblocks,
            block_outer_width=self.outer_width,
            block_inner_width=self.inner_width,
        )

    @classmethod
    def from_config(cls, config: NetworkConfig, step_exponent: int) -> "NetworkHeader":
        return cls(config.num_frequencies, config.num_resblocks, config.block_outer_width,
                   config.block_inner_width, step_exponent)


@dataclass
class CompressedCloud:
    resolution_bits: int
    cube_bits: int
    tau_q: int
    geometry: NetworkHeader
    cube_bitmap: bytes
    geometry_payload: bytes
    attribute: NetworkHeader | None = None
    attribute_payload: bytes | None = None
    version: int = VERSION

    @property
    def has_attributes(self) -> bool:
        return self.attribute is not None

    @property
    def tau(self) -> float:
        return self.tau_q / 65535.0

    @property
    def flags(self) -> int:
        return FLAG_ATTRIBUTES if self.has_attributes else 0


def quantize_tau(tau: float) -> int:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return min(max(int(round_half_away(tau * 65535)), 1), 65534)


def bitmap_size(cube_bits: int) -> int:
    return ((1 << (3 * cube_bits)) + 7) // 8


def pack_bitmap(flags) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool), bitorder="little").tobytes()


def unpack_bitmap(data: bytes, cube_bits: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    return bits[: 1 << (3 * cube_bits)].astype(bool)


def _u(value, bits, name):
    if not 0 <= value < (1 << bits):
        raise Unrepresentable(f"{name}={value} does not fit in u{bits}")
    return value


def _pack_net(h: NetworkHeader) -> bytes:
    return _NET.pack(
        _u(h.num_frequencies, 8, "num_frequencies"),
        _u(h.num_resblocks, 8, "num_resblocks"),
        _u(h.outer_width, 16, "outer_width"),
        _u(h.inner_width, 16, "inner_width"),
        _u(h.step_exponent, 8, "step_exponent"),
    )


def serialize(c: CompressedCloud) -> bytes:
    if c.has_attributes != (c.attribute_payload is not None):
        raise ContainerError("attribute header and payload must be present together")
    if len(c.cube_bitmap) != bitmap_size(c.cube_bits):
        raise LengthMismatch(
            f"cube bitmap is {len(c.cube_bitmap)} bytes, expected {bitmap_size(c.cube_bits)}"
        )
    parts = [
        _HEAD.pack(MAGIC, _u(c.version, 8, "version"), c.flags, _u(c.resolution_bits, 8, "N"),
                   _u(c.cube_bits, 8, "T"), _u(c.tau_q, 16, "tau_q")),
        _pack_net(c.geometry),
    ]
    if c.has_attributes:
        parts.append(_pack_net(c.attribute))
    parts.append(bytes(c.cube_bitmap))
    parts += [_LEN.pack(_u(len(c.geometry_payload), 32, "geometry payload length")), c.geometry_payload]
    if c.has_attributes:
        parts += [_LEN.pack(_u(len(c.attribute_payload), 32, "attribute payload length")), c.attribute_payload]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthMismatch(
                f"{what}: need {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def parse(data: bytes) -> CompressedCloud:
    data = bytes(data)
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    magic, version, flags, N, T, tau_q = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if version != VERSION:
        raise UnknownVersion(f"unknown container version {version}")
    if flags & ~FLAG_ATTRIBUTES:
        raise ContainerError(f"unknown flag bits 0x{flags:02x}")
    if not 1 <= N <= 16 or T > N:
        raise ContainerError(f"invalid grid parameters N={N} T={T}")
    geometry = NetworkHeader(*_NET.unpack(r.take(_NET.size, "geometry config")))
    attribute = None
    if flags & FLAG_ATTRIBUTES:
        attribute = NetworkHeader(*_NET.unpack(r.take(_NET.size, "attribute config")))
    bitmap = r.take(bitmap_size(T), "cube bitmap")
    (glen,) = _LEN.unpack(r.take(_LEN.size, "geometry payload length"))
    gpay = r.take(glen, "geometry payload")
    apay = None
    if attribute is not None:
        (alen,) = _LEN.unpack(r.take(_LEN.size, "attribute payload length"))
        apay = r.take(alen, "attribute payload")
    if r.pos != len(data):
        raise TrailingBytes(f"{len(data) - r.pos} trailing bytes after the last payload")
    return CompressedCloud(N, T, tau_q, geometry, bitmap, gpay, attribute, apay, version)


def size_bits(c: CompressedCloud) -> int:
    return 8 * len(serialize(c))
