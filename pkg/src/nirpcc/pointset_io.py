"""PLY reading/writing and voxelization of point clouds."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from nirpcc.numeric import div_round_half_away, round_half_away

MAX_RESOLUTION_BITS = 16

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_COLOR_NAMES = ("red", "green", "blue")


class PlyError(ValueError):
    """Base class for PLY parse failures."""


class PlyHeaderError(PlyError):
    pass


class PlyPropertyError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


@dataclass
class PointCloud:
    """Raw points with optional per-point RGB colors."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            colors = np.asarray(self.colors)
            if colors.shape != self.points.shape:
                raise ValueError(
                    f"colors shape {colors.shape} does not match points shape {self.points.shape}"
                )
            if colors.size and (colors.min() < 0 or colors.max() > 255):
                raise ValueError("colors must lie in 0..255")
            self.colors = colors.astype(np.uint8)

    def __len__(self):
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None


@dataclass
class VoxelCloud:
    """Unique integer voxels on a ``2**resolution_bits`` grid per axis."""

    resolution_bits: int
    voxels: np.ndarray
    colors: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not 1 <= self.resolution_bits <= MAX_RESOLUTION_BITS:
            raise ValueError(f"resolution_bits must be in 1..{MAX_RESOLUTION_BITS}")
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if self.voxels.size:
            hi = (1 << self.resolution_bits) - 1
            if self.voxels.min() < 0 or self.voxels.max() > hi:
                raise ValueError(f"voxel coordinates outside 0..{hi}")
        if self.colors is not None:
            self.colors = np.asarray(self.colors).astype(np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.voxels):
                raise ValueError("colors must align with voxels")

    def __len__(self):
        return len(self.voxels)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None


# --------------------------------------------------------------------------
# PLY


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyHeaderError("header: missing 'ply' magic line")
    fmt = None
    elements = []  # [name, count, [(prop_name, dtype)]]
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyHeaderError("header: missing 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tokens = line.split()
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3:
                raise PlyHeaderError(f"header: malformed format line {line!r}")
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(f"header: unsupported format {fmt!r}")
        elif key == "element":
            if len(tokens) != 3:
                raise PlyHeaderError(f"header: malformed element line {line!r}")
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyHeaderError(f"element {tokens[1]!r}: bad count {tokens[2]!r}") from None
            if count < 0:
                raise PlyHeaderError(f"element {tokens[1]!r}: negative count")
            elements.append([tokens[1], count, []])
        elif key == "property":
            if not elements:
                raise PlyHeaderError(f"header: property before any element: {line!r}")
            elem = elements[-1]
            if len(tokens) >= 2 and tokens[1] == "list":
                raise PlyPropertyError(f"element {elem[0]!r}: list properties are not supported")
            if len(tokens) != 3:
                raise PlyHeaderError(f"element {elem[0]!r}: malformed property line {line!r}")
            if tokens[1] not in _PLY_TYPES:
                raise PlyPropertyError(
                    f"element {elem[0]!r}: unsupported type {tokens[1]!r} for property {tokens[2]!r}"
                )
            elem[2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise PlyHeaderError(f"header: unrecognized line {line!r}")
    if fmt is None:
        raise PlyHeaderError("header: missing format line")
    return fmt, elements


def read_ply(path) -> PointCloud:
    """Read the ``vertex`` element of an ASCII or binary little-endian PLY."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        vertex = None
        for name, count, props in elements:
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            if fmt == "ascii":
                rows = []
                for i in range(count):
                    raw = fh.readline()
                    if not raw:
                        raise PlyTruncatedError(
                            f"element {name!r}: expected {count} rows, found {i}"
                        )
                    vals = raw.split()
                    if len(vals) != len(props):
                        raise PlyTruncatedError(
                            f"element {name!r}: row {i} has {len(vals)} values, expected {len(props)}"
                        )
                    rows.append(tuple(float(v) for v in vals))
                data = np.array(rows, dtype=np.float64).reshape(count, len(props))
                arr = np.zeros(count, dtype=dtype)
                for j, (p, _) in enumerate(props):
                    arr[p] = data[:, j]
            else:
                nbytes = dtype.itemsize * count
                buf = fh.read(nbytes)
                if len(buf) < nbytes:
                    found = len(buf) // dtype.itemsize if dtype.itemsize else 0
                    raise PlyTruncatedError(
                        f"element {name!r}: expected {count} rows, found {found}"
                    )
                arr = np.frombuffer(buf, dtype=dtype, count=count)
            if name == "vertex":
                vertex = arr
                break
    if vertex is None:
        raise PlyHeaderError("header: no 'vertex' element")
    names = vertex.dtype.names or ()
    for axis in "xyz":
        if axis not in names:
            raise PlyPropertyError(f"element 'vertex': missing property {axis!r}")
    points = np.stack([vertex[a].astype(np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in names for c in _COLOR_NAMES):
        for c in _COLOR_NAMES:
            if vertex.dtype[c] != np.uint8:
                raise PlyPropertyError(f"element 'vertex': color property {c!r} must be uchar")
        colors = np.stack([vertex[c] for c in _COLOR_NAMES], axis=1)
    return PointCloud(points, colors)


def write_ply(cloud: PointCloud, path, ascii: bool = False) -> None:
    """Write ``cloud`` as PLY with double-precision coordinates."""
    n = len(cloud.points)
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.has_colors:
        props += [(c, "u1") for c in _COLOR_NAMES]
    arr = np.zeros(n, dtype=[(p, "<" + t) for p, t in props])
    for j, a in enumerate("xyz"):
        arr[a] = cloud.points[:, j]
    if cloud.has_colors:
        for j, c in enumerate(_COLOR_NAMES):
            arr[c] = cloud.colors[:, j]

    header = ["ply", f"format {'ascii' if ascii else 'binary_little_endian'} 1.0", f"element vertex {n}"]
    header += ["property double x", "property double y", "property double z"]
    if cloud.has_colors:
        header += [f"property uchar {c}" for c in _COLOR_NAMES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            for i in range(n):
                vals = [repr(float(v)) for v in cloud.points[i]]
                if cloud.has_colors:
                    vals += [str(int(v)) for v in cloud.colors[i]]
                fh.write((" ".join(vals) + "\n").encode("ascii"))
        else:
            fh.write(arr.tobytes())


# --------------------------------------------------------------------------
# voxelization


def voxelize(cloud: PointCloud, resolution_bits: int) -> VoxelCloud:
    """Quantize ``cloud`` onto an N-bit integer grid and merge duplicates.

    Clouds that are already integer-valued and inside the grid are kept
    as-is.  Otherwise coordinates are shifted to the origin and scaled by a
    single factor so the largest extent spans ``0..2**N - 1``.
    """
    if not 1 <= resolution_bits <= MAX_RESOLUTION_BITS:
        raise ValueError(f"resolution_bits must be in 1..{MAX_RESOLUTION_BITS}")
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite coordinates")
    hi = (1 << resolution_bits) - 1

    if np.all(pts == np.floor(pts)) and pts.min() >= 0 and pts.max() <= hi:
        grid = pts.astype(np.int64)
    else:
        lo = pts.min(axis=0)
        extent = float((pts.max(axis=0) - lo).max())
        scale = hi / extent if extent > 0 else 0.0
        grid = round_half_away((pts - lo) * scale).astype(np.int64)
        np.clip(grid, 0, hi, out=grid)

    shift = resolution_bits
    keys = (grid[:, 0] << (2 * shift)) | (grid[:, 1] << shift) | grid[:, 2]
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep first-occurrence order so duplicate-free clouds pass through untouched
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    voxels = grid[first[order]]

    colors = None
    if cloud.has_colors:
        slot = rank[inverse]
        sums = np.zeros((len(voxels), 3), dtype=np.int64)
        np.add.at(sums, slot, cloud.colors.astype(np.int64))
        counts = np.bincount(slot, minlength=len(voxels))[:, None]
        colors = div_round_half_away(sums, counts).astype(np.uint8)
    return VoxelCloud(resolution_bits, voxels, colors)


def devoxelize(vox: VoxelCloud) -> PointCloud:
    return PointCloud(vox.voxels.astype(np.float64), None if vox.colors is None else vox.colors.copy())


def load_voxel_cloud(path, resolution_bits: int) -> VoxelCloud:
    """Read a PLY file and voxelize it; convenience for the CLI."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return voxelize(read_ply(path), resolution_bits)
