"""Binary voxel grids, point clouds, and the three overlap metrics.

Occupancy is stored bit-packed (LSB-first within each byte) in x-fastest
order, so set algebra runs as word-wise AND/OR plus popcount.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint32)


class FrameMismatchError(ValueError):
    """Grids live in different frames (dims, origin or voxel size differ)."""


class UndefinedMetricError(ValueError):
    """Overlap metric requested for a pair of grids with empty union."""


def _as_point3(value, name="point"):
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have exactly 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered list of 3D points in meters; immutable after construction."""

    points: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("centroid of an empty cloud is undefined")
        return self.points.mean(axis=0)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + _as_point3(offset, "offset"))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy over an axis-aligned box.

    occupancy is bit-packed, x-fastest (linear index x + dx*(y + dy*z)),
    LSB-first within each byte, zero-padded to a byte boundary. Padding
    bits are kept zero as a class invariant.
    """

    dims: tuple[int, int, int]
    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray  # packed uint8

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims components must be >= 1, got {dims}")
        if not (self.voxel_size > 0):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        origin = _as_point3(self.origin, "origin")
        n = dims[0] * dims[1] * dims[2]
        nbytes = (n + 7) // 8
        occ = np.asarray(self.occupancy, dtype=np.uint8)
        if occ.shape != (nbytes,):
            raise ValueError(
                f"occupancy must pack {n} bits into {nbytes} bytes, got shape {occ.shape}"
            )
        # force padding bits in the tail byte to zero
        occ = occ.copy()
        tail = n % 8
        if tail:
            occ[-1] &= (1 << tail) - 1
        occ.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "occupancy", occ)

    # -- constructors --------------------------------------------------

    @classmethod
    def from_dense(cls, dense, origin, voxel_size) -> "VoxelGrid":
        """Build from a (dx, dy, dz)-shaped boolean array."""
        dense = np.asarray(dense, dtype=bool)
        if dense.ndim != 3:
            raise ValueError(f"dense occupancy must be 3D, got shape {dense.shape}")
        flat = dense.ravel(order="F")  # x-fastest
        packed = np.packbits(flat, bitorder="little")
        return cls(dense.shape, origin, voxel_size, packed)

    @classmethod
    def empty(cls, dims, origin, voxel_size) -> "VoxelGrid":
        dims = tuple(int(d) for d in dims)
        n = dims[0] * dims[1] * dims[2]
        return cls(dims, origin, voxel_size, np.zeros((n + 7) // 8, dtype=np.uint8))

    @classmethod
    def from_indices(cls, indices, dims, origin, voxel_size) -> "VoxelGrid":
        """Build from an (N, 3) integer array of occupied (x, y, z) indices."""
        dims = tuple(int(d) for d in dims)
        dense = np.zeros(dims, dtype=bool)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if idx.size:
            if idx.min() < 0 or np.any(idx >= np.array(dims)):
                raise ValueError("voxel index out of range")
            dense[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return cls.from_dense(dense, origin, voxel_size)

    # -- views ---------------------------------------------------------

    def dense(self) -> np.ndarray:
        """Unpack to a (dx, dy, dz) boolean array."""
        n = self.dims[0] * self.dims[1] * self.dims[2]
        flat = np.unpackbits(self.occupancy, count=n, bitorder="little")
        return flat.reshape(self.dims, order="F").astype(bool)

    def count(self) -> int:
        """Number of occupied voxels."""
        return int(_POPCOUNT[self.occupancy].sum())

    def occupied_indices(self) -> np.ndarray:
        """(N, 3) array of occupied (x, y, z) indices."""
        return np.argwhere(self.dense())

    def same_frame(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.origin, other.origin)
            and self.voxel_size == other.voxel_size
        )

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.same_frame(other) and np.array_equal(self.occupancy, other.occupancy)


@dataclass(frozen=True)
class MetricReport:
    """IoU, hit-rate and accuracy plus the raw voxel counts behind them."""

    iou: float
    hit_rate: float
    accuracy: float
    counts: tuple[int, int, int, int]  # intersection, union, false_negative, false_positive


def _check_comparable(recon: VoxelGrid, truth: VoxelGrid):
    if not recon.same_frame(truth):
        raise FrameMismatchError(
            f"grids not metric-comparable: dims {recon.dims} vs {truth.dims}, "
            f"origin {recon.origin} vs {truth.origin}, "
            f"voxel_size {recon.voxel_size} vs {truth.voxel_size}"
        )


def metric_report(recon: VoxelGrid, truth: VoxelGrid) -> MetricReport:
    """Overlap metrics between a reconstruction and a ground-truth grid.

    intersection/union come from word-wise AND/OR popcounts; false
    negatives are truth voxels missed by recon, false positives are recon
    voxels absent from truth. All three metrics share the union denominator.
    """
    _check_comparable(recon, truth)
    inter = int(_POPCOUNT[recon.occupancy & truth.occupancy].sum())
    n_recon = recon.count()
    n_truth = truth.count()
    union = n_recon + n_truth - inter
    if union == 0:
        raise UndefinedMetricError("both grids empty: overlap metrics are undefined")
    fn = n_truth - inter
    fp = n_recon - inter
    return MetricReport(
        iou=inter / union,
        hit_rate=1.0 - fn / union,
        accuracy=1.0 - fp / union,
        counts=(inter, union, fn, fp),
    )


def iou(recon: VoxelGrid, truth: VoxelGrid) -> float:
    return metric_report(recon, truth).iou


def hit_rate(recon: VoxelGrid, truth: VoxelGrid) -> float:
    """Completeness: 1 iff recon covers every truth voxel."""
    return metric_report(recon, truth).hit_rate


def accuracy(recon: VoxelGrid, truth: VoxelGrid) -> float:
    """Correctness: 1 iff recon adds nothing outside truth."""
    return metric_report(recon, truth).accuracy


# -- conversions -------------------------------------------------------


def voxelize(cloud: PointCloud, dims, origin, voxel_size: float) -> VoxelGrid:
    """Bin points into half-open voxel cubes [origin + i*s, origin + (i+1)*s).

    A boundary point goes to the higher-index voxel. Points outside the
    grid box are dropped; the drop count is logged, never fatal.
    """
    if not (voxel_size > 0):
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    dims = tuple(int(d) for d in dims)
    origin = _as_point3(origin, "origin")
    if len(cloud) == 0:
        return VoxelGrid.empty(dims, origin, voxel_size)
    idx = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(dims)), axis=1)
    dropped = int((~inside).sum())
    if dropped:
        log.warning("voxelize: dropped %d of %d points outside grid bounds", dropped, len(cloud))
    return VoxelGrid.from_indices(idx[inside], dims, origin, voxel_size)


def devoxelize(grid: VoxelGrid) -> PointCloud:
    """World-space centers of all occupied voxels."""
    idx = grid.occupied_indices()
    centers = grid.origin + (idx + 0.5) * grid.voxel_size
    return PointCloud(centers.reshape(-1, 3))


# -- file formats ------------------------------------------------------

_VXG1_MAGIC = b"VXG1"


def save_vxg1(grid: VoxelGrid, path):
    """Write the VXG1 binary grid format.

    Layout: magic 'VXG1'; dims as three LE u32; origin as three LE f64;
    voxel_size as LE f64; packed occupancy (x-fastest, LSB-first bits,
    padded to a byte boundary).
    """
    with open(path, "wb") as f:
        f.write(_VXG1_MAGIC)
        f.write(struct.pack("<3I", *grid.dims))
        f.write(struct.pack("<3d", *grid.origin))
        f.write(struct.pack("<d", grid.voxel_size))
        f.write(grid.occupancy.tobytes())


def load_vxg1(path) -> VoxelGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _VXG1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_VXG1_MAGIC!r}")
        dims = struct.unpack("<3I", f.read(12))
        origin = struct.unpack("<3d", f.read(24))
        (voxel_size,) = struct.unpack("<d", f.read(8))
        n = dims[0] * dims[1] * dims[2]
        nbytes = (n + 7) // 8
        raw = f.read(nbytes)
        if len(raw) != nbytes:
            raise ValueError(f"{path}: truncated occupancy ({len(raw)} of {nbytes} bytes)")
        occ = np.frombuffer(raw, dtype=np.uint8).copy()
    return VoxelGrid(dims, origin, voxel_size, occ)


def save_ply(cloud: PointCloud, path):
    """Write an ASCII PLY with a single vertex element (x, y, z floats)."""
    with open(path, "w") as f:
        f.write("ply\n")
        f.write("format ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\n")
        f.write("property float y\n")
        f.write("property float z\n")
        f.write("end_header\n")
        for p in cloud.points:
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_ply(path) -> PointCloud:
    """Read the ASCII PLY subset written by save_ply.

    Tolerates float/double property types and extra vertex properties
    (ignored); requires x, y, z to be present.
    """
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = f.readline().strip()
        if not fmt.startswith("format ascii"):
            raise ValueError(f"{path}: only ASCII PLY is supported, got {fmt!r}")
        n_vertex = None
        prop_names = []
        collecting = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: missing end_header")
            line = line.strip()
            if line == "end_header":
                break
            if line.startswith("comment"):
                continue
            if line.startswith("element"):
                _, name, count = line.split()
                collecting = name == "vertex"
                if collecting:
                    n_vertex = int(count)
            elif line.startswith("property") and collecting:
                prop_names.append(line.split()[-1])
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        try:
            cols = [prop_names.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ValueError(f"{path}: vertex element lacks x/y/z properties") from None
        pts = np.empty((n_vertex, 3), dtype=np.float64)
        for i in range(n_vertex):
            fields = f.readline().split()
            if len(fields) < len(prop_names):
                raise ValueError(f"{path}: truncated vertex list at row {i}")
            pts[i] = [float(fields[c]) for c in cols]
    return PointCloud(pts)
