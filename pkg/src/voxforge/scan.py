"""Synthetic depth-scan rig: ray-cast depth images, back-projection, and
solid-interior ground-truth grids.

Depth is Euclidean range along the ray, not z-depth; backproject uses the
same convention so render -> backproject lands on the surface.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .voxel import PointCloud, VoxelGrid, _as_point3

_GOLDEN_FRAC = 0.6180339887498949  # golden ratio - 1
_NOHIT = np.nan


class NonEnclosingBoundsError(ValueError):
    """Grid box does not enclose the mesh."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {verts.shape}")
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError(f"triangles must be (T, 3), got {tris.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        verts.flags.writeable = False
        tris.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    def __len__(self):
        return self.triangles.shape[0]

    def corners(self) -> np.ndarray:
        """(T, 3, 3) vertex positions per triangle."""
        return self.vertices[self.triangles]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise ValueError("bounds of an empty mesh are undefined")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def cleaned(self) -> "TriangleMesh":
        """Weld exactly-duplicate vertices and drop zero-area triangles."""
        verts = self.vertices
        seen: dict[bytes, int] = {}
        remap = np.empty(len(verts), dtype=np.int64)
        unique = []
        for i, v in enumerate(verts):
            key = v.tobytes()
            if key in seen:
                remap[i] = seen[key]
            else:
                seen[key] = len(unique)
                remap[i] = len(unique)
                unique.append(v)
        tris = remap[self.triangles]
        corners = np.asarray(unique)[tris] if len(unique) else np.zeros((0, 3, 3))
        if len(tris):
            cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
            area2 = np.linalg.norm(cross, axis=1)
            tris = tris[area2 > 0]
        return TriangleMesh(np.asarray(unique).reshape(-1, 3), tris)

    def transformed(self, matrix=None, translation=None) -> "TriangleMesh":
        verts = self.vertices
        if matrix is not None:
            verts = verts @ np.asarray(matrix, dtype=np.float64).T
        if translation is not None:
            verts = verts + _as_point3(translation, "translation")
        return TriangleMesh(verts, self.triangles)


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float  # radians
    width: int
    height: int

    def __post_init__(self):
        pos = _as_point3(self.position, "position")
        tgt = _as_point3(self.look_at, "look_at")
        up = _as_point3(self.up, "up")
        if np.array_equal(pos, tgt):
            raise ValueError("camera position must differ from look_at")
        fwd = tgt - pos
        if np.linalg.norm(np.cross(fwd, up)) == 0:
            raise ValueError("up vector must not be parallel to the view direction")
        if not (0 < self.vertical_fov < np.pi):
            raise ValueError(f"vertical_fov must be in (0, pi), got {self.vertical_fov}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", tgt)
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "vertical_fov", float(self.vertical_fov))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (forward, right, up) triplet."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "vertical_fov": self.vertical_fov,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["position"], d["look_at"], d["up"], d["vertical_fov"], d["width"], d["height"])


@dataclass(frozen=True, eq=False)
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (height, width) float64, NaN = no hit

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float64))
        if arr.shape != (self.height, self.width):
            raise ValueError(f"depth shape {arr.shape} != (height, width) = ({self.height}, {self.width})")
        finite = arr[np.isfinite(arr)]
        if finite.size and finite.min() <= 0:
            raise ValueError("finite depths must be strictly positive")
        arr.flags.writeable = False
        object.__setattr__(self, "depth", arr)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)


def _ray_directions(cam: Camera) -> np.ndarray:
    """Unit ray directions through all pixel centers, (H*W, 3), row-major."""
    fwd, right, up = cam.basis()
    tan_half = np.tan(cam.vertical_fov / 2.0)
    aspect = cam.width / cam.height
    js = (np.arange(cam.width) + 0.5) / cam.width * 2.0 - 1.0
    is_ = 1.0 - (np.arange(cam.height) + 0.5) / cam.height * 2.0
    xs, ys = np.meshgrid(js * tan_half * aspect, is_ * tan_half)
    dirs = fwd[None, :] + xs.reshape(-1, 1) * right[None, :] + ys.reshape(-1, 1) * up[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def render_depth(mesh: TriangleMesh, cam: Camera) -> DepthImage:
    """Per-pixel nearest ray-triangle hit distance; NaN where nothing is hit.

    Shared-origin Moller-Trumbore: with a fixed ray origin all per-triangle
    terms reduce to precomputed vectors, so each ray/triangle pair costs
    three dot products done as matmuls.
    """
    if len(mesh) == 0:
        raise ValueError("cannot render an empty mesh")
    corners = mesh.corners()
    v0 = corners[:, 0]
    e1 = corners[:, 1] - v0
    e2 = corners[:, 2] - v0
    origin = cam.position
    s = origin - v0
    n1 = np.cross(e2, e1)          # det = dir . n1
    w1 = np.cross(e2, s)           # u*det = dir . w1
    q = np.cross(s, e1)            # v*det = dir . q
    t_num = np.einsum("ij,ij->i", e2, q)  # t*det

    dirs = _ray_directions(cam)
    n_rays = dirs.shape[0]
    n_tri = len(mesh)
    depth = np.full(n_rays, _NOHIT)
    chunk = max(1, 2_000_000 // max(n_tri, 1))
    for lo in range(0, n_rays, chunk):
        d = dirs[lo : lo + chunk]
        det = d @ n1.T
        ok = np.abs(det) > 1e-14
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (d @ w1.T) / det
            v = (d @ q.T) / det
            t = t_num[None, :] / det
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        best = t.min(axis=1)
        depth[lo : lo + chunk] = np.where(np.isfinite(best), best, _NOHIT)
    return DepthImage(cam.width, cam.height, depth.reshape(cam.height, cam.width))


def backproject(img: DepthImage, cam: Camera) -> PointCloud:
    """One world point per finite-depth pixel via the inverse pinhole mapping."""
    if (img.width, img.height) != (cam.width, cam.height):
        raise ValueError(
            f"image ({img.width}x{img.height}) does not match camera ({cam.width}x{cam.height})"
        )
    dirs = _ray_directions(cam)
    flat = img.depth.reshape(-1)
    mask = np.isfinite(flat)
    pts = cam.position[None, :] + flat[mask, None] * dirs[mask]
    return PointCloud(pts)


def hemisphere_views(
    n: int,
    radius: float,
    target,
    vertical_fov: float = 0.2,
    width: int = 64,
    height: int = 64,
) -> list[Camera]:
    """n cameras on the upper hemisphere around `target`, all at `radius`.

    Azimuth is restricted to [0, pi] (first/second x-y quadrants) via a
    golden-ratio wrap, elevation is stratified over [0, pi/2). Deterministic:
    the same n always yields the same rig. n=1 sits on the +y axis at
    elevation zero.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 views, got {n}")
    if not (radius > 0):
        raise ValueError(f"radius must be positive, got {radius}")
    target = _as_point3(target, "target")
    cams = []
    for i in range(n):
        azimuth = np.pi * ((0.5 + i * _GOLDEN_FRAC) % 1.0)
        elevation = (np.pi / 2.0) * (i / n)
        offset = radius * np.array(
            [
                np.cos(azimuth) * np.cos(elevation),
                np.sin(azimuth) * np.cos(elevation),
                np.sin(elevation),
            ]
        )
        cams.append(
            Camera(target + offset, target, np.array([0.0, 0.0, 1.0]), vertical_fov, width, height)
        )
    return cams


# -- point/triangle distance and solid voxelization ---------------------


def point_triangle_distances(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Min distance from each point to the mesh surface, (N,).

    Closest point is either the in-triangle plane projection or a point on
    one of the three edges; both branches are evaluated vectorized.
    """
    corners = mesh.corners()
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    e1 = b - a
    e2 = c - a
    nrm = np.cross(e1, e2)
    nn = np.einsum("ij,ij->i", nrm, nrm)  # squared norm, > 0 after cleanup

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(pts.shape[0], np.inf)
    n_tri = len(mesh)
    chunk = max(1, 1_000_000 // max(n_tri, 1))

    def _seg_dist2(p, s0, sdir, ss):
        # p: (M, T, 3) broadcastable; s0, sdir: (T, 3); ss: (T,) squared length
        t = np.einsum("mtj,tj->mt", p - s0, sdir) / ss
        t = np.clip(t, 0.0, 1.0)
        diff = p - (s0[None] + t[..., None] * sdir[None])
        return np.einsum("mtj,mtj->mt", diff, diff)

    ee1 = np.einsum("ij,ij->i", e1, e1)
    ee2 = np.einsum("ij,ij->i", e2, e2)
    e3 = c - b
    ee3 = np.einsum("ij,ij->i", e3, e3)

    for lo in range(0, pts.shape[0], chunk):
        p = pts[lo : lo + chunk][:, None, :]  # (M, 1, 3)
        ap = p - a[None]
        # barycentric coordinates of the plane projection
        d_e1 = np.einsum("mtj,tj->mt", ap, e1)
        d_e2 = np.einsum("mtj,tj->mt", ap, e2)
        dot11, dot22 = ee1[None], ee2[None]
        dot12 = np.einsum("ij,ij->i", e1, e2)[None]
        denom = dot11 * dot22 - dot12 * dot12
        u = (dot22 * d_e1 - dot12 * d_e2) / denom
        v = (dot11 * d_e2 - dot12 * d_e1) / denom
        inside = (u >= 0) & (v >= 0) & (u + v <= 1)
        plane_off = np.einsum("mtj,tj->mt", ap, nrm)
        plane_d2 = plane_off * plane_off / nn[None]
        edge_d2 = np.minimum(
            _seg_dist2(p, a, e1, ee1),
            np.minimum(_seg_dist2(p, a, e2, ee2), _seg_dist2(p, b, e3, ee3)),
        )
        d2 = np.where(inside, plane_d2, edge_d2)
        out[lo : lo + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _parity_inside(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Ray-parity inside test along +x for each point, vectorized.

    Ray origins are nudged by a fixed sub-voxel-scale irrational offset in
    y/z so rays never hit triangle edges of axis-aligned meshes exactly.
    """
    corners = mesh.corners()
    ax, ay, az = corners[:, 0, 0], corners[:, 0, 1], corners[:, 0, 2]
    bx, by, bz = corners[:, 1, 0], corners[:, 1, 1], corners[:, 1, 2]
    cx, cy, cz = corners[:, 2, 0], corners[:, 2, 1], corners[:, 2, 2]

    # 2D edge functions in the y-z plane are affine in the query point:
    # cross2(b - q, c - q) = C + qy*A + qz*B
    def _edge_coeffs(py, pz, qy, qz):
        return (py * qz - pz * qy, pz - qz, qy - py)

    c0, a0, b0 = _edge_coeffs(by, bz, cy, cz)
    c1, a1, b1 = _edge_coeffs(cy, cz, ay, az)
    c2, a2, b2 = _edge_coeffs(ay, az, by, bz)
    det = c0 + c1 + c2  # signed double area of the y-z projection

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    scale = max(np.abs(mesh.vertices).max(), 1.0)
    qy = pts[:, 1] + 2.718281828e-7 * scale
    qz = pts[:, 2] + 3.141592653e-7 * scale

    inside = np.zeros(pts.shape[0], dtype=np.int64)
    n_tri = len(mesh)
    chunk = max(1, 2_000_000 // max(n_tri, 1))
    nz = det != 0.0
    for lo in range(0, pts.shape[0], chunk):
        y = qy[lo : lo + chunk][:, None]
        z = qz[lo : lo + chunk][:, None]
        w0 = c0[None] + y * a0[None] + z * b0[None]
        w1 = c1[None] + y * a1[None] + z * b1[None]
        w2 = c2[None] + y * a2[None] + z * b2[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            u0 = w0 / det[None]
            u1 = w1 / det[None]
            u2 = w2 / det[None]
            x_hit = u0 * ax[None] + u1 * bx[None] + u2 * cx[None]
        hit = nz[None] & (u0 > 0) & (u1 > 0) & (u2 > 0)
        hit &= x_hit > pts[lo : lo + chunk, 0][:, None]
        inside[lo : lo + chunk] = hit.sum(axis=1)
    return (inside % 2).astype(bool)


def mesh_to_solid_grid(mesh: TriangleMesh, dims, origin, voxel_size: float) -> VoxelGrid:
    """Interior-filled occupancy: a voxel is set iff its center is inside the
    mesh by +x ray parity, or within half a voxel diagonal of the surface.

    The surface band keeps near-watertight meshes usable and guarantees thin
    features at least one voxel of thickness. Half the cell diagonal
    (sqrt(3)/2 * voxel_size) is the smallest band radius that sets every
    voxel containing a surface point, which keeps voxelized partial views of
    convex meshes inside the solid grid.
    """
    if len(mesh) == 0:
        raise ValueError("cannot voxelize an empty mesh")
    dims = tuple(int(d) for d in dims)
    origin = _as_point3(origin, "origin")
    lo, hi = mesh.bounds()
    box_hi = origin + np.array(dims) * voxel_size
    if np.any(lo < origin) or np.any(hi > box_hi):
        raise NonEnclosingBoundsError(
            f"grid box [{origin}, {box_hi}] does not enclose mesh bounds [{lo}, {hi}]"
        )
    ix, iy, iz = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
    centers = origin + (idx + 0.5) * voxel_size

    occ = _parity_inside(centers, mesh)
    rest = ~occ
    if rest.any():
        dist = point_triangle_distances(centers[rest], mesh)
        occ[rest] = dist <= voxel_size * (np.sqrt(3.0) / 2.0)
    return VoxelGrid.from_dense(occ.reshape(dims), origin, voxel_size)


# -- file formats --------------------------------------------------------

_DPT1_MAGIC = b"DPT1"


def save_dpt1(img: DepthImage, path):
    """DPT1 depth raster: magic, LE u32 width/height, LE f32 row-major, NaN = no hit."""
    with open(path, "wb") as f:
        f.write(_DPT1_MAGIC)
        f.write(struct.pack("<2I", img.width, img.height))
        f.write(img.depth.astype("<f4").tobytes())


def load_dpt1(path) -> DepthImage:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DPT1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_DPT1_MAGIC!r}")
        width, height = struct.unpack("<2I", f.read(8))
        raw = f.read(4 * width * height)
        if len(raw) != 4 * width * height:
            raise ValueError(f"{path}: truncated depth data")
        depth = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(height, width)
    return DepthImage(width, height, depth)


def load_obj(path) -> TriangleMesh:
    """ASCII OBJ reader for v/f records; polygon faces are fan-triangulated."""
    verts = []
    tris = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: malformed vertex record")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    if i < 0:
                        i = len(verts) + 1 + i
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise ValueError(f"{path}: no usable v/f records")
    return TriangleMesh(np.array(verts), np.array(tris)).cleaned()


def save_obj(mesh: TriangleMesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_stl(path) -> TriangleMesh:
    """Binary STL reader; duplicate vertices are welded at load time."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 84:
        raise ValueError(f"{path}: too short for binary STL")
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) != expected:
        raise ValueError(
            f"{path}: not a binary STL (size {len(data)}, expected {expected} for {count} facets)"
        )
    rec = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84).reshape(count, 50)
    floats = rec[:, :48].copy().view("<f4").reshape(count, 12).astype(np.float64)
    verts = floats[:, 3:12].reshape(count * 3, 3)
    tris = np.arange(count * 3, dtype=np.int64).reshape(count, 3)
    return TriangleMesh(verts, tris).cleaned()


def load_mesh(path) -> TriangleMesh:
    """Dispatch on extension: .obj (ASCII) or .stl (binary)."""
    p = str(path).lower()
    if p.endswith(".obj"):
        return load_obj(path)
    if p.endswith(".stl"):
        return load_stl(path)
    raise ValueError(f"unsupported mesh format: {path} (expected .obj or .stl)")
