"""Dataset assembly: turn meshes into (view grids, solid truth grid) bundles
via the synthetic scan rig, plus on-disk bundle layout for the CLI.

Bundle layout (one directory per object):
    meta.json      object_id, category, grid frame, view count
    cameras.json   list of camera dicts, one per view
    view_000.dpt   DPT1 depth rasters
    truth.vxg      VXG1 solid ground-truth grid
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import shapes
from .rgan import ViewSequence
from .scan import Camera, TriangleMesh, backproject, hemisphere_views, load_dpt1, mesh_to_solid_grid, render_depth, save_dpt1
from .voxel import VoxelGrid, load_vxg1, save_vxg1, voxelize

SCAN_RADIUS = 1.6  # meters, camera standoff from the object
FULL_VIEW_COUNT = 125


@dataclass(frozen=True)
class DatasetItem:
    object_id: str
    category: str
    views: ViewSequence
    truth: VoxelGrid


def frame_for_mesh(mesh: TriangleMesh, m: int, margin: float = 1.3):
    """Cubic grid frame centered on the mesh bounding box.

    Returns (dims, origin, voxel_size, target) with target the box center.
    """
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max()) * margin
    origin = center - extent / 2.0
    return (m, m, m), origin, extent / m, center


def auto_fov(mesh: TriangleMesh, radius: float, margin: float = 1.4) -> float:
    """Vertical FOV that frames the mesh with some slack at the given range."""
    lo, hi = mesh.bounds()
    half = float(np.linalg.norm(hi - lo)) / 2.0
    return 2.0 * np.arctan(margin * half / radius)


def scan_views(
    mesh: TriangleMesh,
    n_views: int,
    m: int,
    radius: float = SCAN_RADIUS,
    image_size: int = 64,
    frame=None,
) -> tuple[list, list[Camera], ViewSequence, VoxelGrid]:
    """Render hemisphere depth scans and voxelize them in the truth frame.

    Returns (depth images, cameras, view sequence, solid truth grid).
    """
    if frame is None:
        dims, origin, voxel_size, target = frame_for_mesh(mesh, m)
    else:
        dims, origin, voxel_size, target = frame
    fov = auto_fov(mesh, radius)
    cams = hemisphere_views(n_views, radius, target, vertical_fov=fov, width=image_size, height=image_size)
    images = [render_depth(mesh, cam) for cam in cams]
    grids = [voxelize(backproject(img, cam), dims, origin, voxel_size) for img, cam in zip(images, cams)]
    truth = mesh_to_solid_grid(mesh, dims, origin, voxel_size)
    return images, cams, ViewSequence(tuple(grids)), truth


def make_toy_dataset(
    m: int = 16,
    n_views: int = 3,
    image_size: int = 48,
    perturb_seed: int | None = None,
) -> list[DatasetItem]:
    """The five procedural shapes as training items; with perturb_seed set,
    same-family perturbed variants instead (held-out evaluation set)."""
    items = []
    rng = np.random.default_rng(perturb_seed) if perturb_seed is not None else None
    for name in shapes.SHAPE_NAMES:
        mesh = shapes.perturbed_shape(name, rng) if rng is not None else shapes.make_shape(name)
        _, _, seq, truth = scan_views(mesh, n_views, m, image_size=image_size)
        suffix = "_perturbed" if rng is not None else ""
        items.append(DatasetItem(f"{name}{suffix}", name, seq, truth))
    return items


def with_view_count(item: DatasetItem, n: int) -> DatasetItem:
    """Same object restricted to its first n views."""
    if not (1 <= n <= len(item.views)):
        raise ValueError(f"cannot take {n} views from a {len(item.views)}-view sequence")
    return DatasetItem(item.object_id, item.category, ViewSequence(item.views.grids[:n]), item.truth)


def as_training_pairs(items: list[DatasetItem]) -> list[tuple]:
    return [(it.views, it.truth) for it in items]


# -- on-disk bundles -------------------------------------------------------


def save_bundle(out_dir, object_id: str, category: str, images, cams, truth: VoxelGrid):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_dpt1(img, out_dir / f"view_{i:03d}.dpt")
    with open(out_dir / "cameras.json", "w") as f:
        json.dump([c.to_dict() for c in cams], f, indent=2, sort_keys=True)
        f.write("\n")
    save_vxg1(truth, out_dir / "truth.vxg")
    meta = {
        "object_id": object_id,
        "category": category,
        "n_views": len(images),
        "dims": list(truth.dims),
        "origin": truth.origin.tolist(),
        "voxel_size": truth.voxel_size,
    }
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bundle(bundle_dir, max_views: int | None = None) -> DatasetItem:
    bundle_dir = Path(bundle_dir)
    with open(bundle_dir / "meta.json") as f:
        meta = json.load(f)
    with open(bundle_dir / "cameras.json") as f:
        cams = [Camera.from_dict(d) for d in json.load(f)]
    truth = load_vxg1(bundle_dir / "truth.vxg")
    n = meta["n_views"] if max_views is None else min(max_views, meta["n_views"])
    grids = []
    for i in range(n):
        img = load_dpt1(bundle_dir / f"view_{i:03d}.dpt")
        cloud = backproject(img, cams[i])
        grids.append(voxelize(cloud, truth.dims, truth.origin, truth.voxel_size))
    return DatasetItem(meta["object_id"], meta["category"], ViewSequence(tuple(grids)), truth)


def load_bundles(root, max_views: int | None = None) -> list[DatasetItem]:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "meta.json").exists())
    if not dirs:
        raise ValueError(f"{root}: no dataset bundles found")
    return [load_bundle(d, max_views) for d in dirs]
