"""Task-categorized grasp knowledge base and Chamfer-Distance retrieval.

Chamfer Distance is the sum (not mean) of squared nearest-neighbor
distances in both directions. Retrieval scopes the minimum to one task
category and breaks ties by entry id.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .voxel import PointCloud, load_ply, save_ply

CATEGORIES = ("handle_grasp", "wrap_grasp", "lift", "press")

QUAT_NORM_TOL = 1e-9


class UnknownCategoryError(ValueError):
    """Category string is not one of the four task categories."""


class EmptyCategoryError(LookupError):
    """Requested category has no entries in the knowledge base."""


class KnowledgeBaseFormatError(ValueError):
    """Manifest or referenced cloud file is malformed."""


class DegenerateInputError(ValueError):
    """Empty cloud or zero-extent geometry where volume is required."""


@dataclass(frozen=True, eq=False)
class GraspStrategy:
    """Hand pose relative to the object: grasp point (m), wrist orientation
    as a unit quaternion (w, x, y, z), and the eight hand joint angles."""

    grasp_point: np.ndarray
    wrist_quat: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        gp = np.asarray(self.grasp_point, dtype=np.float64).reshape(3)
        q = np.asarray(self.wrist_quat, dtype=np.float64).reshape(4)
        j = np.asarray(self.joint_angles, dtype=np.float64).reshape(-1)
        if j.shape != (8,):
            raise ValueError(f"expected exactly 8 joint angles, got {j.shape[0]}")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"wrist quaternion must be unit length, |q| = {norm!r}")
        if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(j))):
            raise ValueError("grasp point and joint angles must be finite")
        for name, arr in (("grasp_point", gp), ("wrist_quat", q), ("joint_angles", j)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def to_dict(self) -> dict:
        return {
            "point": self.grasp_point.tolist(),
            "quat": self.wrist_quat.tolist(),
            "joints": self.joint_angles.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspStrategy":
        return cls(d["point"], d["quat"], d["joints"])


def _check_category(category: str):
    if category not in CATEGORIES:
        raise UnknownCategoryError(f"unknown category {category!r}; known: {list(CATEGORIES)}")


@dataclass(frozen=True, eq=False)
class KnowledgeEntry:
    id: str
    category: str
    cloud: PointCloud  # centroid at the origin
    strategy: GraspStrategy

    def __post_init__(self):
        _check_category(self.category)
        if len(self.cloud) == 0:
            raise ValueError(f"entry {self.id!r}: cloud must be nonempty")


class KnowledgeBase:
    """Immutable collection of entries with per-category indexing and cached
    kd-trees; safe for concurrent retrieval."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids in knowledge base")
        self._by_category: dict[str, list[KnowledgeEntry]] = {c: [] for c in CATEGORIES}
        for e in self.entries:
            self._by_category[e.category].append(e)
        for c in CATEGORIES:
            self._by_category[c].sort(key=lambda e: e.id)
        self._trees = {e.id: cKDTree(e.cloud.points) for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def category_entries(self, category: str) -> list[KnowledgeEntry]:
        _check_category(category)
        return list(self._by_category[category])

    def tree(self, entry_id: str) -> cKDTree:
        return self._trees[entry_id]


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric sum of squared nearest-neighbor distances between clouds."""
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("chamfer distance needs two nonempty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return float(np.sum(d_ab**2) + np.sum(d_ba**2))


def _chamfer_against_entry(query: np.ndarray, query_tree: cKDTree, kb: KnowledgeBase, entry) -> float:
    d_qe, _ = kb.tree(entry.id).query(query)
    d_eq, _ = query_tree.query(entry.cloud.points)
    return float(np.sum(d_qe**2) + np.sum(d_eq**2))


def retrieve(recon: PointCloud, category: str, kb: KnowledgeBase):
    """Category-scoped argmin of the Chamfer Distance.

    The query cloud is centroid-normalized first (entry clouds are stored
    that way, and the raw distance is not translation-invariant). Ties break
    lexicographically by entry id. Returns (entry, d_prime).
    """
    _check_category(category)
    if len(recon) == 0:
        raise DegenerateInputError("cannot retrieve with an empty reconstruction cloud")
    entries = kb.category_entries(category)
    if not entries:
        raise EmptyCategoryError(f"knowledge base has no entries in category {category!r}")
    centroid = recon.centroid()
    scale = max(float(np.abs(recon.points).max()), 1.0)
    if np.abs(centroid).max() <= 1e-12 * scale:
        query = recon.points  # already centered: keep bits exact
    else:
        query = recon.points - centroid
    query_tree = cKDTree(query)
    best = None
    best_d = np.inf
    for entry in entries:  # id-sorted, so strict < keeps the first id on ties
        d = _chamfer_against_entry(query, query_tree, kb, entry)
        if d < best_d:
            best, best_d = entry, d
    return best, best_d


def transfer_strategy(entry: KnowledgeEntry, recon: PointCloud) -> GraspStrategy:
    """Map the entry's grasp onto the reconstructed object.

    The grasp point moves with the centroid offset and scales per axis by
    the bounding-box ratio recon/entry; wrist orientation and joint angles
    carry over unchanged.
    """
    if len(recon) == 0:
        raise DegenerateInputError("cannot transfer onto an empty cloud")
    ext_entry = entry.cloud.points.max(axis=0) - entry.cloud.points.min(axis=0)
    ext_recon = recon.points.max(axis=0) - recon.points.min(axis=0)
    if np.any(ext_entry <= 0) or np.any(ext_recon <= 0):
        raise DegenerateInputError(
            f"degenerate bounding box (entry extents {ext_entry}, recon extents {ext_recon})"
        )
    scale = ext_recon / ext_entry
    rel = entry.strategy.grasp_point - entry.cloud.centroid()
    point = recon.centroid() + scale * rel
    return GraspStrategy(point, entry.strategy.wrist_quat, entry.strategy.joint_angles)


# -- manifest I/O ----------------------------------------------------------


def kb_save(kb: KnowledgeBase, manifest_path):
    """Write manifest JSON plus one PLY per entry next to it."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for e in kb.entries:
        rel = f"{e.id}.ply"
        save_ply(e.cloud, manifest_path.parent / rel)
        records.append(
            {"id": e.id, "category": e.category, "cloud": rel, "grasp": e.strategy.to_dict()}
        )
    with open(manifest_path, "w") as f:
        json.dump(records, f, indent=2, sort_keys=True)
        f.write("\n")


def kb_load(manifest_path) -> KnowledgeBase:
    """Load manifest + referenced PLY clouds; entry clouds are re-centered on
    their centroid so stored files need not be perfectly normalized."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as f:
            records = json.load(f)
    except json.JSONDecodeError as e:
        raise KnowledgeBaseFormatError(f"{manifest_path}: invalid JSON ({e})") from e
    if not isinstance(records, list):
        raise KnowledgeBaseFormatError(f"{manifest_path}: manifest must be a JSON array")
    entries = []
    for i, rec in enumerate(records):
        try:
            entry_id = rec["id"]
            category = rec["category"]
            cloud_rel = rec["cloud"]
            grasp = GraspStrategy.from_dict(rec["grasp"])
        except (KeyError, TypeError, ValueError) as e:
            label = rec.get("id", f"record {i}") if isinstance(rec, dict) else f"record {i}"
            raise KnowledgeBaseFormatError(f"{manifest_path}: entry {label!r}: {e}") from e
        cloud_path = manifest_path.parent / cloud_rel
        if not cloud_path.exists():
            raise KnowledgeBaseFormatError(
                f"{manifest_path}: entry {entry_id!r} references missing cloud {cloud_rel!r}"
            )
        cloud = load_ply(cloud_path)
        if len(cloud) == 0:
            raise KnowledgeBaseFormatError(f"{manifest_path}: entry {entry_id!r} has an empty cloud")
        centered = PointCloud(cloud.points - cloud.centroid())
        try:
            entries.append(KnowledgeEntry(entry_id, category, centered, grasp))
        except (ValueError, UnknownCategoryError) as e:
            raise KnowledgeBaseFormatError(f"{manifest_path}: entry {entry_id!r}: {e}") from e
    return KnowledgeBase(entries)


def toy_knowledge_base(seed: int = 0, per_category: int = 3, points: int = 220) -> KnowledgeBase:
    """Small procedural base (box-ish clouds of varying proportions) for
    tests and demos; stands in for a real grasp-annotation archive."""
    rng = np.random.default_rng(seed)
    entries = []
    for category in CATEGORIES:
        for k in range(per_category):
            half = rng.uniform(0.02, 0.07, size=3)
            pts = rng.uniform(-half, half, size=(points, 3))
            pts -= pts.mean(axis=0)
            axis = rng.standard_normal(4)
            quat = axis / np.linalg.norm(axis)
            strategy = GraspStrategy(
                grasp_point=np.array([0.0, 0.0, half[2]]),
                wrist_quat=quat,
                joint_angles=rng.uniform(0.1, 0.6, size=8),
            )
            entries.append(KnowledgeEntry(f"{category}_{k:02d}", category, PointCloud(pts), strategy))
    return KnowledgeBase(entries)
