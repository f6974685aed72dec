"""Procedural watertight test meshes at desk scale (meters)."""
from __future__ import annotations

import numpy as np

from .scan import TriangleMesh

SHAPE_NAMES = ("cube", "sphere", "cylinder", "l_bracket", "torus")


def cube(size: float = 0.1, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    h = size / 2.0
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for z in (-h, h) for y in (-h, h) for x in (-h, h)]
    )  # index bit order: x + 2y + 4z
    faces = [
        (0, 2, 3, 1),  # z = -h, outward -z
        (4, 5, 7, 6),  # z = +h
        (0, 1, 5, 4),  # y = -h
        (2, 6, 7, 3),  # y = +h
        (0, 4, 6, 2),  # x = -h
        (1, 3, 7, 5),  # x = +h
    ]
    tris = []
    for a, b, cc, d in faces:
        tris.append([a, b, cc])
        tris.append([a, cc, d])
    return TriangleMesh(corners + c, np.array(tris))


def sphere(radius: float = 0.055, center=(0.0, 0.0, 0.0), n_lat: int = 12, n_lon: int = 18) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    verts = [np.array([0.0, 0.0, radius]), np.array([0.0, 0.0, -radius])]
    rings = []
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        ring = []
        for j in range(n_lon):
            theta = 2 * np.pi * j / n_lon
            ring.append(len(verts))
            verts.append(
                radius
                * np.array([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])
            )
        rings.append(ring)
    tris = []
    top, bottom = 0, 1
    first = rings[0]
    for j in range(n_lon):
        tris.append([top, first[j], first[(j + 1) % n_lon]])
    for i in range(len(rings) - 1):
        a, b = rings[i], rings[i + 1]
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            tris.append([a[j], b[j], b[jn]])
            tris.append([a[j], b[jn], a[jn]])
    last = rings[-1]
    for j in range(n_lon):
        tris.append([bottom, last[(j + 1) % n_lon], last[j]])
    return TriangleMesh(np.array(verts) + c, np.array(tris))


def cylinder(radius: float = 0.04, height: float = 0.11, center=(0.0, 0.0, 0.0), n_seg: int = 24) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    h = height / 2.0
    verts = [np.array([0.0, 0.0, h]), np.array([0.0, 0.0, -h])]
    top_ring, bot_ring = [], []
    for j in range(n_seg):
        theta = 2 * np.pi * j / n_seg
        x, y = radius * np.cos(theta), radius * np.sin(theta)
        top_ring.append(len(verts))
        verts.append(np.array([x, y, h]))
        bot_ring.append(len(verts))
        verts.append(np.array([x, y, -h]))
    tris = []
    for j in range(n_seg):
        jn = (j + 1) % n_seg
        tris.append([0, top_ring[j], top_ring[jn]])
        tris.append([1, bot_ring[jn], bot_ring[j]])
        tris.append([top_ring[j], bot_ring[j], bot_ring[jn]])
        tris.append([top_ring[j], bot_ring[jn], top_ring[jn]])
    return TriangleMesh(np.array(verts) + c, np.array(tris))


def l_bracket(
    width: float = 0.1,
    height: float = 0.1,
    thickness: float = 0.035,
    depth: float = 0.05,
    center=(0.0, 0.0, 0.0),
) -> TriangleMesh:
    """L-shaped prism: an L cross-section in x-y extruded along z.

    The L polygon is star-shaped from its corner vertex, so a fan
    triangulation of the caps is valid.
    """
    c = np.asarray(center, dtype=np.float64)
    w, hgt, t, d = width, height, thickness, depth
    poly = np.array([[0, 0], [w, 0], [w, t], [t, t], [t, hgt], [0, hgt]], dtype=np.float64)
    poly -= [w / 2.0, hgt / 2.0]  # center the cross-section
    n = len(poly)
    bottom = np.column_stack([poly, np.full(n, -d / 2.0)])
    top = np.column_stack([poly, np.full(n, d / 2.0)])
    verts = np.vstack([bottom, top])
    tris = []
    for k in range(1, n - 1):  # caps: fan around the corner vertex
        tris.append([0, k + 1, k])          # bottom cap, -z outward
        tris.append([n, n + k, n + k + 1])  # top cap, +z outward
    for k in range(n):  # side walls
        kn = (k + 1) % n
        tris.append([k, kn, n + kn])
        tris.append([k, n + kn, n + k])
    return TriangleMesh(verts + c, np.array(tris))


def torus(
    major_radius: float = 0.04,
    minor_radius: float = 0.018,
    center=(0.0, 0.0, 0.0),
    n_major: int = 24,
    n_minor: int = 12,
) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    verts = []
    for i in range(n_major):
        u = 2 * np.pi * i / n_major
        for j in range(n_minor):
            v = 2 * np.pi * j / n_minor
            r = major_radius + minor_radius * np.cos(v)
            verts.append([r * np.cos(u), r * np.sin(u), minor_radius * np.sin(v)])
    tris = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            a2 = i * n_minor + (j + 1) % n_minor
            b2 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            tris.append([a, b, b2])
            tris.append([a, b2, a2])
    return TriangleMesh(np.array(verts) + c, np.array(tris))


_MAKERS = {
    "cube": cube,
    "sphere": sphere,
    "cylinder": cylinder,
    "l_bracket": l_bracket,
    "torus": torus,
}


def make_shape(name: str, **kwargs) -> TriangleMesh:
    if name not in _MAKERS:
        raise ValueError(f"unknown shape {name!r}; known: {sorted(_MAKERS)}")
    return _MAKERS[name](**kwargs)


def perturbed_shape(name: str, rng: np.random.Generator) -> TriangleMesh:
    """A same-family variant: per-axis scaling in [0.85, 1.15] plus a rotation
    about z. Keeps the mesh within roughly the same desk-scale footprint."""
    mesh = make_shape(name)
    scale = rng.uniform(0.85, 1.15, size=3)
    angle = rng.uniform(0.0, np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    return mesh.transformed(matrix=rot @ np.diag(scale))
