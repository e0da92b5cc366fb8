"""Procedural meshes and synthetic body/garment sequences.

Capture data is unavailable, so tests and the demo pipeline run on these:
planar grids, icospheres, boxes, an annulus-parameterized skirt and a
walking body built from capsules.
"""
from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def grid(nx: int = 10, ny: int = 10, size=(1.0, 1.0), z: float = 0.0,
         origin=(0.0, 0.0)) -> TriMesh:
    """Planar (nx x ny)-cell grid in the plane z, counter-clockwise from +z.

    UVs are the in-plane coordinates normalised to [0, 1].
    """
    sx, sy = (size, size) if np.isscalar(size) else size
    u, v = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1))
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    verts = np.column_stack([origin[0] + uv[:, 0] * sx, origin[1] + uv[:, 1] * sy,
                             np.full(len(uv), z)])
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            tris += [(a, b, c), (a, c, d)]
    return TriMesh(verts, np.array(tris), uv, "grid")


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t),
         (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(verts) * radius + np.asarray(center), np.array(f), None, "icosphere")


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), inward: bool = False) -> TriMesh:
    """Closed axis-aligned box, outward-facing unless ``inward``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], float)
    verts = lo + corners * (hi - lo)
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    tris = np.array(tris)
    if inward:
        tris = tris[:, ::-1]
    return TriMesh(verts, tris, None, "box")


def quad(corners) -> TriMesh:
    """Two-triangle quad with UVs from the corner order (0,0),(1,0),(1,1),(0,1)."""
    c = np.asarray(corners, float)
    return TriMesh(c, np.array([[0, 1, 2], [0, 2, 3]]),
                   np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), "quad")


def merge(meshes: list[TriMesh], name: str = "merged") -> TriMesh:
    verts, tris, uvs = [], [], []
    off = 0
    has_uv = all(m.has_uvs for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        if has_uv:
            uvs.append(m.uvs)
        off += m.n_vertices
    return TriMesh(np.vstack(verts), np.vstack(tris), np.vstack(uvs) if has_uv else None, name)


def capsule(p0, p1, radius: float, n_around: int = 16, n_rings: int = 6,
            n_cap: int = 4) -> TriMesh:
    """Closed capsule from ``p0`` to ``p1``; vertex layout independent of pose."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    z = axis / length
    x = np.cross(z, [0.0, 1.0, 0.0] if abs(z[1]) < 0.9 else [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    # latitude profile: bottom cap, cylinder, top cap (poles added separately)
    prof = []
    for k in range(1, n_cap + 1):
        a = -np.pi / 2 + k * (np.pi / 2) / n_cap
        prof.append((radius * np.sin(a), radius * np.cos(a)))
    for k in range(1, n_rings):
        prof.append((length * k / n_rings, radius))
    for k in range(n_cap):
        a = k * (np.pi / 2) / n_cap
        prof.append((length + radius * np.sin(a), radius * np.cos(a)))
    th = 2 * np.pi * np.arange(n_around) / n_around
    verts = [p0 - radius * z]
    for h, r in prof:
        for t in th:
            verts.append(p0 + h * z + r * (np.cos(t) * x + np.sin(t) * y))
    verts.append(p1 + radius * z)
    verts = np.array(verts)
    tris = []
    n_prof = len(prof)
    top = len(verts) - 1
    for j in range(n_around):
        jn = (j + 1) % n_around
        tris.append((0, 1 + jn, 1 + j))
    for r in range(n_prof - 1):
        a0, a1 = 1 + r * n_around, 1 + (r + 1) * n_around
        for j in range(n_around):
            jn = (j + 1) % n_around
            tris += [(a0 + j, a0 + jn, a1 + jn), (a0 + j, a1 + jn, a1 + j)]
    last = 1 + (n_prof - 1) * n_around
    for j in range(n_around):
        jn = (j + 1) % n_around
        tris.append((last + j, last + jn, top))
    return TriMesh(verts, np.array(tris), None, "capsule")


def _rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def walking_body(n_frames: int = 60, fps: float = 30.0, swing: float = 0.35,
                 stride_hz: float = 1.0, scale: float = 1.0, detail: int = 1) -> list[TriMesh]:
    """Torso plus two swinging legs; constant topology across frames.

    Legs swing in the x-z plane about hip pivots in antiphase. The
    ``detail`` factor multiplies the tessellation density.
    """
    hip_z, leg_len, leg_r = 0.9, 0.8, 0.075
    na, nr = 16 * detail, 6 * detail
    torso = capsule((0, 0, 0.95), (0, 0, 1.45), 0.16, na, nr, 4 * detail)
    legs0 = [capsule((0, s * 0.09, hip_z), (0, s * 0.09, hip_z - leg_len), leg_r, na, nr,
                     3 * detail) for s in (-1.0, 1.0)]
    frames = []
    for k in range(n_frames):
        t = k / fps
        a = swing * np.sin(2 * np.pi * stride_hz * t)
        parts = [torso]
        for leg, sgn in zip(legs0, (1.0, -1.0)):
            pivot = np.array([0.0, leg.vertices[0, 1], hip_z])
            R = _rot_y(sgn * a)
            parts.append(leg.with_vertices((leg.vertices - pivot) @ R.T + pivot))
        m = merge(parts, "body")
        frames.append(m.with_vertices(m.vertices * scale))
    return frames


def skirt(n_around: int = 48, n_rings: int = 16, waist_radius: float = 0.175,
          hem_radius: float = 0.34, waist_z: float = 1.02, length: float = 0.42) -> TriMesh:
    """Conical skirt tube with an annular UV layout (no seam).

    Ring 0 is the waistband, the last ring the hem; two boundary loops.
    """
    verts, uvs = [], []
    for i in range(n_rings + 1):
        f = i / n_rings
        r = waist_radius + f * (hem_radius - waist_radius)
        z = waist_z - f * length * np.sqrt(max(1 - ((hem_radius - waist_radius) / length) ** 2, 0.1))
        rho = 0.16 + 0.32 * f
        for j in range(n_around):
            th = 2 * np.pi * j / n_around
            verts.append((r * np.cos(th), r * np.sin(th), z))
            uvs.append((0.5 + rho * np.cos(th), 0.5 + rho * np.sin(th)))
    tris = []
    for i in range(n_rings):
        for j in range(n_around):
            jn = (j + 1) % n_around
            a, b = i * n_around + j, i * n_around + jn
            c, d = a + n_around, b + n_around
            # outward-facing winding
            tris += [(a, c, b), (b, c, d)]
    return TriMesh(np.array(verts), np.array(tris), np.clip(np.array(uvs), 0, 1), "skirt")


def waist_ring(garment: TriMesh, n_around: int) -> np.ndarray:
    return np.arange(n_around)


def random_triangles(n: int, rng: np.random.Generator, extent: float = 1.0,
                     size: float = 0.3) -> TriMesh:
    c = rng.uniform(-extent, extent, (n, 1, 3))
    v = (c + rng.uniform(-size, size, (n, 3, 3))).reshape(-1, 3)
    return TriMesh(v, np.arange(3 * n).reshape(n, 3), None, "soup")
