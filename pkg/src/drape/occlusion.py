"""Cosine-weighted ambient occlusion baked into UV space.

Visibility convention: 1 = fully open hemisphere, 0 = fully occluded.
Rays start offset along the normal, stop at a finite distance and count a
hit on either side of a triangle as occlusion (cloth is double-sided).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .bvh import BVH, STACK, ray_any_hit_stack
from .diagnostics import Diagnostics
from .mesh import TriMesh, compute_vertex_normals
from .texels import (DEFAULT_DILATION, TexelGrid, UVRaster, _pack_mask, _unpack_mask, read_exr,
                     write_exr)

DEFAULT_EPSILON = 1e-4
DEFAULT_MAX_DISTANCE = 2.0
SAMPLES_ANIMATION = 256
SAMPLES_EVALUATION = 1024


class RayScene:
    """Triangle soup from one or more meshes with a BVH and per-triangle tags.

    ``tags[t]`` is the index of the mesh triangle ``t`` came from. ``update``
    refits the BVH when the meshes keep their topology.
    """

    def __init__(self, meshes: list[TriMesh] | TriMesh):
        meshes = [meshes] if isinstance(meshes, TriMesh) else list(meshes)
        if not meshes:
            raise ValueError("a ray scene needs at least one mesh")
        self._sizes = [(m.n_vertices, m.n_triangles) for m in meshes]
        pos, tris, tags = self._stack(meshes)
        self.triangles = tris
        self.tags = tags
        self.bvh = BVH(pos, tris)

    @staticmethod
    def _stack(meshes):
        pos, tris, tags, off = [], [], [], 0
        for i, m in enumerate(meshes):
            pos.append(m.vertices)
            tris.append(m.triangles + off)
            tags.append(np.full(m.n_triangles, i, dtype=np.int64))
            off += m.n_vertices
        return np.vstack(pos), np.vstack(tris), np.concatenate(tags)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def update(self, meshes: list[TriMesh]) -> "RayScene":
        sizes = [(m.n_vertices, m.n_triangles) for m in meshes]
        if sizes != self._sizes:
            return RayScene(meshes)
        pos, tris, _ = self._stack(meshes)
        if not np.array_equal(tris, self.triangles):
            return RayScene(meshes)
        self.bvh.refit(pos)
        return self


def ray_intersect(scene: RayScene, origin, direction, t_max: float = np.inf,
                  epsilon: float = 0.0):
    """Nearest hit ``(t, triangle)`` with ``epsilon < t < t_max``, or None."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray direction must be unit length")
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    t, tri = scene.bvh.intersect(np.asarray(origin, dtype=np.float64), d, t_max, epsilon)
    if tri[0] < 0:
        return None
    return float(t[0]), int(tri[0])


# ---------------------------------------------------------------------------
# sampling


@nb.njit(inline="always", error_model="numpy")
def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15))
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31)), x


@nb.njit(inline="always", error_model="numpy")
def _unit(z):
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(inline="always", error_model="numpy")
def _radical_inverse2(k):
    r = 0.0
    f = 0.5
    while k > 0:
        if k & 1:
            r += f
        k >>= 1
        f *= 0.5
    return r


@nb.njit(inline="always", error_model="numpy")
def _onb(nx, ny, nz):
    # branchless orthonormal basis around a unit normal
    s = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (s + nz)
    b = nx * ny * a
    return (1.0 + s * nx * nx * a, s * b, -s * nx), (b, s + ny * ny * a, -ny)


@nb.njit(cache=True, error_model="numpy")
def _texel_visibility(px, py, pz, nx, ny, nz, key, n_samples, seed, eps, max_dist, cos_b,
                      sin_b, stack, pos, tris, prims, lo, hi, left, right, start, count):
    t1, t2 = _onb(nx, ny, nz)
    ox = px + eps * nx
    oy = py + eps * ny
    oz = pz + eps * nz
    # per-texel stream from (seed, texel key) so results ignore scheduling
    state = seed * np.uint64(0xD1B54A32D192ED03) + np.uint64(key)
    z, state = _splitmix(state)
    r1 = _unit(z)
    z, state = _splitmix(state)
    a = 2.0 * np.pi * _unit(z)
    ca, sa = np.cos(a), np.sin(a)
    inv_n = 1.0 / n_samples
    open_ = 0
    for k in range(n_samples):
        # Cranley-Patterson rotated Hammersley point, Malley's method; the
        # azimuthal shift is applied as a rotation of the tabulated angles
        u1 = (k + 0.5) * inv_n + r1
        if u1 >= 1.0:
            u1 -= 1.0
        rad = np.sqrt(u1)
        lx = rad * (cos_b[k] * ca - sin_b[k] * sa)
        ly = rad * (sin_b[k] * ca + cos_b[k] * sa)
        lz = np.sqrt(1.0 - u1)
        dx = lx * t1[0] + ly * t2[0] + lz * nx
        dy = lx * t1[1] + ly * t2[1] + lz * ny
        dz = lx * t1[2] + ly * t2[2] + lz * nz
        if not ray_any_hit_stack(pos, tris, prims, lo, hi, left, right, start, count, ox, oy,
                                 oz, dx, dy, dz, 0.0, max_dist, stack):
            open_ += 1
    return open_ * inv_n


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _bake_kernel(points, normals, keys, n_samples, seed, eps, max_dist, pos, tris, prims, lo,
                 hi, left, right, start, count, out):
    cos_b = np.empty(n_samples)
    sin_b = np.empty(n_samples)
    for k in range(n_samples):
        phi = 2.0 * np.pi * _radical_inverse2(k)
        cos_b[k] = np.cos(phi)
        sin_b[k] = np.sin(phi)
    n = points.shape[0]
    n_chunks = min(n, 256)
    for c in nb.prange(n_chunks):
        stack = np.empty(STACK, np.int64)
        for i in range(c * n // n_chunks, (c + 1) * n // n_chunks):
            out[i] = _texel_visibility(points[i, 0], points[i, 1], points[i, 2], normals[i, 0],
                                       normals[i, 1], normals[i, 2], keys[i], n_samples, seed,
                                       eps, max_dist, cos_b, sin_b, stack, pos, tris, prims, lo,
                                       hi, left, right, start, count)


def occlusion_at_points(points: np.ndarray, normals: np.ndarray, scene: RayScene,
                        samples: int = SAMPLES_EVALUATION, *, epsilon: float = DEFAULT_EPSILON,
                        max_distance: float = DEFAULT_MAX_DISTANCE, seed: int = 0,
                        keys: np.ndarray | None = None) -> np.ndarray:
    """Visibility fractions at arbitrary surface points with unit normals."""
    samples = int(samples)
    if samples < 1:
        raise ValueError("samples per texel must be >= 1")
    if not max_distance > 0 or not epsilon >= 0:
        raise ValueError("max_distance must be > 0 and epsilon >= 0")
    p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    n = np.ascontiguousarray(np.atleast_2d(normals), dtype=np.float64)
    if n.shape != p.shape:
        raise ValueError("normals must match points")
    if p.size and (not np.isfinite(n).all() or np.abs(np.linalg.norm(n, axis=1) - 1).max() > 1e-6):
        raise ValueError("normals must be finite unit vectors")
    keys = np.arange(len(p), dtype=np.int64) if keys is None else np.asarray(keys, np.int64)
    out = np.empty(len(p))
    _bake_kernel(p, n, keys, samples, np.uint64(seed), float(epsilon), float(max_distance),
                 *scene.bvh.arrays, out)
    return out


@dataclass
class OcclusionMap:
    grid: TexelGrid
    samples: int
    epsilon: float
    seed: int = 0
    max_distance: float = DEFAULT_MAX_DISTANCE
    meta: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        write_exr(path, self.grid.values)
        side = {"width": self.grid.resolution[0], "height": self.grid.resolution[1],
                "samples": self.samples, "epsilon": self.epsilon, "seed": self.seed,
                "max_distance": self.max_distance, "coverage": _pack_mask(self.grid.coverage)}
        side.update(self.meta)
        path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "OcclusionMap":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        cov = _unpack_mask(side.pop("coverage"), (side["height"], side["width"]))
        grid = TexelGrid(read_exr(path), cov)
        keys = ("samples", "epsilon", "seed", "max_distance")
        args = {k: side.pop(k) for k in keys}
        side.pop("width"), side.pop("height")
        return cls(grid, meta=side, **args)


def bake_ambient_occlusion(surface: TriMesh, occluders: RayScene,
                           samples: int = SAMPLES_ANIMATION, resolution=512, *,
                           epsilon: float = DEFAULT_EPSILON,
                           max_distance: float = DEFAULT_MAX_DISTANCE, seed: int = 0,
                           dilation: int = DEFAULT_DILATION, normals: np.ndarray | None = None,
                           raster: UVRaster | None = None,
                           diagnostics: Diagnostics | None = None) -> OcclusionMap:
    """Bake per-texel visibility of ``surface`` against ``occluders``.

    ``occluders`` should contain the surface itself plus everything that
    can shadow it (body and all garments of the frame). Passing a cached
    ``raster`` skips the UV rasterization for animated meshes.
    """
    if int(samples) < 1:
        raise ValueError("samples per texel must be >= 1")
    if normals is None:
        normals = compute_vertex_normals(surface, diagnostics)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != (surface.n_vertices, 3) or not np.isfinite(normals).all():
        raise ValueError("surface normals missing or malformed")
    if raster is None:
        raster = UVRaster(surface, resolution, dilation, diagnostics)
    pts = raster.interpolate_covered(surface.vertices)
    nrm = raster.interpolate_covered(normals)
    length = np.linalg.norm(nrm, axis=1, keepdims=True)
    bad = length[:, 0] < 1e-12
    if bad.any():
        if diagnostics is not None:
            diagnostics.count("ao_degenerate_normal", int(bad.sum()))
        nrm[bad] = (0.0, 0.0, 1.0)
        length[bad] = 1.0
    nrm /= length
    vis = occlusion_at_points(pts, nrm, occluders, samples, epsilon=epsilon,
                              max_distance=max_distance, seed=seed, keys=raster.covered_index())
    grid = raster.expand(vis, scalar=True)
    return OcclusionMap(grid, int(samples), float(epsilon), int(seed), float(max_distance))
