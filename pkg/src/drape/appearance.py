"""Analytic appearance model: diffuse irradiance, Fresnel offset, AO shadow.

final = max((albedo * E(n) + offset) * shadow, 0) per texel, where E(n) is
the cosine-weighted hemisphere integral of a distant lat-long environment,
offset a Schlick-Fresnel view term and shadow a gamma curve on visibility.

Environment convention: row i spans polar angles [i, i+1] * pi / H measured
from +z, column j spans azimuths [j, j+1] * 2 pi / W.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numba as nb
import numpy as np

from .mesh import TriMesh, compute_vertex_normals, tbn_frames
from .texels import TexelGrid, UVRaster

GRID_SHAPE = (64, 128)
MIN_QUADRATURE = (128, 256)


# ---------------------------------------------------------------------------
# environment and irradiance


def latlong_directions(height: int, width: int) -> np.ndarray:
    """Unit directions of lat-long texel centers, shape (H, W, 3)."""
    th = (np.arange(height) + 0.5) / height * np.pi
    ph = (np.arange(width) + 0.5) / width * 2 * np.pi
    st = np.sin(th)[:, None]
    return np.stack([st * np.cos(ph)[None], st * np.sin(ph)[None],
                     np.broadcast_to(np.cos(th)[:, None], (height, width))], axis=-1)


def direction_to_latlong(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle in [0, pi] and azimuth in [0, 2 pi) of unit directions."""
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
    return theta, phi


@dataclass(frozen=True)
class EnvironmentLight:
    """Lat-long radiance map (H, W, 3), piecewise constant per texel."""

    radiance: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.radiance, dtype=np.float64)
        if r.ndim == 2:
            r = np.repeat(r[..., None], 3, axis=2)
        if r.ndim != 3 or r.shape[2] != 3:
            raise ValueError(f"environment must be (H, W, 3), got {r.shape}")
        if r.shape[0] < 1 or r.shape[1] < 1:
            raise ValueError("environment has zero resolution")
        if not np.isfinite(r).all() or (r < 0).any():
            raise ValueError("environment radiance must be finite and >= 0")
        r.flags.writeable = False
        object.__setattr__(self, "radiance", r)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.radiance.shape[1], self.radiance.shape[0]

    @classmethod
    def uniform(cls, value=1.0, resolution=(32, 16)) -> "EnvironmentLight":
        w, h = resolution
        return cls(np.broadcast_to(np.asarray(value, float) * np.ones(3), (h, w, 3)).copy())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EnvironmentLight":
        from .texels import read_exr
        return cls(read_exr(path))

    def solid_angles(self) -> np.ndarray:
        """Exact solid angle of each texel, shape (H,)."""
        h, w = self.radiance.shape[:2]
        edges = np.cos(np.arange(h + 1) / h * np.pi)
        return (edges[:-1] - edges[1:]) * (2 * np.pi / w)

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Radiance of the texel containing each direction."""
        h, w = self.radiance.shape[:2]
        th, ph = direction_to_latlong(dirs)
        i = np.clip((th / np.pi * h).astype(np.int64), 0, h - 1)
        j = np.clip((ph / (2 * np.pi) * w).astype(np.int64), 0, w - 1)
        return self.radiance[i, j]

    def quadrature(self, min_shape=MIN_QUADRATURE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directions, solid angles and radiance of a supersampled texel split.

        Each texel is split into s x t sub-patches (so the total resolution
        reaches ``min_shape``); sub-patch solid angles are exact and share the
        parent's radiance, so the quadrature integrates the map exactly
        except for the cosine factor.
        """
        h, w = self.radiance.shape[:2]
        s = max(1, -(-min_shape[0] // h))
        t = max(1, -(-min_shape[1] // w))
        hh, ww = h * s, w * t
        edges = np.cos(np.arange(hh + 1) / hh * np.pi)
        omega = np.repeat(((edges[:-1] - edges[1:]) * (2 * np.pi / ww))[:, None], ww, axis=1)
        # cosine factor evaluated at each sub-patch's angular center
        dirs = latlong_directions(hh, ww)
        rad = np.repeat(np.repeat(self.radiance, s, axis=0), t, axis=1)
        return dirs.reshape(-1, 3), omega.ravel(), rad.reshape(-1, 3)


@nb.njit(parallel=True, cache=True)
def _cosine_integral(normals, dirs, weighted, out):
    # out[i] = sum_k max(n_i . d_k, 0) * weighted[k]
    for i in nb.prange(normals.shape[0]):
        nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
        r = 0.0
        g = 0.0
        b = 0.0
        for k in range(dirs.shape[0]):
            c = nx * dirs[k, 0] + ny * dirs[k, 1] + nz * dirs[k, 2]
            if c > 0.0:
                r += c * weighted[k, 0]
                g += c * weighted[k, 1]
                b += c * weighted[k, 2]
        out[i, 0] = r
        out[i, 1] = g
        out[i, 2] = b


def irradiance_direct(env: EnvironmentLight, normals: np.ndarray,
                      min_shape=MIN_QUADRATURE) -> np.ndarray:
    """E(n) by direct quadrature, no table interpolation."""
    dirs, omega, rad = env.quadrature(min_shape)
    n = np.ascontiguousarray(np.atleast_2d(normals), dtype=np.float64)
    out = np.empty((len(n), 3))
    _cosine_integral(n, np.ascontiguousarray(dirs), np.ascontiguousarray(rad * omega[:, None]),
                     out)
    return out


_SH_C0 = 0.5 / np.sqrt(np.pi)
_SH_C1 = np.sqrt(3 / (4 * np.pi))
_SH_C2 = 0.5 * np.sqrt(15 / np.pi)
_SH_C3 = 0.25 * np.sqrt(5 / np.pi)


def _sh_basis(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to band 2."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, _SH_C0),
        _SH_C1 * y, _SH_C1 * z, _SH_C1 * x,
        _SH_C2 * x * y, _SH_C2 * y * z, _SH_C3 * (3 * z * z - 1),
        _SH_C2 * x * z, 0.5 * _SH_C2 * (x * x - y * y)], axis=-1)


# clamped-cosine convolution of bands 0, 1, 2
SH_BAND_FACTORS = np.array([np.pi] + [2 * np.pi / 3] * 3 + [np.pi / 4] * 5)


@dataclass
class IrradianceTable:
    """E(n) for unit normals, tabulated on a lat-long grid or as SH-9.

    ``mode`` is ``"grid"`` (bilinear over a (64, 128) normal grid, azimuth
    wraps) or ``"sh"`` (order-2 spherical harmonics).
    """

    mode: str
    data: np.ndarray

    def evaluate(self, normals: np.ndarray) -> np.ndarray:
        n = np.asarray(normals, dtype=np.float64)
        shape = n.shape[:-1]
        n = n.reshape(-1, 3)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(length > 0, length, 1.0)
        if self.mode == "sh":
            # coefficients already carry the band factors
            out = _sh_basis(n) @ self.data
        else:
            out = self._bilinear(n)
        return np.maximum(out, 0.0).reshape(shape + (3,))

    def _bilinear(self, n):
        h, w = self.data.shape[:2]
        th, ph = direction_to_latlong(n)
        r = np.clip(th / np.pi * h - 0.5, 0.0, h - 1.0)
        c = ph / (2 * np.pi) * w - 0.5
        r0 = np.minimum(np.floor(r).astype(np.int64), h - 2) if h > 1 else np.zeros(len(r), int)
        fr = (r - r0)[:, None] if h > 1 else np.zeros((len(r), 1))
        c0f = np.floor(c)
        fc = (c - c0f)[:, None]
        c0 = np.mod(c0f.astype(np.int64), w)
        c1 = np.mod(c0 + 1, w)
        r1 = np.minimum(r0 + 1, h - 1)
        d = self.data
        top = d[r0, c0] * (1 - fc) + d[r0, c1] * fc
        bot = d[r1, c0] * (1 - fc) + d[r1, c1] * fc
        return top * (1 - fr) + bot * fr


def compute_irradiance_table(env: EnvironmentLight, mode: str = "grid",
                             shape=GRID_SHAPE) -> IrradianceTable:
    if mode == "grid":
        h, w = shape
        if h < 2 or w < 1:
            raise ValueError("grid table needs at least 2 x 1 entries")
        normals = latlong_directions(h, w).reshape(-1, 3)
        return IrradianceTable("grid", irradiance_direct(env, normals).reshape(h, w, 3))
    if mode == "sh":
        dirs, omega, rad = env.quadrature()
        coeffs = _sh_basis(dirs).T @ (rad * omega[:, None])
        return IrradianceTable("sh", coeffs * SH_BAND_FACTORS[:, None])
    raise ValueError(f"unknown irradiance mode {mode!r}")


# ---------------------------------------------------------------------------
# texel-space branches


@dataclass(frozen=True)
class ViewParams:
    camera_position: tuple = (0.0, 0.0, 0.0)
    f0: float = 0.04
    tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.f0 <= 1.0:
            raise ValueError("F0 must lie in [0, 1]")


@dataclass(frozen=True)
class ShadowParams:
    gamma: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("shadow exponent must be > 0")
        if not 0.0 <= self.floor < 1.0:
            raise ValueError("shadow floor must lie in [0, 1)")


def fresnel_schlick(cos_theta, f0: float):
    c = np.maximum(np.asarray(cos_theta, dtype=np.float64), 0.0)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def albedo_texture(values: np.ndarray, coverage: np.ndarray) -> TexelGrid:
    v = np.asarray(values, dtype=np.float64)
    finite = v[~np.isnan(v)]
    if finite.size and (finite.min() < 0 or finite.max() > 1):
        raise ValueError("albedo must lie in [0, 1]")
    return TexelGrid(v, np.asarray(coverage, bool))


def _check_pair(a: TexelGrid, b: TexelGrid, what: str) -> None:
    if a.coverage.shape != b.coverage.shape:
        raise ValueError(f"{what} resolution {b.resolution} does not match {a.resolution}")


def _rgb(values: np.ndarray) -> np.ndarray:
    return values[..., None] if values.ndim == 2 else values


def diffuse_texture(albedo: TexelGrid, normal_map: TexelGrid, table: IrradianceTable) -> TexelGrid:
    """albedo * E(normal) per texel; unfilled texels stay NaN."""
    _check_pair(albedo, normal_map, "normal map")
    n = normal_map.values
    ok = ~np.isnan(n).any(axis=-1)
    e = np.full(n.shape[:2] + (3,), np.nan)
    e[ok] = table.evaluate(n[ok])
    return TexelGrid(_rgb(albedo.values) * e, albedo.coverage.copy())


def view_offset(normal_map: TexelGrid, view_dirs_tbn: TexelGrid, params: ViewParams,
                table: IrradianceTable) -> TexelGrid:
    """tint * Schlick(cos) * E(n) / pi, zero where the texel faces away."""
    _check_pair(normal_map, view_dirs_tbn, "view directions")
    v = view_dirs_tbn.values
    ok = ~np.isnan(v).any(axis=-1)
    if ok.any():
        err = np.abs(np.linalg.norm(v[ok], axis=1) - 1.0).max()
        if err > 1e-3:
            raise ValueError(f"view directions not unit length (max error {err:.2e})")
    out = np.full(v.shape[:2] + (3,), np.nan)
    cos = v[ok][:, 2]
    e = table.evaluate(normal_map.values[ok])
    f = np.where(cos >= 0.0, fresnel_schlick(cos, params.f0), 0.0)
    out[ok] = np.asarray(params.tint, float) * f[:, None] * e / np.pi
    return TexelGrid(out, normal_map.coverage.copy())


def shadow_map(occlusion, params: ShadowParams) -> TexelGrid:
    """floor + (1 - floor) * visibility ** gamma."""
    grid = occlusion.grid if hasattr(occlusion, "grid") else occlusion
    vis = np.clip(grid.values, 0.0, 1.0)
    s = params.floor + (1.0 - params.floor) * vis ** params.gamma
    return TexelGrid(s, grid.coverage.copy())


def compose_final_texture(diffuse: TexelGrid, offset: TexelGrid, shadow: TexelGrid) -> TexelGrid:
    _check_pair(diffuse, offset, "view offset")
    _check_pair(diffuse, shadow, "shadow")
    out = np.maximum((_rgb(diffuse.values) + _rgb(offset.values)) * _rgb(shadow.values), 0.0)
    return TexelGrid(out, diffuse.coverage.copy())


# ---------------------------------------------------------------------------
# geometry → texel inputs


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(length > 1e-300, length, 1.0)


def texel_geometry(mesh: TriMesh, raster: UVRaster, normals: np.ndarray | None = None,
                   diagnostics=None) -> dict:
    """Covered-texel positions, unit normals and orthonormal TBN frames."""
    if normals is None:
        normals = compute_vertex_normals(mesh, diagnostics)
    frames = tbn_frames(mesh, normals, diagnostics)
    pos = raster.interpolate_covered(mesh.vertices)
    n = _normalize_rows(raster.interpolate_covered(normals))
    t = raster.interpolate_covered(frames[:, :, 0])
    t = _normalize_rows(t - (t * n).sum(1, keepdims=True) * n)
    b = np.cross(n, t)
    return {"position": pos, "normal": n, "tangent": t, "binormal": b}


def normal_map(mesh: TriMesh, raster: UVRaster, normals=None, geometry=None) -> TexelGrid:
    g = geometry or texel_geometry(mesh, raster, normals)
    grid = raster.expand(g["normal"])
    grid.values[:] = _normalize_rows(grid.values)
    return grid


def view_directions_tbn(mesh: TriMesh, raster: UVRaster, camera_position, normals=None,
                        geometry=None) -> TexelGrid:
    """Per-texel unit direction to the camera in the texel's TBN frame."""
    g = geometry or texel_geometry(mesh, raster, normals)
    v = _normalize_rows(np.asarray(camera_position, float) - g["position"])
    local = np.stack([(v * g["tangent"]).sum(1), (v * g["binormal"]).sum(1),
                      (v * g["normal"]).sum(1)], axis=1)
    grid = raster.expand(local)
    grid.values[:] = _normalize_rows(grid.values)
    return grid


def uniform_texture(raster: UVRaster, value) -> TexelGrid:
    k = int(raster.coverage.sum())
    return raster.expand(np.tile(np.asarray(value, float).reshape(1, -1), (k, 1)))


def shade_texture(mesh: TriMesh, raster: UVRaster, albedo: TexelGrid, table: IrradianceTable,
                  camera_position, params: ViewParams = ViewParams(),
                  shadow: TexelGrid | None = None, view_dependent: bool = True) -> TexelGrid:
    """Final garment texture for one frame and camera.

    ``shadow=None`` means no attenuation; ``view_dependent=False`` drops
    the Fresnel offset (the view-independent model variant).
    """
    geo = texel_geometry(mesh, raster)
    nmap = normal_map(mesh, raster, geometry=geo)
    diffuse = diffuse_texture(albedo, nmap, table)
    if view_dependent:
        vdir = view_directions_tbn(mesh, raster, camera_position, geometry=geo)
        offset = view_offset(nmap, vdir, params, table)
    else:
        offset = TexelGrid(np.zeros_like(diffuse.values), diffuse.coverage.copy())
    if shadow is None:
        shadow = TexelGrid(np.ones(raster.coverage.shape), raster.coverage.copy())
    return compose_final_texture(diffuse, offset, shadow)
