"""Depth-buffered software rasterizer with perspective-correct texturing.

Camera convention (OpenCV): x right, y down, z forward; pixel (row, col)
has its center at image coordinates (col + 0.5, row + 0.5). Triangles are
double-sided, clipped against a near plane and filled with a top-left rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .mesh import TriMesh
from .texels import TexelGrid, edge_function

TILE = 16
NEAR = 1e-3
BODY_GRAY = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: x_cam = R @ x_world + t, then fx x/z + cx, fy y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    name: str = "cam"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image resolution must be >= 1")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def pixel_rays(self, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and unit directions through image coordinates."""
        d = np.stack([(np.asarray(px, float) - self.cx) / self.fx,
                      (np.asarray(py, float) - self.cy) / self.fy, np.ones(np.shape(px))], -1)
        d = d @ self.rotation
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.position, d.shape), d

    def to_dict(self) -> dict:
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]),
                   np.array(d["translation"]), int(d["width"]), int(d["height"]),
                   d.get("name", "cam"))


def look_at(eye, target, up=(0.0, 0.0, 1.0), fov_y: float = 45.0, width: int = 256,
            height: int = 256, name: str = "cam") -> CameraView:
    """Camera at ``eye`` looking at ``target``; ``fov_y`` in degrees."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        raise ValueError("up vector parallel to the viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    f = 0.5 * height / np.tan(np.radians(fov_y) / 2)
    return CameraView(f, f, width / 2, height / 2, r, -r @ eye, width, height, name)


@dataclass
class Framebuffer:
    """Rendered image plus per-pixel depth, coverage and surface lookup.

    ``tag`` is the index of the winning mesh (-1 = background); ``triangle``
    and ``bary`` locate the visible point on that mesh, ``uv`` its texture
    coordinate (NaN where the mesh has none).
    """

    rgb: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray
    tag: np.ndarray
    triangle: np.ndarray
    bary: np.ndarray
    uv: np.ndarray

    def mask(self, tag: int) -> np.ndarray:
        return self.tag == tag


# ---------------------------------------------------------------------------
# clipping


def _clip_near(zc: np.ndarray, tris: np.ndarray, near: float):
    """Clip triangles against z = near in camera space.

    Returns clip-triangle vertex records as (source triangle, barycentric
    weights of the three original corners) per clip-triangle corner.
    """
    z = zc[tris]
    inside = z >= near
    n_in = inside.sum(axis=1)
    keep = np.flatnonzero(n_in == 3)
    src = [keep]
    weights = [np.broadcast_to(np.eye(3), (len(keep), 3, 3))]
    for f in np.flatnonzero((n_in > 0) & (n_in < 3)):
        poly = []
        for i in range(3):
            j = (i + 1) % 3
            ei, ej = np.eye(3)[i], np.eye(3)[j]
            zi, zj = z[f, i], z[f, j]
            if zi >= near:
                poly.append(ei)
            if (zi >= near) != (zj >= near):
                s = (near - zi) / (zj - zi)
                poly.append(ei + s * (ej - ei))
        for k in range(1, len(poly) - 1):
            src.append(np.array([f]))
            weights.append(np.array([[poly[0], poly[k], poly[k + 1]]]))
    return np.concatenate(src), np.concatenate([np.asarray(w) for w in weights])


# ---------------------------------------------------------------------------
# raster kernel


@nb.njit(inline="always")
def _top_left(w, dx, dy):
    # edge (dx, dy) in y-down screen space for a positively oriented triangle
    if w > 0.0:
        return True
    if w < 0.0:
        return False
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@nb.njit(cache=True)
def _bin(sx, sy, width, height, tile, n_tx, n_ty):
    n = sx.shape[0]
    counts = np.zeros(n_tx * n_ty, np.int64)
    boxes = np.empty((n, 4), np.int64)
    for f in range(n):
        x0 = max(int(np.floor(min(sx[f, 0], sx[f, 1], sx[f, 2]) - 0.5)), 0)
        x1 = min(int(np.ceil(max(sx[f, 0], sx[f, 1], sx[f, 2]) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(sy[f, 0], sy[f, 1], sy[f, 2]) - 0.5)), 0)
        y1 = min(int(np.ceil(max(sy[f, 0], sy[f, 1], sy[f, 2]) - 0.5)), height - 1)
        boxes[f, 0], boxes[f, 1], boxes[f, 2], boxes[f, 3] = x0, x1, y0, y1
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * n_tx + tx] += 1
    offsets = np.zeros(n_tx * n_ty + 1, np.int64)
    for i in range(n_tx * n_ty):
        offsets[i + 1] = offsets[i] + counts[i]
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], np.int64)
    for f in range(n):
        x0, x1, y0, y1 = boxes[f, 0], boxes[f, 1], boxes[f, 2], boxes[f, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * n_tx + tx
                items[fill[t]] = f
                fill[t] += 1
    return offsets, items, boxes


@nb.njit(parallel=True, cache=True)
def _raster(sx, sy, iz, width, height, tile, n_tx, offsets, items, boxes, out_tri, out_bary,
            out_iz):
    # each tile owns its pixels, so tiles run independently; triangles are
    # visited in index order and only a strictly nearer fragment replaces
    for t in nb.prange(n_tx * (offsets.shape[0] - 1) // n_tx):
        tx0 = (t % n_tx) * tile
        ty0 = (t // n_tx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for k in range(offsets[t], offsets[t + 1]):
            f = items[k]
            ax, ay, bx, by, cx, cy = sx[f, 0], sy[f, 0], sx[f, 1], sy[f, 1], sx[f, 2], sy[f, 2]
            za, zb, zc = iz[f, 0], iz[f, 1], iz[f, 2]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0 or not np.isfinite(area):
                continue
            swap = area < 0.0
            if swap:
                bx, by, cx, cy = cx, cy, bx, by
                zb, zc = zc, zb
                area = -area
            x0 = max(boxes[f, 0], tx0)
            x1 = min(boxes[f, 1], tx1)
            y0 = max(boxes[f, 2], ty0)
            y1 = min(boxes[f, 3], ty1)
            for row in range(y0, y1 + 1):
                py = row + 0.5
                for col in range(x0, x1 + 1):
                    px = col + 0.5
                    w0 = edge_function(bx, by, cx, cy, px, py)
                    w1 = edge_function(cx, cy, ax, ay, px, py)
                    w2 = edge_function(ax, ay, bx, by, px, py)
                    if not (_top_left(w0, cx - bx, cy - by) and _top_left(w1, ax - cx, ay - cy)
                            and _top_left(w2, bx - ax, by - ay)):
                        continue
                    l0, l1, l2 = w0 / area, w1 / area, w2 / area
                    q0, q1, q2 = l0 * za, l1 * zb, l2 * zc
                    izp = q0 + q1 + q2
                    if izp <= out_iz[row, col]:
                        continue
                    out_iz[row, col] = izp
                    out_tri[row, col] = f
                    out_bary[row, col, 0] = q0 / izp
                    if swap:
                        out_bary[row, col, 1] = q2 / izp
                        out_bary[row, col, 2] = q1 / izp
                    else:
                        out_bary[row, col, 1] = q1 / izp
                        out_bary[row, col, 2] = q2 / izp


# ---------------------------------------------------------------------------
# texture sampling


def bilinear_footprint(uv: np.ndarray, width: int, height: int):
    """Texel indices (K, 4) into a row-major (H, W) grid and bilinear weights."""
    x = np.clip(uv[:, 0] * width - 0.5, 0.0, width - 1.0)
    y = np.clip(uv[:, 1] * height - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], 1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1)
    return idx, w


def sample_texture(texture: TexelGrid, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup clamped to the grid; unfilled texels contribute 0."""
    v = texture.values
    v = v[..., None] if v.ndim == 2 else v
    h, w = v.shape[:2]
    flat = np.nan_to_num(v.reshape(h * w, -1), nan=0.0)
    idx, wt = bilinear_footprint(uv, w, h)
    return np.einsum("kj,kjc->kc", wt, flat[idx])


def rasterize(meshes, camera: CameraView, background=(0.0, 0.0, 0.0),
              near: float = NEAR) -> Framebuffer:
    """Render ``(mesh, texture)`` pairs jointly through one depth buffer.

    ``texture`` is an RGB TexelGrid (mesh needs UVs) or a constant RGB
    triple, e.g. the static body color.
    """
    h, w = camera.height, camera.width
    geo_pos, geo_tri, owners, local = [], [], [], []
    off = 0
    for k, (mesh, tex) in enumerate(meshes):
        if isinstance(tex, TexelGrid):
            mesh.require_uvs()
        geo_pos.append(camera.to_camera(mesh.vertices))
        geo_tri.append(mesh.triangles + off)
        owners.append(np.full(mesh.n_triangles, k, np.int64))
        local.append(np.arange(mesh.n_triangles))
        off += mesh.n_vertices
    rgb = np.empty((h, w, 3))
    rgb[:] = np.asarray(background, float)
    fb = Framebuffer(rgb, np.full((h, w), np.inf), np.zeros((h, w), bool),
                     np.full((h, w), -1, np.int64), np.full((h, w), -1, np.int64),
                     np.zeros((h, w, 3)), np.full((h, w, 2), np.nan))
    if not geo_pos:
        return fb
    pc = np.vstack(geo_pos)
    tris = np.vstack(geo_tri)
    owner = np.concatenate(owners)
    local_tri = np.concatenate(local)
    src, wts = _clip_near(pc[:, 2], tris, near)
    if len(src) == 0:
        return fb
    corners = pc[tris[src]]                              # (F, 3, 3) original corners
    clip_pos = np.einsum("fij,fjk->fik", wts, corners)   # clip-triangle corners
    z = clip_pos[..., 2]
    sx = np.ascontiguousarray(camera.fx * clip_pos[..., 0] / z + camera.cx)
    sy = np.ascontiguousarray(camera.fy * clip_pos[..., 1] / z + camera.cy)
    iz = np.ascontiguousarray(1.0 / z)
    n_tx, n_ty = -(-w // TILE), -(-h // TILE)
    offsets, items, boxes = _bin(sx, sy, w, h, TILE, n_tx, n_ty)
    out_tri = np.full((h, w), -1, np.int64)
    out_bary = np.zeros((h, w, 3))
    out_iz = np.zeros((h, w))
    _raster(sx, sy, iz, w, h, TILE, n_tx, offsets, items, boxes, out_tri, out_bary, out_iz)
    cov = out_tri >= 0
    f = out_tri[cov]
    # barycentrics w.r.t. the original triangle
    bary = np.einsum("ki,kij->kj", out_bary[cov], wts[f])
    fb.coverage = cov
    fb.depth[cov] = 1.0 / out_iz[cov]
    fb.tag[cov] = owner[src[f]]
    fb.triangle[cov] = local_tri[src[f]]
    fb.bary[cov] = bary
    rows, cols = np.nonzero(cov)
    for k, (mesh, tex) in enumerate(meshes):
        sel = fb.tag[cov] == k
        if not sel.any():
            continue
        r, c = rows[sel], cols[sel]
        if mesh.has_uvs:
            uv = np.einsum("ki,kij->kj", bary[sel], mesh.uvs[mesh.triangles[fb.triangle[r, c]]])
            fb.uv[r, c] = uv
        if isinstance(tex, TexelGrid):
            fb.rgb[r, c] = sample_texture(tex, fb.uv[r, c])[:, :3] if tex.channels >= 3 else \
                np.repeat(sample_texture(tex, fb.uv[r, c]), 3, axis=1)
        else:
            fb.rgb[r, c] = np.asarray(tex, float)
    return fb
