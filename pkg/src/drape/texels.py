"""UV-space texel grids and rasterization of per-vertex attributes.

Texel (row, col) has its center at u = (col + 0.5) / W, v = (row + 0.5) / H,
so row index grows with v. Texels outside every UV triangle hold NaN.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
import scipy.sparse as sp

from .diagnostics import Diagnostics
from .mesh import DEGENERATE_AREA, MeshError, TriMesh

DEFAULT_RESOLUTION = 512
DEFAULT_DILATION = 2


def as_resolution(resolution) -> tuple[int, int]:
    """Normalize an int or (width, height) pair."""
    if np.isscalar(resolution):
        w = h = int(resolution)
    else:
        w, h = (int(x) for x in resolution)
    if w < 1 or h < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    return w, h


@dataclass
class TexelGrid:
    """Texel values (H, W[, C]) plus the mask of texels inside UV islands.

    Island margins filled by dilation carry values but are not covered.
    """

    values: np.ndarray
    coverage: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.coverage.shape[1], self.coverage.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def filled(self) -> np.ndarray:
        v = self.values if self.values.ndim == 2 else self.values[..., 0]
        return ~np.isnan(v)

    def check_compatible(self, other: "TexelGrid", what: str = "grid") -> None:
        if self.coverage.shape != other.coverage.shape:
            raise ValueError(f"{what} resolution {other.resolution} does not match {self.resolution}")
        if not np.array_equal(self.coverage, other.coverage):
            raise ValueError(f"{what} coverage differs")

    def covered_values(self) -> np.ndarray:
        return self.values[self.coverage]


@nb.njit(cache=True)
def _raster_uv_kernel(uv, tris, valid, width, height, tri_id, bary):
    overlaps = 0
    for f in range(tris.shape[0]):
        if not valid[f]:
            continue
        a, b, c = tris[f, 0], tris[f, 1], tris[f, 2]
        ax, ay = uv[a, 0] * width, uv[a, 1] * height
        bx, by = uv[b, 0] * width, uv[b, 1] * height
        cx, cy = uv[c, 0] * width, uv[c, 1] * height
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-18:
            continue
        if area < 0:
            bx, by, cx, cy = cx, cy, bx, by
            area = -area
            flipped = True
        else:
            flipped = False
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), height - 1)
        for row in range(y0, y1 + 1):
            py = row + 0.5
            for col in range(x0, x1 + 1):
                px = col + 0.5
                w0 = edge_function(bx, by, cx, cy, px, py)
                w1 = edge_function(cx, cy, ax, ay, px, py)
                w2 = edge_function(ax, ay, bx, by, px, py)
                if not (_inside(w0, cx - bx, cy - by) and _inside(w1, ax - cx, ay - cy)
                        and _inside(w2, bx - ax, by - ay)):
                    continue
                if tri_id[row, col] >= 0:
                    overlaps += 1
                tri_id[row, col] = f
                l0, l1, l2 = w0 / area, w1 / area, w2 / area
                bary[row, col, 0] = l0
                if flipped:
                    bary[row, col, 1] = l2
                    bary[row, col, 2] = l1
                else:
                    bary[row, col, 1] = l1
                    bary[row, col, 2] = l2
    return overlaps


@nb.njit(inline="always")
def edge_function(x0, y0, x1, y1, px, py):
    # evaluated from the lexicographically smaller endpoint, so the two
    # triangles sharing an edge get exactly negated values (no cracks)
    if x0 < x1 or (x0 == x1 and y0 < y1):
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    return -((x0 - x1) * (py - y1) - (y0 - y1) * (px - x1))


@nb.njit(inline="always")
def _inside(w, dx, dy):
    # top-left fill rule: points exactly on an edge belong to one triangle only
    if w > 0.0:
        return True
    if w < 0.0:
        return False
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


def dilation_operator(coverage: np.ndarray, width: int) -> sp.csr_matrix:
    """Sparse map from covered-texel values to all texels (row-major).

    Each dilation ring takes the mean of its already-filled 8-neighbours;
    rows of texels left unfilled are empty.
    """
    h, w = coverage.shape
    n = h * w
    cov_idx = np.flatnonzero(coverage.ravel())
    op = sp.csr_matrix((np.ones(len(cov_idx)), (cov_idx, np.arange(len(cov_idx)))),
                       shape=(n, len(cov_idx)))
    filled = coverage.copy()
    for _ in range(width):
        pad = np.pad(filled, 1)
        rows, cols = [], []
        ring = np.zeros_like(filled)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                nb_filled = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                cand = ~filled & nb_filled
                ring |= cand
                r, c = np.nonzero(cand)
                rows.append(r * w + c)
                cols.append((r + dy) * w + (c + dx))
        if not ring.any():
            break
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        counts = np.bincount(rows, minlength=n)
        avg = sp.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(n, n))
        op = op + avg @ op
        filled = filled | ring
    return op.tocsr()


class UVRaster:
    """Texel-to-surface lookup for a fixed UV layout.

    Holds, for each covered texel, the containing triangle and barycentric
    coordinates of its center. The layout depends only on topology and UVs,
    so one instance serves every frame of an animated mesh.
    """

    def __init__(self, mesh: TriMesh, resolution=DEFAULT_RESOLUTION,
                 dilation: int = DEFAULT_DILATION, diagnostics: Diagnostics | None = None):
        uv = mesh.require_uvs()
        self.width, self.height = as_resolution(resolution)
        self.dilation = int(dilation)
        self.triangles = mesh.triangles
        tri_id = np.full((self.height, self.width), -1, dtype=np.int64)
        bary = np.zeros((self.height, self.width, 3))
        valid = mesh.face_areas >= DEGENERATE_AREA
        overlaps = _raster_uv_kernel(uv, mesh.triangles, valid, self.width, self.height,
                                     tri_id, bary)
        if overlaps and diagnostics is not None:
            diagnostics.count("uv_overlap_texels", overlaps)
            diagnostics.warn(f"{overlaps} texels covered by overlapping UV triangles; "
                             f"last triangle wins")
        self.overlaps = overlaps
        self.tri_id = tri_id
        self.bary = bary
        self.coverage = tri_id >= 0
        self._cov_tri = tri_id[self.coverage]
        self._cov_bary = bary[self.coverage]
        self.dilate_op = dilation_operator(self.coverage, self.dilation)
        self.filled = np.asarray(self.dilate_op.getnnz(axis=1) > 0).reshape(self.coverage.shape)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def covered_index(self) -> np.ndarray:
        return np.flatnonzero(self.coverage.ravel())

    def interpolate_covered(self, field: np.ndarray) -> np.ndarray:
        """Barycentric interpolation at covered texels only, shape (K, C)."""
        f = np.asarray(field, dtype=np.float64)
        f2 = f.reshape(len(f), -1)
        corners = f2[self.triangles[self._cov_tri]]
        return np.einsum("kc,kcd->kd", self._cov_bary, corners)

    def expand(self, covered: np.ndarray, scalar: bool = False) -> TexelGrid:
        """Scatter covered-texel values (K, C) into a dilated grid."""
        covered = np.asarray(covered, dtype=np.float64).reshape(len(self._cov_tri), -1)
        full = self.dilate_op @ covered
        full[~self.filled.ravel()] = np.nan
        shape = (self.height, self.width) if scalar else (self.height, self.width, covered.shape[1])
        return TexelGrid(full.reshape(shape), self.coverage.copy())

    def rasterize(self, field: np.ndarray) -> TexelGrid:
        f = np.asarray(field)
        return self.expand(self.interpolate_covered(f), scalar=f.ndim == 1)


def rasterize_uv_attribute(mesh: TriMesh, field: np.ndarray, resolution=DEFAULT_RESOLUTION,
                           dilation: int = DEFAULT_DILATION,
                           diagnostics: Diagnostics | None = None) -> TexelGrid:
    field = np.asarray(field)
    if len(field) != mesh.n_vertices:
        raise MeshError(f"field has {len(field)} entries for {mesh.n_vertices} vertices")
    return UVRaster(mesh, resolution, dilation, diagnostics).rasterize(field)


# ---------------------------------------------------------------------------
# serialization

def _pack_mask(mask: np.ndarray) -> str:
    return base64.b64encode(np.packbits(mask.ravel()).tobytes()).decode("ascii")


def _unpack_mask(text: str, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(text), dtype=np.uint8))
    return bits[: shape[0] * shape[1]].reshape(shape).astype(bool)


def write_exr(path: str | os.PathLike, image: np.ndarray) -> None:
    import OpenEXR

    img = np.ascontiguousarray(image, dtype=np.float32)
    if img.ndim == 2:
        channels = {"Y": img}
    elif img.shape[2] == 3:
        channels = {"RGB": img}
    else:
        channels = {f"C{i}": np.ascontiguousarray(img[..., i]) for i in range(img.shape[2])}
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    with OpenEXR.File(header, channels) as f:
        f.write(str(path))


def read_exr(path: str | os.PathLike) -> np.ndarray:
    import OpenEXR

    with OpenEXR.File(str(path)) as f:
        ch = f.channels()
        if "RGB" in ch:
            return np.array(ch["RGB"].pixels, dtype=np.float64)
        if "RGBA" in ch:
            return np.array(ch["RGBA"].pixels[..., :3], dtype=np.float64)
        if "Y" in ch:
            return np.array(ch["Y"].pixels, dtype=np.float64)
        names = sorted(ch, key=lambda s: int(s[1:]) if s[1:].isdigit() else s)
        return np.stack([np.array(ch[n].pixels, dtype=np.float64) for n in names], axis=-1)


def save_texel_grid(grid: TexelGrid, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write values as EXR (or 8-bit PNG preview) plus a sidecar JSON."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from .imaging import write_png
        write_png(path, np.nan_to_num(grid.values), gamma=1.0)
    else:
        write_exr(path, grid.values)
    side = {"width": grid.resolution[0], "height": grid.resolution[1],
            "channels": grid.channels, "coverage": _pack_mask(grid.coverage)}
    side.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_texel_grid(path: str | os.PathLike) -> tuple[TexelGrid, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    shape = (side["height"], side["width"])
    if path.suffix.lower() == ".png":
        from .imaging import read_png
        values = read_png(path, gamma=1.0)
    else:
        values = read_exr(path)
    coverage = _unpack_mask(side.pop("coverage"), shape)
    return TexelGrid(values, coverage), side

