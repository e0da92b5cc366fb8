"""Albedo recovery from rendered or captured views by linear least squares.

A rendered garment pixel is a bilinear blend of final-texture texels, each
equal to (albedo * E + offset) * shadow with the albedo dilated from the
covered texels. With geometry, lighting and camera fixed this is affine in
the covered-texel albedo, so the masked squared loss is minimized by one
sparse normal-equations solve per channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .appearance import (IrradianceTable, ViewParams, diffuse_texture, normal_map, texel_geometry,
                         view_directions_tbn, view_offset)
from .mesh import TriMesh
from .render import CameraView, bilinear_footprint, rasterize
from .texels import TexelGrid, UVRaster


class FitError(ValueError):
    pass


@dataclass
class FitView:
    """One observation: garment geometry, camera, linear image and mask.

    ``shadow`` is the quasi-shadow texel grid for this frame; ``others``
    are extra (mesh, texture) pairs (the body) that can occlude the garment.
    """

    mesh: TriMesh
    camera: CameraView
    image: np.ndarray
    mask: np.ndarray
    shadow: TexelGrid | None = None
    others: list = field(default_factory=list)


@dataclass
class AlbedoFit:
    texture: TexelGrid
    observed: np.ndarray           # (H, W) covered texels with data
    raw: np.ndarray                # (K, 3) unclamped solution on covered texels
    residual_init: dict
    residual_final: dict
    gradient_norm: float
    n_pixels: int


def _shading_grids(view: FitView, raster: UVRaster, table: IrradianceTable,
                   params: ViewParams):
    # per-texel multiplier E * s and additive offset * s of the final texture
    geo = texel_geometry(view.mesh, raster)
    nmap = normal_map(view.mesh, raster, geometry=geo)
    ones = TexelGrid(np.ones(raster.coverage.shape + (3,)), raster.coverage)
    e = diffuse_texture(ones, nmap, table).values
    vdir = view_directions_tbn(view.mesh, raster, view.camera.position, geometry=geo)
    o = view_offset(nmap, vdir, params, table).values
    s = np.ones(raster.coverage.shape) if view.shadow is None else view.shadow.values
    s = s[..., None] if s.ndim == 2 else s
    gain = np.nan_to_num(e * s, nan=0.0)
    # a texel left unfilled renders as 0 whatever its albedo
    bias = np.nan_to_num(o * s, nan=0.0)
    return gain.reshape(-1, 3), bias.reshape(-1, 3)


def _view_system(view: FitView, raster: UVRaster, table, params):
    h, w = raster.height, raster.width
    fb = rasterize([(view.mesh, (0.0, 0.0, 0.0))] + list(view.others), view.camera)
    if view.image.shape[:2] != fb.rgb.shape[:2] or view.mask.shape != fb.rgb.shape[:2]:
        raise FitError("reference image or mask does not match the camera resolution")
    pix = (fb.tag == 0) & np.asarray(view.mask, bool)
    uv = fb.uv[pix]
    idx, wt = bilinear_footprint(uv, w, h)
    gain, bias = _shading_grids(view, raster, table, params)
    n_pix = len(uv)
    rows = np.repeat(np.arange(n_pix), 4)
    blend = sp.csr_matrix((wt.ravel(), (rows, idx.ravel())), shape=(n_pix, h * w))
    mats = [blend @ sp.diags(gain[:, c]) @ raster.dilate_op for c in range(3)]
    rhs = view.image[pix][:, :3] - blend @ bias
    return mats, rhs, n_pix


def _residuals(mats, rhs, albedo):
    r = np.concatenate([mats[c] @ albedo[:, c] - rhs[:, c] for c in range(3)])
    return {"l1": float(np.abs(r).sum()), "l2": float(r @ r)}


def fit_albedo(views: list[FitView], table: IrradianceTable, raster: UVRaster,
               params: ViewParams = ViewParams(), *, init: float = 0.5,
               ridge: float = 1e-12) -> AlbedoFit:
    """Masked least-squares albedo over all views jointly.

    Covered texels outside every view's footprint are flagged unobserved
    and hold NaN. ``ridge`` (relative to the mean diagonal) only guards
    against singular normal matrices.
    """
    if not views:
        raise FitError("no views to fit")
    per_view = [_view_system(v, raster, table, params) for v in views]
    mats = [sp.vstack([pv[0][c] for pv in per_view]).tocsr() for c in range(3)]
    rhs = np.vstack([pv[1] for pv in per_view])
    n_pix = sum(pv[2] for pv in per_view)
    k = raster.dilate_op.shape[1]
    col_energy = sum(np.asarray(m.multiply(m).sum(axis=0)).ravel() for m in mats)
    observed = col_energy > 0
    if not observed.any():
        raise FitError("no texel is observed in any view")
    obs_idx = np.flatnonzero(observed)
    raw = np.full((k, 3), np.nan)
    grad = 0.0
    for c in range(3):
        a = mats[c][:, obs_idx]
        n = (a.T @ a).tocsc()
        lam = ridge * max(n.diagonal().mean(), 1e-300)
        sol = spla.spsolve(n + lam * sp.identity(n.shape[0], format="csc"), a.T @ rhs[:, c])
        raw[obs_idx, c] = sol
        g = a.T @ (a @ sol - rhs[:, c])
        grad = max(grad, float(np.abs(g).max() / max(np.abs(a.T @ rhs[:, c]).max(), 1e-300)))
    init_alb = np.full((k, 3), float(init))
    res0 = _residuals(mats, rhs, init_alb)
    clamped = np.clip(np.nan_to_num(raw, nan=init), 0.0, 1.0)
    res1 = _residuals(mats, rhs, clamped)
    covered = np.clip(raw, 0.0, 1.0)
    tex = raster.expand(np.nan_to_num(covered, nan=0.0))
    # sentinel on unobserved covered texels and on margins fed only by them
    tex.values[raster.coverage & ~_to_grid(raster, observed)] = np.nan
    feeds = np.asarray(abs(raster.dilate_op) @ (~observed).astype(float)).ravel() > 0
    margin = feeds.reshape(raster.coverage.shape) & ~raster.coverage
    tex.values[margin] = np.nan
    return AlbedoFit(tex, _to_grid(raster, observed), raw, res0, res1, grad, int(n_pix))


def _to_grid(raster: UVRaster, covered_flags: np.ndarray) -> np.ndarray:
    g = np.zeros(raster.coverage.shape, bool)
    g[raster.coverage] = covered_flags
    return g
