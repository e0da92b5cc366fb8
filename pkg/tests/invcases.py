"""Synthetic albedo round-trip scenes."""
import numpy as np

from drape.appearance import ViewParams, compute_irradiance_table, shade_texture
from drape.inverse import FitView, fit_albedo
from drape.render import look_at, rasterize
from drape.scenes import grid
from drape.texels import TexelGrid, UVRaster

import appcases as ap


def wavy_sheet(n=16):
    m = grid(n, n, 1.0, origin=(-0.5, -0.5))
    x, y = m.vertices[:, 0], m.vertices[:, 1]
    return m.with_vertices(np.c_[x, y, 0.08 * np.sin(5 * x) * np.cos(3 * y)])


def cameras(k=8, size=96):
    out = []
    for i in range(k):
        a = 2 * np.pi * i / k
        out.append(look_at((1.2 * np.cos(a), 1.2 * np.sin(a), 1.6), (0, 0, 0), fov_y=45,
                           width=size, height=size, name=f"c{i}"))
    return out


def render_views(mesh, raster, albedo_cov, table, cams, params, shadow=None, sigma=0.0, seed=0):
    rng = np.random.default_rng(seed)
    albedo = raster.expand(albedo_cov)
    views = []
    for cam in cams:
        tex = shade_texture(mesh, raster, albedo, table, cam.position, params, shadow)
        fb = rasterize([(mesh, tex)], cam)
        img = fb.rgb + sigma * rng.normal(size=fb.rgb.shape)
        views.append(FitView(mesh, cam, img, fb.tag == 0, shadow))
    return views


def roundtrip(sigma=0.0, n_views=8, resolution=24, seed=0):
    """Recover a random albedo from rendered views; returns (fit, truth, raster)."""
    mesh = wavy_sheet()
    raster = UVRaster(mesh, resolution)
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0.2, 0.8, (int(raster.coverage.sum()), 3))
    table = compute_irradiance_table(ap.bright_texel_env(base=0.3, peak=3.0))
    params = ViewParams(f0=0.04)
    vis = np.clip(0.6 + 0.4 * rng.random(raster.coverage.shape), 0, 1)
    shadow = TexelGrid(np.where(raster.filled, vis, np.nan), raster.coverage.copy())
    views = render_views(mesh, raster, truth, table, cameras(n_views), params, shadow, sigma, seed)
    fit = fit_albedo(views, table, raster, params)
    return fit, truth, raster


def observed_error(fit, truth, raster):
    obs = fit.observed[raster.coverage]
    est = fit.texture.values[raster.coverage][obs]
    d = est - truth[obs]
    return float(np.abs(d).max()), float(np.sqrt(np.mean(d ** 2))), float(obs.mean())
