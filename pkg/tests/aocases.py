"""Occlusion scenarios shared by the unit and acceptance tests."""
import numpy as np

from drape.occlusion import RayScene, bake_ambient_occlusion, occlusion_at_points
from drape.scenes import box, merge, quad, random_triangles

UP = np.array([0.0, 0.0, 1.0])


def floor(size=1.0, z=0.0):
    s = size
    return quad([[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]])


def wall(x=0.0, height=3.0, half_width=3.0):
    """Vertical wall in the plane x = const, from z = 0 up to ``height``."""
    w = half_width
    return quad([[x, -w, 0], [x, w, 0], [x, w, height], [x, -w, height]])


def open_plane_values(samples=64, resolution=32):
    f = floor(0.5)
    return bake_ambient_occlusion(f, RayScene(f), samples, resolution).grid.covered_values()


def enclosed_value(samples=1024):
    b = box((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), inward=True)
    return occlusion_at_points([[0.1, -0.2, 0.0]], [UP], RayScene(b), samples)[0]


def wall_values(samples=1024, n=16):
    """Floor texels 1 mm beside a wall passing through the texel point."""
    y = np.linspace(-0.5, 0.5, n)
    pts = np.c_[np.full(n, 1e-3), y, np.zeros(n)]
    scene = RayScene([floor(3.0), wall(0.0)])
    return occlusion_at_points(pts, np.tile(UP, (n, 1)), scene, samples, keys=np.arange(n) * 7919)


def offset_wall_value(samples=1024, offset=0.5, height=1.0, half_width=3.0, max_distance=2.0):
    scene = RayScene([floor(3.0), wall(-offset, height, half_width)])
    return occlusion_at_points([[0.0, 0.0, 0.0]], [UP], scene, samples,
                               max_distance=max_distance)[0]


def offset_wall_monte_carlo(n=1_000_000, offset=0.5, height=1.0, half_width=3.0,
                            max_distance=2.0, seed=0):
    """Cosine-weighted i.i.d. rays against the analytic wall rectangle."""
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(n), rng.random(n)
    r = np.sqrt(u1)
    d = np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2), np.sqrt(1 - u1)], 1)
    toward = d[:, 0] < 0
    t = np.where(toward, offset / np.where(toward, -d[:, 0], 1.0), np.inf)
    y, z = t * d[:, 1], t * d[:, 2]
    blocked = toward & (t < max_distance) & (np.abs(y) <= half_width) & (z <= height)
    return 1.0 - blocked.mean()


def monotone_trial(seed, n_points=40, samples=128):
    """Visibility before and after adding random occluders to a random scene."""
    rng = np.random.default_rng(seed)
    base = random_triangles(20, rng, extent=1.0, size=0.4)
    extra = random_triangles(15, rng, extent=1.0, size=0.4)
    pts = rng.uniform(-1, 1, (n_points, 3))
    nrm = rng.normal(size=(n_points, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    a = occlusion_at_points(pts, nrm, RayScene(base), samples, seed=seed)
    b = occlusion_at_points(pts, nrm, RayScene(merge([base, extra])), samples, seed=seed)
    return a, b
