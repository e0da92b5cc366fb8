"""Brute-force reference implementations used as test oracles."""
import numpy as np


def ray_triangles_bruteforce(o, d, v0, v1, v2, t_min=0.0, t_max=np.inf):
    """Moller-Trumbore against every triangle; returns (t, index) or (inf, -1)."""
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = (e1 * p).sum(1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = (s * p).sum(1) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = (e2 * q).sum(1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)
    if not hit.any():
        return np.inf, -1
    t = np.where(hit, t, np.inf)
    k = int(np.argmin(t))
    return float(t[k]), k


def point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0, 1)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def point_mesh_distance(points, vertices, triangles):
    """Exact unsigned distance from each point to the nearest triangle (dense N x M)."""
    p = np.asarray(points, float)[:, None, :]
    a, b, c = (vertices[triangles[:, k]][None] for k in range(3))
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    h = ((p - a) * n).sum(-1)
    proj = p - h[..., None] * n
    # inside test by same-sign edge cross products
    s0 = (np.cross(b - a, proj - a) * n).sum(-1)
    s1 = (np.cross(c - b, proj - b) * n).sum(-1)
    s2 = (np.cross(a - c, proj - c) * n).sum(-1)
    inside = (s0 >= 0) & (s1 >= 0) & (s2 >= 0)
    edge = np.minimum(np.minimum(point_segment_distance(p, a, b), point_segment_distance(p, b, c)),
                      point_segment_distance(p, c, a))
    return np.where(inside, np.abs(h), edge).min(1)


def convex_signed_distance(points, mesh):
    """Signed distance lower bound to a closed convex mesh: max over face planes.

    Exact inside the body; outside it is <= the true distance, and >= 0.
    """
    v, t = mesh.vertices, mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return ((np.asarray(points)[:, None, :] - v[t[:, 0]][None]) * n[None]).sum(-1).max(1)
