"""Shared simulation scenarios for the solver tests and the acceptance suite."""
import numpy as np
from scipy.optimize import minimize

from drape.mesh import TriMesh
from drape.scenes import grid, icosphere
from drape.sim import (STRETCH, CollisionBody, ConstraintSet, SimParams, SimState,
                       build_constraints, initial_state, particle_masses, step)

from oracles import convex_signed_distance, point_mesh_distance


def vertical_strip(n=20, size=0.5):
    """n x n cloth in the xz plane with its top row at z = size."""
    g = grid(n, n, size)
    g = g.with_vertices(np.c_[g.vertices[:, 0], np.zeros(g.n_vertices), g.vertices[:, 1]])
    top = np.flatnonzero(np.isclose(g.vertices[:, 2], size))
    return g, top


def free_fall_velocity():
    st = SimState([[0.0, 0.0, 1.0]], [[0.0, 0.0, 0.0]], [1.0])
    empty = ConstraintSet(np.zeros((0, 2), int), np.zeros(0), np.zeros(0), np.zeros(0))
    out = step(st, empty, None, SimParams(gravity=(0, 0, -9.8), dt=0.1, substeps=1, damping=0))
    return out.velocities[0]


def symmetric_projection(rest=0.3):
    st = SimState([[-rest, 0, 0], [rest, 0, 0]], np.zeros((2, 3)), [2.0, 2.0])
    c = ConstraintSet([[0, 1]], [rest], [0.0], [STRETCH])
    out = step(st, c, None, SimParams(gravity=(0, 0, 0), substeps=1, iterations=1, damping=0))
    return st.positions, out.positions


def hanging_residual(substeps=40, iterations=10, frames=150, n=20):
    g, top = vertical_strip(n)
    c = build_constraints(g, 0.0, 0.0)
    st = initial_state(g, top)
    p = SimParams(substeps=substeps, iterations=iterations, damping=0.01)
    for _ in range(frames):
        st = step(st, c, None, p)
    r = np.abs(c.residuals(st.positions)) / c.rest_lengths
    return float(r[c.kind == STRETCH].max()), st, g, top


def momentum_drift(frames=20, seed=0):
    """Largest per-frame change of linear momentum for a free, gravity-free cloth."""
    g = grid(10, 10, 0.5)
    rng = np.random.default_rng(seed)
    x = g.vertices + rng.normal(scale=0.02, size=g.vertices.shape)
    c = build_constraints(g, 1e-6, 1e-3)
    st = initial_state(g)
    st = SimState(x, rng.normal(scale=0.5, size=x.shape), st.inverse_masses)
    p = SimParams(gravity=(0, 0, 0), substeps=10, damping=0)
    drift = 0.0
    for _ in range(frames):
        nxt = step(st, c, None, p)
        drift = max(drift, float(np.abs(nxt.momentum() - st.momentum()).max()))
        st = nxt
    return drift


def pinned_stay(frames=30):
    g, top = vertical_strip(10)
    c = build_constraints(g)
    st = initial_state(g, top)
    for _ in range(frames):
        st = step(st, c, None, SimParams())
    return np.array_equal(st.positions[top], g.vertices[top])


def energy_oracle_deviation(frames=300, ks=0.05, kb=1.0, n=20, size=0.5):
    """Run a pinned-top strip to rest and compare with a direct energy minimizer.

    Returns the max vertex distance between the two equilibria relative to
    the strip length.
    """
    g, top = vertical_strip(n, size)
    c = build_constraints(g, ks, kb)
    st = initial_state(g, top)
    p = SimParams(substeps=20, iterations=1, damping=0.01)
    for _ in range(frames):
        st = step(st, c, None, p)
    m = particle_masses(g)
    free = np.ones(g.n_vertices, bool)
    free[top] = False
    k = 1.0 / c.compliance
    a, b = c.pairs.T
    x0 = g.vertices.copy()
    grav = -p.gravity[2]

    def energy(z):
        x = x0.copy()
        x[free] = z.reshape(-1, 3)
        d = x[a] - x[b]
        ln = np.linalg.norm(d, axis=1)
        e = ln - c.rest_lengths
        val = 0.5 * np.sum(k * e * e) + grav * np.sum(m * x[:, 2])
        gr = np.zeros_like(x)
        f = (k * e / ln)[:, None] * d
        np.add.at(gr, a, f)
        np.add.at(gr, b, -f)
        gr[:, 2] += grav * m
        return val, gr[free].ravel()

    res = minimize(energy, x0[free].ravel(), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=20000, gtol=1e-12, ftol=1e-16))
    xo = x0.copy()
    xo[free] = res.x.reshape(-1, 3)
    return float(np.linalg.norm(xo - st.positions, axis=1).max() / size)


def sphere_drape(frames=150, n=30):
    """Cloth dropped onto a sphere; returns (state, body)."""
    cloth = grid(n, n, 1.2, z=0.55, origin=(-0.6, -0.6))
    body = icosphere(3, 0.5)
    c = build_constraints(cloth)
    st = initial_state(cloth)
    col = CollisionBody(body)
    for _ in range(frames):
        st = step(st, c, col, SimParams())
    return st, body


def penetration(points, body: TriMesh) -> float:
    """Depth inside a closed convex body: exact via face planes, distance-checked."""
    sd = convex_signed_distance(points, body)
    inside = sd < 0
    if not inside.any():
        return 0.0
    # inside a convex body the plane bound equals the point-to-mesh distance
    dist = point_mesh_distance(points[inside], body.vertices, body.triangles)
    assert np.allclose(dist, -sd[inside], atol=1e-9)
    return float(dist.max())
