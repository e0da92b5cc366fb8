"""Registration scenarios shared by the unit and acceptance tests."""
import numpy as np
import scipy.sparse as sp

from drape.registration import (BoundaryCorrespondence, IcpParams, SparseCorrespondenceSet,
                                biharmonic_deform, cotangent_laplacian, densify_laplace,
                                biharmonic_solve, harmonic_solve, nonrigid_icp, path_laplacian,
                                prune_ransac, ransac_similarity)
from drape.scenes import grid

from oracles import point_mesh_distance


def wavy(n=20, amp=0.1):
    m = grid(n, n, 1.0, origin=(-0.5, -0.5))
    x = m.vertices
    return m.with_vertices(np.c_[x[:, :2], amp * np.sin(2 * np.pi * x[:, 0])
                                 * np.cos(2 * np.pi * x[:, 1])])


def boundary_of(mesh):
    return np.concatenate(mesh.boundary_loops)


def constant_reproduction_error(t=(0.03, -0.02, 0.05)):
    m = wavy(12)
    b = boundary_of(m)
    corr = BoundaryCorrespondence(b, m.vertices[b] + np.asarray(t))
    bi = biharmonic_deform(m, corr)
    rng = np.random.default_rng(0)
    idx = rng.choice(m.n_vertices, 10, replace=False)
    harm = densify_laplace(m, SparseCorrespondenceSet(idx, np.tile(t, (10, 1))))
    return float(max(np.abs(bi - t).max(), np.abs(harm - t).max()))


def dense_solve(q, idx, vals):
    q = q.toarray()
    n = len(q)
    free = np.setdiff1d(np.arange(n), idx)
    x = np.zeros((n,) + np.shape(vals)[1:])
    x[idx] = vals
    x[free] = np.linalg.solve(q[np.ix_(free, free)], -q[np.ix_(free, idx)] @ np.asarray(vals))
    return x


def path_oracle_error(n=30):
    lap = path_laplacian(n)
    idx = np.array([0, n - 1])
    vals = np.array([0.0, 1.0])
    bi = biharmonic_solve(lap, idx, vals)
    ref_bi = dense_solve((lap.T @ lap).tocsr(), idx, vals)
    harm = harmonic_solve(lap, idx, vals)
    ramp = np.linspace(0, 1, n)
    return float(max(np.abs(bi - ref_bi).max(), np.abs(harm - ramp).max()))


def max_principle_trial(seed):
    """Random constraints on a jittered grid: (violation, dense-oracle error)."""
    rng = np.random.default_rng(seed)
    m = grid(12, 12, 1.0)
    jit = rng.uniform(-0.02, 0.02, (m.n_vertices, 2))
    m = m.with_vertices(m.vertices + np.c_[jit, np.zeros(m.n_vertices)])
    k = int(rng.integers(3, 15))
    idx = rng.choice(m.n_vertices, k, replace=False)
    vals = rng.uniform(-1, 1, k)
    sol = densify_laplace(m, SparseCorrespondenceSet(idx, vals[:, None]), vals)
    lo, hi = vals.min(), vals.max()
    viol = max(0.0, float(lo - sol.min()), float(sol.max() - hi))
    ref = dense_solve(cotangent_laplacian(m), idx, vals)
    return viol, float(np.abs(sol - ref).max())


def icp_self():
    m = wavy()
    return nonrigid_icp(m, m)


def icp_translation(t=(0.01, 0.0, 0.0)):
    m = wavy()
    r = nonrigid_icp(m, m.with_vertices(m.vertices + np.asarray(t)))
    inner = (np.abs(m.vertices[:, :2]) < 0.4).all(1)
    return float(np.abs(r.displacement[inner] - np.asarray(t)).max())


def icp_sinusoid(amp=0.05):
    """Flat template registered to a sinusoidally bent target; RMS point-to-mesh distance."""
    m = grid(20, 20, 1.0, origin=(-0.5, -0.5))
    x = m.vertices
    target = m.with_vertices(np.c_[x[:, :2], amp * np.sin(2 * np.pi * x[:, 0])])
    r = nonrigid_icp(m, target)
    d = point_mesh_distance(x + r.displacement, target.vertices, target.triangles)
    return float(np.sqrt(np.mean(d ** 2)))


def similarity(rng):
    s = rng.uniform(0.5, 1.5)
    a = rng.uniform(-np.pi, np.pi)
    return s * np.exp(1j * a), complex(*rng.uniform(-0.2, 0.2, 2))


def planted_outlier(seed, n=20, threshold=0.01):
    """Template UVs, correspondences with one gross outlier, and the outlier's index."""
    rng = np.random.default_rng(seed)
    uv = rng.uniform(0, 1, (50, 2))
    idx = rng.choice(50, n + 1, replace=False)
    a, b = similarity(rng)
    z = uv[idx, 0] + 1j * uv[idx, 1]
    w = a * z + b
    bad = int(rng.integers(n + 1))
    direction = np.exp(1j * rng.uniform(0, 2 * np.pi))
    w[bad] += 100 * threshold * direction
    return uv, SparseCorrespondenceSet(idx, np.c_[w.real, w.imag]), bad


def exhaustive_consensus(src, dst, threshold):
    """Largest inlier set over all 2-point similarity hypotheses."""
    z = src[:, 0] + 1j * src[:, 1]
    w = dst[:, 0] + 1j * dst[:, 1]
    best = None
    for i in range(len(z)):
        for j in range(i + 1, len(z)):
            a = (w[j] - w[i]) / (z[j] - z[i])
            inl = np.abs(a * z + w[i] - a * z[i] - w) < threshold
            if best is None or inl.sum() > best.sum():
                best = inl
    return best


def ransac_trial(seed, threshold=0.01):
    uv, corr, bad = planted_outlier(seed, threshold=threshold)
    kept = prune_ransac(corr, uv, threshold, 500, seed)
    expect = np.delete(corr.indices, bad)
    oracle = exhaustive_consensus(uv[corr.indices], corr.targets, threshold)
    return (np.array_equal(kept.indices, expect)
            and np.array_equal(oracle, ~np.isin(corr.indices, corr.indices[bad])))
