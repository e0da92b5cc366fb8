"""Garment registration: boundary matching, biharmonic and harmonic
interpolation of displacements, non-rigid ICP and RANSAC pruning of
sparse UV correspondences.

Laplacians are positive semi-definite (L = D - W) with clamped cotangent
weights, so harmonic solutions obey the discrete maximum principle.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from .bvh import BVH
from .mesh import MeshError, TriMesh, compute_vertex_normals, cotangent_weights, lumped_mass
from .sim import Attachments

SOLVE_TOL = 1e-8


class RegistrationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Laplacians and constrained solves


def graph_laplacian(n: int, edges: np.ndarray, weights: np.ndarray | None = None) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)
    i, j = edges[:, 0], edges[:, 1]
    adj = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    return (sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj).tocsr()


def path_laplacian(n: int) -> sp.csr_matrix:
    """Unit-weight Laplacian of the path 0 - 1 - ... - (n-1)."""
    e = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return graph_laplacian(n, e)


def cotangent_laplacian(mesh: TriMesh, clamp: bool = True) -> sp.csr_matrix:
    edges, w = cotangent_weights(mesh, clamp)
    return graph_laplacian(mesh.n_vertices, edges, w)


def _components(lap: sp.spmatrix) -> tuple[int, np.ndarray]:
    adj = lap.copy().tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    return connected_components(adj, directed=False)


def _check_components(lap, constrained: np.ndarray) -> None:
    n_comp, labels = _components(lap)
    hit = np.zeros(n_comp, bool)
    hit[labels[constrained]] = True
    if not hit.all():
        bad = np.flatnonzero(~hit)
        desc = ", ".join(f"component {c} ({np.sum(labels == c)} vertices, e.g. vertex "
                         f"{np.flatnonzero(labels == c)[0]})" for c in bad[:5])
        raise RegistrationError(f"no constraint on {len(bad)} connected component(s): {desc}")


def constrained_quadratic_solve(q: sp.spmatrix, indices, values) -> np.ndarray:
    """Minimize x^T Q x per column with x[indices] = values fixed.

    Returns the full solution; raises if the free system's relative
    residual exceeds the solver tolerance.
    """
    q = sp.csr_matrix(q)
    n = q.shape[0]
    idx = np.asarray(indices, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)
    vals2 = vals.reshape(len(idx), -1)
    if len(idx) == 0:
        raise RegistrationError("at least one constraint is required")
    if len(np.unique(idx)) != len(idx):
        raise RegistrationError("duplicate constrained vertex")
    if idx.min() < 0 or idx.max() >= n:
        raise RegistrationError("constrained vertex index out of range")
    free = np.setdiff1d(np.arange(n), idx)
    x = np.zeros((n, vals2.shape[1]))
    x[idx] = vals2
    if len(free):
        qff = q[free][:, free].tocsc()
        rhs = -(q[free][:, idx] @ vals2)
        lu = spla.splu(qff)
        sol = lu.solve(rhs)
        # one step of iterative refinement keeps ill-conditioned bi-Laplacians accurate
        sol += lu.solve(rhs - qff @ sol)
        res = np.linalg.norm(qff @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if np.linalg.norm(rhs) > 0 and res > SOLVE_TOL:
            raise RegistrationError(f"sparse solve residual {res:.2e} exceeds tolerance")
        x[free] = sol
    return x.reshape((n,) + vals.shape[1:])


def biharmonic_matrix(lap: sp.spmatrix, mass: np.ndarray | None = None) -> sp.csr_matrix:
    m_inv = sp.identity(lap.shape[0]) if mass is None else sp.diags(1.0 / np.asarray(mass))
    return (lap.T @ m_inv @ lap).tocsr()


def biharmonic_solve(lap, indices, values, mass=None) -> np.ndarray:
    _check_components(lap, np.asarray(indices, dtype=np.int64))
    return constrained_quadratic_solve(biharmonic_matrix(lap, mass), indices, values)


def harmonic_solve(lap, indices, values) -> np.ndarray:
    _check_components(lap, np.asarray(indices, dtype=np.int64))
    return constrained_quadratic_solve(lap, indices, values)


# ---------------------------------------------------------------------------
# boundary correspondence


@dataclass
class BoundaryCorrespondence:
    template_indices: np.ndarray
    target_positions: np.ndarray
    loop_pairs: list = field(default_factory=list)   # (template loop, target loop)

    def __post_init__(self):
        self.template_indices = np.asarray(self.template_indices, dtype=np.int64)
        self.target_positions = np.asarray(self.target_positions, dtype=np.float64).reshape(-1, 3)
        if len(np.unique(self.template_indices)) != len(self.template_indices):
            raise RegistrationError("template boundary vertex used twice")
        if len(self.target_positions) != len(self.template_indices):
            raise RegistrationError("indices and target positions differ in length")

    def displacements(self, template: TriMesh) -> np.ndarray:
        return self.target_positions - template.vertices[self.template_indices]


def match_boundaries(template: TriMesh, target_loops, inner_body: TriMesh,
                     template_body: TriMesh | None = None) -> BoundaryCorrespondence:
    """Associate target boundary points with template boundary vertices.

    ``target_loops`` is a list of (k, 3) point arrays, one per garment
    opening. ``inner_body`` is the tracked body at the target frame and
    ``template_body`` the same body (same topology) at the template frame,
    defaulting to ``inner_body``. Each template boundary vertex is carried
    to the target frame by its closest body triangle (barycentric point plus
    offset in the triangle's local frame). Loops are paired by the distance
    of the carried and target loop centroids, and points within a pair by a
    one-to-one assignment minimizing total distance.
    """
    loops_t = template.boundary_loops
    loops_x = [np.asarray(l, dtype=np.float64).reshape(-1, 3) for l in target_loops]
    if len(loops_t) != len(loops_x):
        raise RegistrationError(f"template has {len(loops_t)} boundary loops, expected the same "
                                f"count in the target but got {len(loops_x)}")
    body_ref = template_body if template_body is not None else inner_body
    if body_ref.n_vertices != inner_body.n_vertices or not np.array_equal(
            body_ref.triangles, inner_body.triangles):
        raise RegistrationError("template body and inner body differ in topology")
    carried = []
    for loop in loops_t:
        att = Attachments.fit(loop, template.vertices, body_ref)
        carried.append(att.place(inner_body.vertices, inner_body.triangles))
    cost = np.array([[np.linalg.norm(c.mean(0) - x.mean(0)) for x in loops_x] for c in carried])
    rows, cols = linear_sum_assignment(cost)
    idx_out, pos_out, pairs = [], [], []
    for a, b in zip(rows, cols):
        verts = np.asarray(loops_t[a])
        gap = np.linalg.norm(loops_x[b][:, None, :] - carried[a][None, :, :], axis=2)
        pts, tv = linear_sum_assignment(gap)
        order = np.argsort(pts, kind="stable")
        idx_out.append(verts[tv[order]])
        pos_out.append(loops_x[b][pts[order]])
        pairs.append((int(a), int(b)))
    return BoundaryCorrespondence(np.concatenate(idx_out), np.concatenate(pos_out), pairs)


def biharmonic_deform(mesh: TriMesh, constraints: BoundaryCorrespondence,
                      clamp: bool = True) -> np.ndarray:
    """Displacement field minimizing the cotangent bi-Laplacian energy."""
    d = constraints.displacements(mesh)
    lap = cotangent_laplacian(mesh, clamp)
    return biharmonic_solve(lap, constraints.template_indices, d, lumped_mass(mesh))


# ---------------------------------------------------------------------------
# sparse correspondences


@dataclass
class SparseCorrespondenceSet:
    indices: np.ndarray
    targets: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.targets) != len(self.indices):
            raise RegistrationError("indices and targets differ in length")
        if self.confidence is None:
            self.confidence = np.ones(len(self.indices))
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if ((self.confidence < 0) | (self.confidence > 1)).any():
            raise RegistrationError("confidence must lie in [0, 1]")
        if (self.indices < 0).any():
            raise RegistrationError("negative vertex index")

    def __len__(self):
        return len(self.indices)

    def subset(self, keep: np.ndarray) -> "SparseCorrespondenceSet":
        return SparseCorrespondenceSet(self.indices[keep], self.targets[keep],
                                       self.confidence[keep])


def _similarity_from(z1, z2, w1, w2):
    a = (w2 - w1) / (z2 - z1)
    return a, w1 - a * z1


def _similarity_lsq(z, w):
    # least-squares complex affine map w ~ a z + b
    zc, wc = z - z.mean(), w - w.mean()
    denom = np.vdot(zc, zc).real
    a = np.vdot(zc, wc) / denom if denom > 0 else 1.0 + 0j
    return a, w.mean() - a * z.mean()


@dataclass
class RansacResult:
    inliers: np.ndarray
    scale: float
    rotation: float
    translation: np.ndarray


def ransac_similarity(src: np.ndarray, dst: np.ndarray, threshold: float = 0.01,
                      iterations: int = 500, seed: int = 0) -> RansacResult:
    """2D similarity RANSAC on point pairs; returns the consensus inlier mask."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    n = len(src)
    if n < 4:
        raise RegistrationError(f"RANSAC needs at least 4 correspondences, got {n}")
    z = src[:, 0] + 1j * src[:, 1]
    w = dst[:, 0] + 1j * dst[:, 1]
    rng = np.random.default_rng(seed)
    best, best_count = None, -1
    for _ in range(int(iterations)):
        i, j = rng.choice(n, size=2, replace=False)
        if z[i] == z[j]:
            continue
        a, b = _similarity_from(z[i], z[j], w[i], w[j])
        inl = np.abs(a * z + b - w) < threshold
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
    if best is None:
        raise RegistrationError("all sampled pairs were degenerate")
    a, b = _similarity_lsq(z[best], w[best])
    refit = np.abs(a * z + b - w) < threshold
    if refit.sum() >= best_count:
        best = refit
        a, b = _similarity_lsq(z[best], w[best])
    return RansacResult(best, float(abs(a)), float(np.angle(a)), np.array([b.real, b.imag]))


def prune_ransac(correspondences: SparseCorrespondenceSet, template_uvs: np.ndarray,
                 threshold: float = 0.01, iterations: int = 500,
                 seed: int = 0) -> SparseCorrespondenceSet:
    """Keep the correspondences consistent with one UV similarity transform."""
    if len(correspondences) < 4:
        raise RegistrationError(f"RANSAC needs at least 4 correspondences, "
                                f"got {len(correspondences)}")
    uv = np.asarray(template_uvs, float)
    if correspondences.indices.max() >= len(uv):
        raise RegistrationError("correspondence references a vertex without UV")
    res = ransac_similarity(uv[correspondences.indices], correspondences.targets[:, :2],
                            threshold, iterations, seed)
    return correspondences.subset(res.inliers)


def densify_laplace(mesh: TriMesh, sparse: SparseCorrespondenceSet, values=None,
                    clamp: bool = True) -> np.ndarray:
    """Harmonic interpolation of per-vertex constraint values over the mesh."""
    vals = sparse.targets if values is None else values
    if sparse.indices.max(initial=-1) >= mesh.n_vertices:
        raise RegistrationError("constraint index out of range")
    return harmonic_solve(cotangent_laplacian(mesh, clamp), sparse.indices, vals)


# ---------------------------------------------------------------------------
# non-rigid ICP


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    distance_cutoff: float = 0.1
    normal_cutoff_deg: float = 60.0
    smoothness: float = 1e-3
    point_weight: float = 0.1
    convergence: float = 1e-7
    max_backtracks: int = 12
    # stiffness annealing: smoothness runs from stiffness_start down to smoothness
    stiffness_start: float = 10.0
    stiffness_stages: int = 4

    def __post_init__(self):
        for name in ("max_iterations", "distance_cutoff", "normal_cutoff_deg", "smoothness",
                     "convergence", "stiffness_start", "stiffness_stages"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.normal_cutoff_deg > 90:
            raise ValueError("normal cutoff must be <= 90 degrees")
        if self.point_weight < 0:
            raise ValueError("point_weight must be >= 0")


    def schedule(self) -> np.ndarray:
        if self.stiffness_stages == 1 or self.stiffness_start <= self.smoothness:
            return np.array([self.smoothness])
        return np.geomspace(self.stiffness_start, self.smoothness, int(self.stiffness_stages))


@dataclass
class IcpResult:
    displacement: np.ndarray
    iterations: int
    converged: bool
    objective: list          # per stage: objective after each accepted iteration
    n_valid: list


class _Target:
    def __init__(self, mesh: TriMesh):
        self.bvh = BVH(mesh.vertices, mesh.triangles)
        fn = mesh.face_normals_raw
        ln = np.linalg.norm(fn, axis=1, keepdims=True)
        self.normals = fn / np.where(ln > 0, ln, 1.0)

    def correspond(self, x, x_normals, params: IcpParams):
        dist, tri, q = self.bvh.closest_points(x, params.distance_cutoff)
        near = (tri >= 0) & (dist < params.distance_cutoff)
        n = np.zeros_like(x)
        n[near] = self.normals[tri[near]]
        compatible = np.abs((n * x_normals).sum(1)) >= np.cos(np.radians(params.normal_cutoff_deg))
        valid = near & compatible
        return valid, q, n, {"total": len(x), "too_far": int((~near).sum()),
                             "normal_rejected": int((near & ~compatible).sum())}


def _objective(template, lap, d, target, params, smoothness):
    x = template.vertices + d
    nx = compute_vertex_normals(template.with_vertices(x))
    valid, q, n, stats = target.correspond(x, nx, params)
    r = x - q
    plane = (r * n).sum(1) ** 2
    point = (r * r).sum(1)
    data = np.where(valid, plane + params.point_weight * point,
                    (1 + params.point_weight) * params.distance_cutoff ** 2)
    smooth = float(np.einsum("ij,ij->", d, lap @ d))
    return float(data.sum()) + smoothness * smooth, (valid, q, n, stats)


def nonrigid_icp(template: TriMesh, target: TriMesh, init: np.ndarray | None = None,
                 params: IcpParams = IcpParams()) -> IcpResult:
    """Point-to-plane ICP on per-vertex displacements with Dirichlet smoothing.

    Runs stages of decreasing smoothness weight. Within a stage each
    iteration solves the linearized problem for fixed correspondences, then
    backtracks along the step until the truncated objective (with
    re-estimated correspondences) does not increase.
    """
    n = template.n_vertices
    d = np.zeros((n, 3)) if init is None else np.array(init, dtype=np.float64).reshape(n, 3)
    tgt = _Target(target)
    lap = cotangent_laplacian(template)
    lap3 = sp.kron(lap, sp.identity(3), format="csr")
    rows = np.repeat(np.arange(3 * n).reshape(n, 3), 3, axis=1).ravel()
    cols = np.tile(np.arange(3 * n).reshape(n, 3), (1, 3)).ravel()
    eye = sp.identity(3 * n, format="csr")
    history, n_valid = [], []
    total = 0
    converged = False
    for lam in params.schedule():
        f, corr = _objective(template, lap, d, tgt, params, lam)
        stage = [f]
        history.append(stage)
        converged = False
        for _ in range(params.max_iterations):
            valid, q, nrm, stats = corr
            if not valid.any():
                raise RegistrationError(f"no valid correspondences at iteration {total + 1}: "
                                        f"{stats}")
            total += 1
            n_valid.append(int(valid.sum()))
            # per-vertex 3x3 blocks n n^T + mu I on valid vertices
            blocks = np.einsum("ki,kj->kij", nrm, nrm) + params.point_weight * np.eye(3)
            blocks[~valid] = 0.0
            rhs = np.einsum("kij,kj->ki", blocks, q - template.vertices)
            a = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(3 * n, 3 * n))
            # proximal term keeps vertices without correspondences near the current field
            eps = 1e-9
            new = spla.spsolve((a + lam * lap3 + eps * eye).tocsc(),
                               rhs.ravel() + eps * d.ravel()).reshape(n, 3)
            step = new - d
            beta, accepted = 1.0, False
            for _ in range(params.max_backtracks):
                cand = d + beta * step
                f_new, corr_new = _objective(template, lap, cand, tgt, params, lam)
                if f_new <= f:
                    accepted = True
                    break
                beta *= 0.5
            if not accepted:
                converged = True
                break
            motion = np.sqrt(np.mean(np.sum((beta * step) ** 2, axis=1)))
            d, f, corr = cand, f_new, corr_new
            stage.append(f)
            if motion < params.convergence:
                converged = True
                break
        if f <= 0.0:
            # exact fit: the objective is nonnegative, later stages cannot improve it
            break
    return IcpResult(d, total, converged, history, n_valid)


# ---------------------------------------------------------------------------
# file formats


def read_correspondences_csv(path: str | os.PathLike) -> SparseCorrespondenceSet:
    """CSV rows: template_vertex_id, target_u, target_v, confidence (header optional)."""
    idx, tgt, conf = [], [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                i = int(row[0])
            except ValueError:
                continue   # header
            idx.append(i)
            tgt.append((float(row[1]), float(row[2])))
            conf.append(float(row[3]) if len(row) > 3 else 1.0)
    return SparseCorrespondenceSet(np.array(idx, dtype=np.int64), np.array(tgt).reshape(-1, 2),
                                   np.array(conf))


def write_correspondences_csv(path: str | os.PathLike, corr: SparseCorrespondenceSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["template_vertex_id", "target_u", "target_v", "confidence"])
        for i, t, c in zip(corr.indices, corr.targets, corr.confidence):
            w.writerow([int(i), repr(float(t[0])), repr(float(t[1])), repr(float(c))])


def read_loops_json(path: str | os.PathLike) -> list[np.ndarray]:
    data = json.loads(open(path).read())
    loops = data["loops"] if isinstance(data, dict) else data
    return [np.asarray(l, dtype=np.int64) for l in loops]


def write_loops_json(path: str | os.PathLike, loops) -> None:
    with open(path, "w") as fh:
        json.dump({"loops": [list(map(int, l)) for l in loops]}, fh)


def loop_points(mesh: TriMesh, loops) -> list[np.ndarray]:
    for l in loops:
        if np.max(l) >= mesh.n_vertices:
            raise MeshError("boundary loop index out of range")
    return [mesh.vertices[np.asarray(l)] for l in loops]
