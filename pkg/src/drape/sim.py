"""XPBD mass-spring cloth over an animated, kinematic collision body.

Each frame is split into substeps. A substep predicts positions under
gravity, projects distance constraints with compliance-scaled Lagrange
multipliers (Gauss-Seidel in a fixed graph-coloring order), projects
particles out of the body's thickness band and derives velocities from the
position change.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .bvh import BVH, closest_point
from .diagnostics import Diagnostics
from .mesh import MeshError, TriMesh, lumped_mass

log = logging.getLogger(__name__)

STRETCH, BEND = 0, 1


class SimulationError(RuntimeError):
    pass


@dataclass
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    inverse_masses: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.array(self.velocities, dtype=np.float64).reshape(-1, 3)
        self.inverse_masses = np.array(self.inverse_masses, dtype=np.float64).reshape(-1)
        n = len(self.positions)
        if len(self.velocities) != n or len(self.inverse_masses) != n:
            raise ValueError("positions, velocities and inverse masses differ in length")
        if (self.inverse_masses < 0).any():
            raise ValueError("inverse masses must be >= 0")

    def copy(self) -> "SimState":
        return SimState(self.positions, self.velocities, self.inverse_masses)

    def momentum(self) -> np.ndarray:
        free = self.inverse_masses > 0
        return (self.velocities[free] / self.inverse_masses[free, None]).sum(axis=0)


@dataclass
class ConstraintSet:
    """Distance constraints (stretch along edges, bend across edges)."""

    pairs: np.ndarray
    rest_lengths: np.ndarray
    compliance: np.ndarray
    kind: np.ndarray
    lambdas: np.ndarray = field(default=None, repr=False)
    order: np.ndarray = field(default=None, repr=False)
    color_offsets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.pairs = np.ascontiguousarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.rest_lengths = np.ascontiguousarray(self.rest_lengths, dtype=np.float64)
        self.compliance = np.ascontiguousarray(self.compliance, dtype=np.float64)
        self.kind = np.ascontiguousarray(self.kind, dtype=np.int8)
        if (self.rest_lengths <= 0).any():
            raise ValueError("rest lengths must be positive")
        if (self.compliance < 0).any():
            raise ValueError("compliance must be >= 0")
        self.lambdas = np.zeros(len(self.pairs))
        if self.order is None:
            n = int(self.pairs.max()) + 1 if len(self.pairs) else 0
            self.order, self.color_offsets = color_constraints(self.pairs, n)

    def __len__(self):
        return len(self.pairs)

    @property
    def n_stretch(self) -> int:
        return int((self.kind == STRETCH).sum())

    @property
    def n_bend(self) -> int:
        return int((self.kind == BEND).sum())

    @property
    def n_colors(self) -> int:
        return len(self.color_offsets) - 1

    def residuals(self, positions: np.ndarray) -> np.ndarray:
        """Constraint values C = |x_a - x_b| - rest."""
        d = positions[self.pairs[:, 0]] - positions[self.pairs[:, 1]]
        return np.linalg.norm(d, axis=1) - self.rest_lengths


@nb.njit(cache=True)
def _greedy_colors(pairs, n_particles):
    colors = np.empty(pairs.shape[0], np.int64)
    used = np.zeros((n_particles, 4), np.uint64)
    for c in range(pairs.shape[0]):
        a, b = pairs[c, 0], pairs[c, 1]
        chosen = -1
        for word in range(4):
            free = ~(used[a, word] | used[b, word])
            if free != 0:
                bit = 0
                while (free >> np.uint64(bit)) & np.uint64(1) == 0:
                    bit += 1
                chosen = word * 64 + bit
                m = np.uint64(1) << np.uint64(bit)
                used[a, word] |= m
                used[b, word] |= m
                break
        if chosen < 0:
            return colors, c
        colors[c] = chosen
    return colors, -1


def color_constraints(pairs: np.ndarray, n_particles: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy coloring so no two constraints of one color share a particle.

    Returns the processing order (by color, then index) and color offsets.
    """
    if len(pairs) == 0:
        return np.zeros(0, np.int64), np.zeros(1, np.int64)
    colors, failed = _greedy_colors(pairs, n_particles)
    if failed >= 0:
        raise SimulationError(f"particle degree too high to color constraint {failed}")
    order = np.argsort(colors, kind="stable")
    offsets = np.searchsorted(colors[order], np.arange(colors.max() + 2))
    return order.astype(np.int64), offsets.astype(np.int64)


def build_constraints(garment: TriMesh, stretch_compliance: float = 1e-7,
                      bend_compliance: float = 1e-3) -> ConstraintSet:
    """One stretch constraint per unique edge, one bend per interior edge.

    The bend constraint joins the two vertices opposite an interior edge.
    """
    for edge, faces in garment.edge_faces.items():
        if len(faces) > 2:
            raise MeshError(f"non-manifold edge {edge} is shared by {len(faces)} triangles")
    edges = garment.edges
    bend = set()
    tri = garment.triangles
    for (i, j), faces in sorted(garment.edge_faces.items()):
        if len(faces) != 2:
            continue
        o = [int(next(v for v in tri[f] if v != i and v != j)) for f in faces]
        if o[0] == o[1]:
            continue
        bend.add((min(o), max(o)))
    edge_set = {tuple(e) for e in edges.tolist()}
    bend_pairs = np.array(sorted(b for b in bend if b not in edge_set), dtype=np.int64).reshape(-1, 2)
    pairs = np.vstack([edges, bend_pairs])
    x = garment.vertices
    rest = np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1)
    if (rest <= 0).any():
        k = int(np.flatnonzero(rest <= 0)[0])
        raise MeshError(f"zero-length constraint between vertices {tuple(pairs[k])}")
    kind = np.r_[np.full(len(edges), STRETCH), np.full(len(bend_pairs), BEND)]
    comp = np.where(kind == STRETCH, stretch_compliance, bend_compliance)
    return ConstraintSet(pairs, rest, comp, kind)


def scale_rest_lengths(constraints: ConstraintSet, s: float) -> ConstraintSet:
    """Garment resize handle: rest lengths times ``s``; topology unchanged."""
    s = float(s)
    if not np.isfinite(s) or s <= 0:
        raise ValueError(f"scale must be positive and finite, got {s}")
    return ConstraintSet(constraints.pairs.copy(), constraints.rest_lengths * s,
                         constraints.compliance.copy(), constraints.kind.copy(),
                         order=constraints.order, color_offsets=constraints.color_offsets)


@dataclass
class SimParams:
    gravity: tuple = (0.0, 0.0, -9.81)
    dt: float = 1.0 / 30.0
    substeps: int = 20
    iterations: int = 1
    damping: float = 0.001

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1 or self.iterations < 1:
            raise ValueError("substeps and iterations must be >= 1")
        if not 0 <= self.damping <= 1:
            raise ValueError("damping must lie in [0, 1]")


@dataclass
class CollisionBody:
    """Kinematic body surface with a BVH; ``previous`` enables substep interpolation."""

    mesh: TriMesh
    thickness: float = 0.005
    friction: float = 0.3
    rescue_depth: float = 0.02
    bvh: BVH = field(default=None, repr=False)
    previous: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError("collision thickness must be positive")
        if not 0 <= self.friction <= 1:
            raise ValueError("friction must lie in [0, 1]")
        if self.bvh is None:
            self.bvh = BVH(self.mesh.vertices, self.mesh.triangles)

    def advance(self, mesh: TriMesh) -> "CollisionBody":
        """Next frame's body; the BVH is refit, not rebuilt."""
        if mesh.n_vertices != self.mesh.n_vertices or not np.array_equal(
                mesh.triangles, self.mesh.triangles):
            raise SimulationError("body topology changed between frames")
        self.bvh.refit(mesh.vertices)
        moved = not np.array_equal(mesh.vertices, self.mesh.vertices)
        return replace(self, mesh=mesh, previous=self.mesh.vertices if moved else None)


@nb.njit(cache=True)
def _face_normal(pos, tris, t):
    a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
    ux, uy, uz = pos[b, 0] - pos[a, 0], pos[b, 1] - pos[a, 1], pos[b, 2] - pos[a, 2]
    vx, vy, vz = pos[c, 0] - pos[a, 0], pos[c, 1] - pos[a, 1], pos[c, 2] - pos[a, 2]
    nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
    ln = np.sqrt(nx * nx + ny * ny + nz * nz)
    if ln == 0.0:
        return 0.0, 0.0, 1.0
    return nx / ln, ny / ln, nz / ln


@nb.njit(cache=True)
def _project_constraints(p, w, pairs, rest, alpha_tilde, order, offsets, lam):
    for col in range(offsets.shape[0] - 1):
        for k in range(offsets[col], offsets[col + 1]):
            c = order[k]
            a, b = pairs[c, 0], pairs[c, 1]
            wsum = w[a] + w[b]
            if wsum == 0.0:
                continue
            dx = p[a, 0] - p[b, 0]
            dy = p[a, 1] - p[b, 1]
            dz = p[a, 2] - p[b, 2]
            ln = np.sqrt(dx * dx + dy * dy + dz * dz)
            if ln < 1e-12:
                continue
            C = ln - rest[c]
            at = alpha_tilde[c]
            dlam = (-C - at * lam[c]) / (wsum + at)
            lam[c] += dlam
            s = dlam / ln
            p[a, 0] += w[a] * s * dx
            p[a, 1] += w[a] * s * dy
            p[a, 2] += w[a] * s * dz
            p[b, 0] -= w[b] * s * dx
            p[b, 1] -= w[b] * s * dy
            p[b, 2] -= w[b] * s * dz


@nb.njit(cache=True)
def _collide(p, x_prev, w, bpos, btris, prims, lo, hi, left, right, start, count, thickness,
             friction, rescue_depth, deep_check, box_lo, box_hi):
    """Returns (contacts, rescues)."""
    band = thickness + rescue_depth
    band2 = band * band
    contacts = 0
    rescues = 0
    for i in range(p.shape[0]):
        if w[i] == 0.0:
            continue
        px, py, pz = p[i, 0], p[i, 1], p[i, 2]
        d2, t, qx, qy, qz = closest_point(bpos, btris, prims, lo, hi, left, right, start,
                                          count, px, py, pz, band2)
        deep = False
        if t < 0:
            if not deep_check:
                continue
            if (px < box_lo[0] or py < box_lo[1] or pz < box_lo[2] or px > box_hi[0]
                    or py > box_hi[1] or pz > box_hi[2]):
                continue
            d2, t, qx, qy, qz = closest_point(bpos, btris, prims, lo, hi, left, right, start,
                                              count, px, py, pz, np.inf)
            if t < 0:
                continue
            deep = True
        nx, ny, nz = _face_normal(bpos, btris, t)
        sd = (px - qx) * nx + (py - qy) * ny + (pz - qz) * nz
        if sd >= thickness:
            continue
        if deep and sd >= 0.0:
            continue
        contacts += 1
        if deep or sd < -rescue_depth:
            rescues += 1
            ex, ey, ez = qx + thickness * nx, qy + thickness * ny, qz + thickness * nz
        else:
            push = thickness - sd
            ex, ey, ez = px + push * nx, py + push * ny, pz + push * nz
        # friction scales the tangential part of this substep's motion
        mx, my, mz = ex - x_prev[i, 0], ey - x_prev[i, 1], ez - x_prev[i, 2]
        mn = mx * nx + my * ny + mz * nz
        tx, ty, tz = mx - mn * nx, my - mn * ny, mz - mn * nz
        p[i, 0] = ex - friction * tx
        p[i, 1] = ey - friction * ty
        p[i, 2] = ez - friction * tz
    return contacts, rescues


@nb.njit(cache=True)
def _predict(x, v, w, p, gx, gy, gz, h):
    for i in range(x.shape[0]):
        if w[i] > 0.0:
            v[i, 0] += gx * h
            v[i, 1] += gy * h
            v[i, 2] += gz * h
            p[i, 0] = x[i, 0] + v[i, 0] * h
            p[i, 1] = x[i, 1] + v[i, 1] * h
            p[i, 2] = x[i, 2] + v[i, 2] * h
        else:
            p[i, 0] = x[i, 0]
            p[i, 1] = x[i, 1]
            p[i, 2] = x[i, 2]


@nb.njit(cache=True)
def _finish(x, v, w, p, h, keep):
    bad = -1
    for i in range(x.shape[0]):
        if w[i] > 0.0:
            for k in range(3):
                v[i, k] = (p[i, k] - x[i, k]) / h * keep
                x[i, k] = p[i, k]
        for k in range(3):
            if not np.isfinite(x[i, k]) or not np.isfinite(v[i, k]):
                if bad < 0:
                    bad = i
    return bad


@dataclass
class Attachments:
    """Particles carried kinematically by body triangles.

    Each particle stores the barycentric coordinates of its closest body
    point and its offset from that point in the triangle's local frame, so
    the fitted configuration is reproduced exactly and follows the
    triangle's rotation as the body moves.
    """

    particles: np.ndarray
    triangles: np.ndarray
    barycentric: np.ndarray
    offsets: np.ndarray   # (K, 3) in (edge, normal x edge, normal) coordinates

    @classmethod
    def fit(cls, particles, positions: np.ndarray, body: TriMesh) -> "Attachments":
        idx = np.asarray(particles, dtype=np.int64)
        bvh = BVH(body.vertices, body.triangles)
        _, tri, q = bvh.closest_points(positions[idx])
        corners = body.vertices[body.triangles[tri]]
        bary = _barycentric(q, corners)
        frame = _local_frames(corners)
        off = np.einsum("kij,kj->ki", frame, positions[idx] - q)
        return cls(idx, tri, bary, off)

    def place(self, body_positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
        corners = body_positions[triangles[self.triangles]]
        base = np.einsum("kc,kcd->kd", self.barycentric, corners)
        return base + np.einsum("kij,ki->kj", _local_frames(corners), self.offsets)


def _unit_normals(corners: np.ndarray) -> np.ndarray:
    n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def _local_frames(corners: np.ndarray) -> np.ndarray:
    """Rows: unit first edge, normal x edge, unit normal; shape (K, 3, 3)."""
    n = _unit_normals(corners)
    e = corners[:, 1] - corners[:, 0]
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-300)
    return np.stack([e, np.cross(n, e), n], axis=1)


def _barycentric(q: np.ndarray, corners: np.ndarray) -> np.ndarray:
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    v0, v1, v2 = b - a, c - a, q - a
    d00 = np.sum(v0 * v0, 1)
    d01 = np.sum(v0 * v1, 1)
    d11 = np.sum(v1 * v1, 1)
    d20 = np.sum(v2 * v0, 1)
    d21 = np.sum(v2 * v1, 1)
    den = d00 * d11 - d01 * d01
    den = np.where(den == 0, 1.0, den)
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.stack([1 - v - w, v, w], axis=1)


def step(state: SimState, constraints: ConstraintSet, collider: CollisionBody | None,
         params: SimParams, diagnostics: Diagnostics | None = None,
         attachments: Attachments | None = None, frame: int = 0) -> SimState:
    """Advance one frame (``params.substeps`` substeps). Input state is not modified."""
    out = state.copy()
    x, v, w = out.positions, out.velocities, out.inverse_masses
    if attachments is not None:
        w = w.copy()
        w[attachments.particles] = 0.0
    h = params.dt / params.substeps
    alpha_tilde = constraints.compliance / (h * h)
    lam = constraints.lambdas
    p = np.empty_like(x)
    gx, gy, gz = (float(g) for g in params.gravity)
    keep = 1.0 - params.damping
    contacts = rescues = 0
    body_now = body_prev = None
    if collider is not None:
        body_now = collider.mesh.vertices
        body_prev = collider.previous if collider.previous is not None else body_now
        box_lo, box_hi = collider.mesh.bounds()
        box_lo = box_lo - collider.rescue_depth
        box_hi = box_hi + collider.rescue_depth
    for s in range(params.substeps):
        frac = (s + 1) / params.substeps
        if collider is not None and body_prev is not body_now:
            bpos = body_prev + frac * (body_now - body_prev)
            collider.bvh.refit(bpos)
        elif collider is not None:
            bpos = body_now
        if attachments is not None:
            if collider is None:
                raise SimulationError("attachments require a collision body")
            x_att = attachments.place(bpos, collider.mesh.triangles)
        _predict(x, v, w, p, gx, gy, gz, h)
        if attachments is not None:
            p[attachments.particles] = x_att
        lam[:] = 0.0
        for _ in range(params.iterations):
            _project_constraints(p, w, constraints.pairs, constraints.rest_lengths,
                                 alpha_tilde, constraints.order, constraints.color_offsets, lam)
        if collider is not None:
            c, r = _collide(p, x, w, *collider.bvh.arrays, collider.thickness,
                            collider.friction, collider.rescue_depth, s == 0, box_lo, box_hi)
            contacts += c
            rescues += r
        if attachments is not None:
            x[attachments.particles] = p[attachments.particles]
            v[attachments.particles] = 0.0
        bad = _finish(x, v, w, p, h, keep)
        if bad >= 0:
            raise SimulationError(f"non-finite state at particle {bad}, frame {frame}, substep {s}")
    if collider is not None and body_prev is not body_now:
        collider.bvh.refit(body_now)
    if diagnostics is not None:
        diagnostics.count("contacts", contacts)
        diagnostics.count("collision_rescues", rescues)
    return out


def resolve_collisions(state: SimState, collider: CollisionBody,
                       diagnostics: Diagnostics | None = None) -> SimState:
    """Project particles out of the body's thickness band (no dynamics)."""
    out = state.copy()
    p = out.positions.copy()
    lo, hi = collider.mesh.bounds()
    _, r = _collide(p, out.positions, out.inverse_masses, *collider.bvh.arrays,
                    collider.thickness, collider.friction, collider.rescue_depth, True,
                    lo - collider.rescue_depth, hi + collider.rescue_depth)
    out.positions = p
    if diagnostics is not None:
        diagnostics.count("collision_rescues", r)
    return out


def particle_masses(garment: TriMesh, areal_density: float = 0.2) -> np.ndarray:
    """Lumped per-particle masses (kg) from vertex areas and areal density (kg/m^2)."""
    m = lumped_mass(garment) * areal_density
    return np.maximum(m, 1e-9)


def initial_state(garment: TriMesh, pins=(), areal_density: float = 0.2) -> SimState:
    w = 1.0 / particle_masses(garment, areal_density)
    w[np.asarray(list(pins), dtype=np.int64)] = 0.0
    return SimState(garment.vertices, np.zeros_like(garment.vertices), w)


def _check_topology(frames: list[TriMesh]) -> None:
    ref = frames[0]
    for i, f in enumerate(frames[1:], 1):
        if f.n_vertices != ref.n_vertices or not np.array_equal(f.triangles, ref.triangles):
            raise SimulationError(f"body topology changes at frame {i}")


def simulate_sequence(garment: TriMesh, body_frames: list[TriMesh], params: SimParams,
                      constraints: ConstraintSet, *, pins=(), attach=(),
                      areal_density: float = 0.2, thickness: float = 0.005,
                      friction: float = 0.3, rescue_depth: float = 0.02, ramp_frames: int = 30,
                      canonical_body: TriMesh | None = None,
                      diagnostics: Diagnostics | None = None,
                      records: list | None = None) -> list[SimState]:
    """Drape ``garment`` over each body frame; one state per body frame.

    The first ``ramp_frames`` unrecorded frames move the body from
    ``canonical_body`` (or hold frame 0 when none is given) so the garment
    settles before the sequence starts.
    """
    if not body_frames:
        raise SimulationError("empty body sequence")
    _check_topology(body_frames + ([canonical_body] if canonical_body is not None else []))
    state = initial_state(garment, pins, areal_density)
    start_body = canonical_body if canonical_body is not None else body_frames[0]
    collider = CollisionBody(start_body, thickness, friction, rescue_depth)
    attachments = None
    if len(attach):
        attachments = Attachments.fit(attach, garment.vertices, start_body)
    diag = diagnostics if diagnostics is not None else Diagnostics()
    b0 = body_frames[0].vertices
    for k in range(ramp_frames):
        if canonical_body is None:
            ramp = body_frames[0]
        else:
            a = (k + 1) / ramp_frames
            ramp = start_body.with_vertices((1 - a) * start_body.vertices + a * b0)
        collider = collider.advance(ramp)
        state = step(state, constraints, collider, params, None, attachments, frame=-ramp_frames + k)
    out = []
    for i, body in enumerate(body_frames):
        collider = collider.advance(body)
        before = dict(diag.counters)
        t0 = time.perf_counter()
        state = step(state, constraints, collider, params, diag, attachments, frame=i)
        elapsed = (time.perf_counter() - t0) * 1e3
        out.append(state.copy())
        if records is not None:
            res = np.abs(constraints.residuals(state.positions)) / constraints.rest_lengths
            s_mask = constraints.kind == STRETCH
            records.append({
                "frame": i,
                "max_stretch_residual": float(res[s_mask].max()) if s_mask.any() else 0.0,
                "contacts": diag.counters["contacts"] - before.get("contacts", 0),
                "collision_rescues": diag.counters["collision_rescues"]
                - before.get("collision_rescues", 0),
                "solver_ms": elapsed,
            })
    return out
