"""Indexed triangle meshes: I/O, topology, normals and tangent frames."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .diagnostics import Diagnostics

DEGENERATE_AREA = 1e-12
DEFAULT_NORMAL = np.array([0.0, 0.0, 1.0])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh with optional per-vertex UVs.

    ``vertices`` is (N, 3) float64 in meters, ``triangles`` is (M, 3) int64
    and ``uvs`` is (N, 2) in [0, 1]^2 or None when the source had none.
    Arrays are made read-only on construction so instances can be shared.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray | None = None
    name: str = ""
    _loops: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            bad = int(t.max()) if t.max() >= len(v) else int(t.min())
            raise MeshError(f"triangle index {bad} out of range for {len(v)} vertices")
        uv = None
        if self.uvs is not None:
            uv = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
            if len(uv) != len(v):
                raise MeshError(f"{len(uv)} uvs for {len(v)} vertices")
            if uv.size and (uv.min() < -1e-9 or uv.max() > 1 + 1e-9):
                raise MeshError("uv coordinates outside [0,1]^2")
            uv.setflags(write=False)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "uvs", uv)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def has_uvs(self) -> bool:
        return self.uvs is not None

    def require_uvs(self) -> np.ndarray:
        if self.uvs is None:
            raise MeshError(f"mesh {self.name or '<unnamed>'} has no UV coordinates")
        return self.uvs

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology and UVs, new positions."""
        return TriMesh(vertices, self.triangles, self.uvs, self.name, self._loops)

    @cached_property
    def face_normals_raw(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals_raw, axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2) with i < j, sorted lexicographically."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_faces(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for f, (a, b, c) in enumerate(self.triangles.tolist()):
            for i, j in ((a, b), (b, c), (c, a)):
                key = (i, j) if i < j else (j, i)
                out.setdefault(key, []).append(f)
        return out

    @property
    def boundary_loops(self) -> list[np.ndarray]:
        if self._loops is None:
            object.__setattr__(self, "_loops", tuple(_extract_boundary_loops(self)))
        return list(self._loops)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _extract_boundary_loops(mesh: TriMesh) -> list[np.ndarray]:
    # directed boundary half-edges, oriented as in their single incident face
    nxt: dict[int, list[int]] = {}
    for (i, j), faces in mesh.edge_faces.items():
        if len(faces) != 1:
            continue
        a, b, c = mesh.triangles[faces[0]].tolist()
        for s, t in ((a, b), (b, c), (c, a)):
            if {s, t} == {i, j}:
                nxt.setdefault(s, []).append(t)
                break
    for k in nxt:
        nxt[k].sort()
    loops = []
    while nxt:
        start = min(nxt)
        loop = [start]
        cur = start
        while True:
            succ = nxt[cur]
            t = succ.pop(0)
            if not succ:
                del nxt[cur]
            if t == start:
                break
            loop.append(t)
            cur = t
            if cur not in nxt:
                break
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops


# ---------------------------------------------------------------------------
# I/O

def load_mesh(path: str | os.PathLike, format: str | None = None,
              diagnostics: Diagnostics | None = None) -> TriMesh:
    """Read an OBJ or PLY file; vertex order is preserved from the file."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return _load_obj(path, diagnostics)
    if fmt == "ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format {fmt!r}")


def save_mesh(mesh: TriMesh, path: str | os.PathLike, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        _save_obj(mesh, path)
    elif fmt == "ply":
        _save_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")


def _resolve(idx: str, n: int, what: str, lineno: int) -> int:
    k = int(idx)
    k = k - 1 if k > 0 else n + k
    if not 0 <= k < n:
        raise MeshError(f"line {lineno}: {what} index {idx} out of range ({n} defined)")
    return k


def _load_obj(path: Path, diagnostics: Diagnostics | None) -> TriMesh:
    verts: list[list[float]] = []
    texcoords: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    corner_uv: list[tuple[int, int]] = []
    # indices are resolved after parsing so forward references fail cleanly
    raw_faces: list[tuple[int, list[str]]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                elif parts[0] == "f":
                    if len(parts) < 4:
                        raise MeshError(f"line {lineno}: face with fewer than 3 corners")
                    raw_faces.append((lineno, parts[1:]))
            except ValueError as exc:
                if isinstance(exc, MeshError):
                    raise
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    nv, nt = len(verts), len(texcoords)
    for lineno, corners in raw_faces:
        vi, ti = [], []
        for c in corners:
            fields = c.split("/")
            vi.append(_resolve(fields[0], nv, "vertex", lineno))
            if len(fields) > 1 and fields[1]:
                ti.append(_resolve(fields[1], nt, "texcoord", lineno))
        for k in range(1, len(vi) - 1):
            faces.append((vi[0], vi[k], vi[k + 1]))
        if len(ti) == len(vi):
            corner_uv.extend(zip(vi, ti))
    uvs = None
    if texcoords:
        if corner_uv:
            uvs = np.full((nv, 2), np.nan)
            for v, t in corner_uv:
                if np.isnan(uvs[v, 0]):
                    uvs[v] = texcoords[t]
                elif not np.array_equal(uvs[v], texcoords[t]) and diagnostics is not None:
                    diagnostics.warn(f"vertex {v} has conflicting UVs; keeping the first")
            if np.isnan(uvs).any():
                uvs = None
        elif len(texcoords) == nv:
            uvs = np.asarray(texcoords)
    if uvs is None and diagnostics is not None:
        diagnostics.warn(f"{path.name}: no usable per-vertex UVs")
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int64).reshape(-1, 3), uvs, path.stem)


def _save_obj(mesh: TriMesh, path: Path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
        lines += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in mesh.triangles.tolist()]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in mesh.triangles.tolist()]
    path.write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path: Path) -> TriMesh:
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header:
        p = line.split()
        if not p:
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append((p[1], int(p[2]), []))
        elif p[0] == "property":
            elements[-1][2].append(p[1:])
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshError(f"{path}: unsupported PLY format {fmt}")
    endian = ">" if fmt == "binary_big_endian" else "<"
    verts = uvs = None
    faces = None
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
    else:
        buf = memoryview(data)[body_start:]
        off = 0
    for name, count, props in elements:
        if fmt == "ascii":
            if name == "face":
                rows = []
                for _ in range(count):
                    k = int(tokens[pos])
                    rows.append([int(x) for x in tokens[pos + 1:pos + 1 + k]])
                    pos += 1 + k
                faces = rows
            else:
                n = len(props)
                arr = np.array(tokens[pos:pos + n * count], dtype=np.float64).reshape(count, n)
                pos += n * count
                if name == "vertex":
                    verts, uvs = _ply_vertex_columns([p[-1] for p in props], arr)
        else:
            if name == "face":
                lp = props[0]
                ct, it = np.dtype(endian + _PLY_TYPES[lp[1]]), np.dtype(endian + _PLY_TYPES[lp[2]])
                rows = []
                for _ in range(count):
                    k = int(np.frombuffer(buf, ct, 1, off)[0])
                    off += ct.itemsize
                    rows.append(np.frombuffer(buf, it, k, off).astype(np.int64).tolist())
                    off += k * it.itemsize
                faces = rows
            else:
                dt = np.dtype([(p[-1], endian + _PLY_TYPES[p[0]]) for p in props])
                arr = np.frombuffer(buf, dt, count, off)
                off += dt.itemsize * count
                if name == "vertex":
                    cols = np.stack([arr[n].astype(np.float64) for n in dt.names], axis=1)
                    verts, uvs = _ply_vertex_columns(list(dt.names), cols)
    if verts is None or faces is None:
        raise MeshError(f"{path}: missing vertex or face element")
    tris = []
    for f in faces:
        for k in range(1, len(f) - 1):
            tris.append((f[0], f[k], f[k + 1]))
    return TriMesh(verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3), uvs, path.stem)


def _ply_vertex_columns(names: list[str], arr: np.ndarray):
    idx = {n: i for i, n in enumerate(names)}
    verts = arr[:, [idx["x"], idx["y"], idx["z"]]]
    for u, v in (("s", "t"), ("u", "v"), ("texture_u", "texture_v")):
        if u in idx and v in idx:
            return verts, arr[:, [idx[u], idx[v]]]
    return verts, None


def _save_ply(mesh: TriMesh, path: Path) -> None:
    has_uv = mesh.uvs is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if has_uv:
        header += ["property double s", "property double t"]
    header += [f"element face {mesh.n_triangles}", "property list uchar int vertex_indices",
               "end_header"]
    cols = [mesh.vertices] + ([mesh.uvs] if has_uv else [])
    vdata = np.ascontiguousarray(np.hstack(cols), dtype="<f8").tobytes()
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    f = np.empty(mesh.n_triangles, dtype=fdt)
    f["n"] = 3
    f["i"] = mesh.triangles
    path.write_bytes(("\n".join(header) + "\n").encode("ascii") + vdata + f.tobytes())


# ---------------------------------------------------------------------------
# differential quantities

def compute_vertex_normals(mesh: TriMesh, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized.

    Faces with area below 1e-12 m^2 are ignored. Vertices left without any
    valid incident face get +z and are reported to ``diagnostics``.
    """
    raw = mesh.face_normals_raw
    valid = mesh.face_areas >= DEGENERATE_AREA
    acc = np.zeros_like(mesh.vertices)
    t = mesh.triangles[valid]
    # |cross| = 2 * area, so summing raw crosses is the area weighting
    for k in range(3):
        np.add.at(acc, t[:, k], raw[valid])
    length = np.linalg.norm(acc, axis=1)
    bad = length <= 0
    length[bad] = 1.0
    normals = acc / length[:, None]
    if bad.any():
        normals[bad] = DEFAULT_NORMAL
        if diagnostics is not None:
            diagnostics.count("degenerate_normal", int(bad.sum()))
            diagnostics.warn(f"{int(bad.sum())} vertices have no non-degenerate incident "
                             f"triangle; normal set to +z")
    return normals


def _stable_tangent(n: np.ndarray) -> np.ndarray:
    """Branchless orthonormal-basis tangent for normals (N, 3)."""
    sign = np.where(n[:, 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    return np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)


def tbn_frames(mesh: TriMesh, normals: np.ndarray | None = None,
               diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Per-vertex orthonormal frames, shape (N, 3, 3) with columns (T, B, N).

    The tangent follows the direction of increasing u, projected onto the
    tangent plane; B = N x T so each frame is right-handed.
    """
    uv = mesh.require_uvs()
    if normals is None:
        normals = compute_vertex_normals(mesh, diagnostics)
    tri = mesh.triangles
    p = mesh.vertices[tri]
    w = uv[tri]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    d1, d2 = w[:, 1] - w[:, 0], w[:, 2] - w[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = (np.abs(det) > 1e-20) & (mesh.face_areas >= DEGENERATE_AREA)
    # dP/du scaled by |det| keeps the per-face contribution proportional to UV area
    t_face = np.where(ok[:, None],
                      (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) * np.sign(det)[:, None], 0.0)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, tri[:, k], t_face)
    t = acc - np.sum(acc * normals, axis=1, keepdims=True) * normals
    length = np.linalg.norm(t, axis=1)
    bad = length < 1e-12
    t = t / np.where(bad, 1.0, length)[:, None]
    if bad.any():
        t[bad] = _stable_tangent(normals[bad])
        if diagnostics is not None:
            diagnostics.count("degenerate_tangent", int(bad.sum()))
            diagnostics.warn(f"{int(bad.sum())} vertices have a degenerate UV "
                             f"parameterization; fallback tangent used")
    b = np.cross(normals, t)
    return np.stack([t, b, normals], axis=2)


def tbn_frame(mesh: TriMesh, vertex: int, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Frame of a single vertex as a 3x3 matrix with columns (T, B, N)."""
    if not 0 <= vertex < mesh.n_vertices:
        raise MeshError(f"vertex {vertex} out of range")
    return tbn_frames(mesh, diagnostics=diagnostics)[vertex]


def cotangent_weights(mesh: TriMesh, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Edge list (E, 2) and the cotangent weight (cot a + cot b) / 2 per edge."""
    tri = mesh.triangles
    p = mesh.vertices
    ii, jj, ww = [], [], []
    for k in range(3):
        a, b, c = tri[:, k], tri[:, (k + 1) % 3], tri[:, (k + 2) % 3]
        u, v = p[b] - p[a], p[c] - p[a]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        dot = np.sum(u * v, axis=1)
        cot = np.divide(dot, cross, out=np.zeros_like(dot), where=cross > 1e-20)
        ii.append(b)
        jj.append(c)
        ww.append(0.5 * cot)
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    w = np.concatenate(ww)
    key = np.sort(np.stack([i, j], axis=1), axis=1)
    edges, inv = np.unique(key, axis=0, return_inverse=True)
    weights = np.bincount(inv.ravel(), weights=w, minlength=len(edges))
    if clamp:
        weights = np.maximum(weights, 0.0)
    return edges, weights


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric vertex areas."""
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, mesh.triangles[:, k], mesh.face_areas / 3.0)
    return m
