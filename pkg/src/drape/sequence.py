"""Mesh sequence files.

Binary layout (little-endian): uint32 vertex count, uint32 frame count,
then frame-major float32 positions (frames x vertices x 3). Topology is
not stored; it comes from a companion mesh. A directory of per-frame OBJ
files (sorted by name) is the other accepted form.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .mesh import MeshError, TriMesh, load_mesh, save_mesh

HEADER = np.dtype("<u4")
PAYLOAD = np.dtype("<f4")


def write_sequence_bin(path: str | os.PathLike, frames) -> None:
    arr = np.stack([np.asarray(getattr(f, "vertices", f)) for f in frames]).astype(PAYLOAD)
    n_frames, n_verts = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([n_verts, n_frames], dtype=HEADER).tobytes())
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_sequence_bin(path: str | os.PathLike) -> np.ndarray:
    """Positions as float64 array (frames, vertices, 3)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MeshError(f"{path}: truncated sequence header")
    n_verts, n_frames = (int(x) for x in np.frombuffer(raw[:8], dtype=HEADER))
    expected = 8 + n_frames * n_verts * 3 * PAYLOAD.itemsize
    if len(raw) != expected:
        raise MeshError(f"{path}: expected {expected} bytes for {n_frames} frames of "
                        f"{n_verts} vertices, found {len(raw)}")
    data = np.frombuffer(raw[8:], dtype=PAYLOAD).reshape(n_frames, n_verts, 3)
    return data.astype(np.float64)


def frames_from_positions(topology: TriMesh, positions: np.ndarray) -> list[TriMesh]:
    if positions.shape[1] != topology.n_vertices:
        raise MeshError(f"sequence has {positions.shape[1]} vertices, topology mesh has "
                        f"{topology.n_vertices}")
    return [topology.with_vertices(p) for p in positions]


def load_sequence(path: str | os.PathLike, topology: TriMesh | str | os.PathLike | None = None
                  ) -> list[TriMesh]:
    """Frames from a binary sequence (needs ``topology``) or an OBJ directory."""
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.suffix.lower() in (".obj", ".ply"))
        if not files:
            raise MeshError(f"{p}: no mesh files")
        return [load_mesh(f) for f in files]
    if topology is None:
        raise MeshError(f"{p}: binary sequences need a topology mesh")
    if not isinstance(topology, TriMesh):
        topology = load_mesh(topology)
    return frames_from_positions(topology, read_sequence_bin(p))


def save_sequence_dir(path: str | os.PathLike, frames: list[TriMesh], prefix: str = "frame"
                      ) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_mesh(f, d / f"{prefix}_{i:04d}.obj")
