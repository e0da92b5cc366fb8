"""End-to-end pipeline: simulate, bake occlusion, compose textures, render.

Every stage reads its inputs from files written by the previous stage and
writes its outputs with a cache record keyed by a content hash of those
inputs plus the relevant config. A stage whose key matches is skipped, and
rerunning a stage from cached inputs reproduces its outputs bit-exactly.

Output layout under the run directory::

    sim/<garment>.bin                 garment positions, binary sequence
    sim/records.json                  per-frame solver diagnostics
    ao/<garment>/frame_NNNN.exr       occlusion maps (+ .json sidecar)
    tex/<garment>/<camera>/frame_NNNN.exr
    images/<camera>/frame_NNNN.png    rendered frames
    masks/<camera>/frame_NNNN.png     clothing masks
    tags/<camera>/frame_NNNN.png      0 background, 1 body, 2+ garment index
    manifest.json
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .appearance import (EnvironmentLight, ShadowParams, ViewParams, compute_irradiance_table,
                         shade_texture, shadow_map)
from .config import PipelineConfig
from .diagnostics import Diagnostics
from .imaging import read_image, read_mask, write_image, write_labels, write_mask
from .mesh import TriMesh, load_mesh, save_mesh
from .occlusion import OcclusionMap, RayScene, bake_ambient_occlusion
from .render import CameraView, look_at, rasterize
from .scenes import merge
from .sequence import frames_from_positions, load_sequence, read_sequence_bin, write_sequence_bin
from .sim import SimParams, build_constraints, scale_rest_lengths, simulate_sequence
from .texels import TexelGrid, UVRaster, load_texel_grid, save_texel_grid

log = logging.getLogger(__name__)

STAGES = ("simulate", "bake-ao", "compose", "render")
DEFAULT_ALBEDO = 0.6


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None, frame: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.frame = frame

    def as_dict(self) -> dict:
        return {"error": type(self.__cause__ or self).__name__, "message": str(self),
                "stage": self.stage, "frame": self.frame}


def parse_frames(text: str | None) -> tuple[int, int | None] | None:
    """``"a..b"`` (inclusive), ``"a.."`` or ``"a"``."""
    if text is None:
        return None
    if ".." in text:
        a, b = text.split("..", 1)
        lo = int(a) if a else 0
        hi = int(b) if b else None
    else:
        lo = hi = int(text)
    if lo < 0 or (hi is not None and hi < lo):
        raise ValueError(f"bad frame range {text!r}")
    return lo, hi


def _hash_file(path: Path, h) -> None:
    h.update(str(path.name).encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)


def content_key(payload: dict, files: list[Path]) -> str:
    h = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode())
    for f in files:
        f = Path(f)
        for q in sorted(f.rglob("*")) if f.is_dir() else [f]:
            if q.is_file():
                _hash_file(q, h)
    return h.hexdigest()


_CODE_DIGEST: str | None = None


def code_digest() -> str:
    """Hash of the package sources, so editing the code invalidates caches."""
    global _CODE_DIGEST
    if _CODE_DIGEST is None:
        h = hashlib.sha256()
        for p in sorted(Path(__file__).parent.glob("*.py")):
            _hash_file(p, h)
        _CODE_DIGEST = h.hexdigest()
    return _CODE_DIGEST


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    _hash_file(path, h)
    return h.hexdigest()


def _frame_name(i: int) -> str:
    return f"frame_{i:04d}"


@dataclass
class Run:
    """State shared by the stages of one pipeline invocation."""

    cfg: PipelineConfig
    out: Path
    frames: tuple[int, int | None] | None = None
    force: bool = False
    timings: dict = field(default_factory=dict)
    cached: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    _cache: dict = field(default_factory=dict)

    # -- inputs ------------------------------------------------------------

    def body_frames(self) -> list[TriMesh]:
        if "body" not in self._cache:
            topo = self.cfg.path(self.cfg.body_topology)
            self._cache["body"] = load_sequence(self.cfg.path(self.cfg.body), topo)
        return self._cache["body"]

    def frame_range(self) -> list[int]:
        n = len(self.body_frames())
        lo, hi = self.frames if self.frames is not None else (0, None)
        hi = n - 1 if hi is None else hi
        if lo >= n or hi >= n:
            raise PipelineError(f"frame range {lo}..{hi} exceeds the {n}-frame body sequence")
        return list(range(lo, hi + 1))

    def last_frame(self) -> int:
        return self.frame_range()[-1]

    def garment(self, k: int) -> TriMesh:
        key = ("garment", k)
        if key not in self._cache:
            self._cache[key] = load_mesh(self.cfg.path(self.cfg.garments[k].mesh),
                                         diagnostics=self.diagnostics)
        return self._cache[key]

    def raster(self, k: int) -> UVRaster:
        key = ("raster", k)
        if key not in self._cache:
            app = self.cfg.appearance
            self._cache[key] = UVRaster(self.garment(k), app.texture_resolution, app.dilation,
                                        self.diagnostics)
        return self._cache[key]

    def albedo(self, k: int) -> TexelGrid:
        key = ("albedo", k)
        if key not in self._cache:
            r = self.raster(k)
            g = self.cfg.garments[k]
            h, w = r.coverage.shape
            if g.albedo is None:
                vals = np.full((h, w, 3), DEFAULT_ALBEDO)
            else:
                vals = read_image(self.cfg.path(g.albedo), self.cfg.render.gamma)
                vals = vals[..., None].repeat(3, 2) if vals.ndim == 2 else vals[..., :3]
                if vals.shape[:2] != (h, w):
                    raise PipelineError(f"albedo of {g.name} is {vals.shape[1]}x{vals.shape[0]}, "
                                        f"texture resolution is {w}x{h}")
            vals = np.where(r.filled[..., None], np.clip(vals, 0, 1), np.nan)
            self._cache[key] = TexelGrid(vals, r.coverage.copy())
        return self._cache[key]

    def table(self):
        if "table" not in self._cache:
            app = self.cfg.appearance
            env = (EnvironmentLight.load(self.cfg.path(app.environment)) if app.environment
                   else EnvironmentLight.uniform(1.0 / np.pi))   # unit irradiance
            self._cache["table"] = compute_irradiance_table(env, app.irradiance_mode)
        return self._cache["table"]

    def cameras(self) -> list[CameraView]:
        return [look_at(c.eye, c.target, c.up, c.fov_y, c.width, c.height, c.name)
                for c in self.cfg.cameras]

    def body_texture(self):
        app = self.cfg.appearance
        if app.body_texture is None:
            return tuple(app.body_color)
        grid, _ = load_texel_grid(self.cfg.path(app.body_texture))
        return grid

    def garment_frames(self, k: int) -> list[TriMesh]:
        pos = read_sequence_bin(self.sim_path(k))
        return frames_from_positions(self.garment(k), pos)

    # -- paths -------------------------------------------------------------

    def sim_path(self, k: int) -> Path:
        return self.out / "sim" / f"{self.cfg.garments[k].name}.bin"

    def ao_path(self, k: int, i: int) -> Path:
        return self.out / "ao" / self.cfg.garments[k].name / f"{_frame_name(i)}.exr"

    def tex_path(self, k: int, cam: str, i: int) -> Path:
        return self.out / "tex" / self.cfg.garments[k].name / cam / f"{_frame_name(i)}.exr"

    def image_path(self, cam: str, i: int) -> Path:
        ext = "exr" if self.cfg.render.format == "exr" else "png"
        return self.out / "images" / cam / f"{_frame_name(i)}.{ext}"

    # -- bookkeeping -------------------------------------------------------

    def input_files(self) -> list[Path]:
        c = self.cfg
        files = [c.path(c.body)] + [c.path(g.mesh) for g in c.garments]
        files += [c.path(p) for p in (c.body_topology, c.appearance.environment,
                                      c.appearance.body_texture) if p]
        files += [c.path(g.albedo) for g in c.garments if g.albedo]
        return files

    def stage(self, name: str, key_payload: dict, inputs: list[Path], outputs: list[Path], fn):
        """Run ``fn`` unless the cache record for this stage matches."""
        missing = [str(p) for p in inputs if not Path(p).exists()]
        if missing:
            raise PipelineError(f"missing inputs (run the earlier stages first): "
                                + ", ".join(missing[:5]), name)
        key = content_key({"stage": name, "version": __version__, "code": code_digest(),
                           **key_payload}, inputs)
        record = self.out / ".cache" / f"{name}.json"
        if not self.force and record.exists() and all(p.exists() for p in outputs):
            rec = json.loads(record.read_text())
            if rec.get("key") == key:
                self.cached[name] = True
                self.timings.setdefault(name, [])
                # replay what the stage reported when it ran
                self.diagnostics.messages += rec.get("messages", [])
                self.diagnostics.counters.update(rec.get("counters", {}))
                return
        self.cached[name] = False
        n_msg, before = len(self.diagnostics.messages), dict(self.diagnostics.counters)
        fn()
        counters = {k: v - before.get(k, 0) for k, v in self.diagnostics.counters.items()}
        record.parent.mkdir(parents=True, exist_ok=True)
        record.write_text(json.dumps({"key": key, "messages": self.diagnostics.messages[n_msg:],
                                      "counters": counters}))

    def _time(self, name: str, t0: float) -> None:
        self.timings.setdefault(name, []).append((time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------------------
# stages


def _attach_indices(run: Run, k: int) -> np.ndarray:
    g = run.cfg.garments[k]
    mesh = run.garment(k)
    idx = list(g.attach)
    loops = mesh.boundary_loops
    for li in g.attach_loops:
        if li >= len(loops):
            raise PipelineError(f"garment {g.name} has {len(loops)} boundary loops, "
                                f"attach_loops asks for loop {li}")
        idx += list(loops[li])
    return np.unique(np.asarray(idx, dtype=np.int64))


def _sim_params(run: Run) -> SimParams:
    s = run.cfg.sim
    return SimParams(gravity=tuple(s.gravity), dt=s.dt, substeps=s.substeps,
                     iterations=s.iterations, damping=s.damping)


def stage_simulate(run: Run) -> None:
    cfg = run.cfg
    last = run.last_frame()
    outputs = [run.sim_path(k) for k in range(len(cfg.garments))]
    payload = {"sim": cfg.sim.model_dump(), "garments": [g.model_dump() for g in cfg.garments],
               "last": last}

    def work():
        body = run.body_frames()[:last + 1]
        s = cfg.sim
        colliders = list(body)
        records = []
        (run.out / "sim").mkdir(parents=True, exist_ok=True)
        for k, g in enumerate(cfg.garments):
            garment = run.garment(k)
            cons = build_constraints(garment, s.stretch_compliance, s.bend_compliance)
            if s.rest_scale != 1.0:
                cons = scale_rest_lengths(cons, s.rest_scale)
            recs: list = []
            t0 = time.perf_counter()
            try:
                states = simulate_sequence(
                    garment, colliders, _sim_params(run), cons, pins=g.pins,
                    attach=_attach_indices(run, k), areal_density=s.areal_density,
                    thickness=s.thickness, friction=s.friction, rescue_depth=s.rescue_depth,
                    ramp_frames=s.ramp_frames, diagnostics=run.diagnostics, records=recs)
            except Exception as e:
                frame = recs[-1]["frame"] + 1 if recs else 0
                raise PipelineError(f"{g.name}: {e}", "simulate", frame) from e
            run._time("simulate", t0)
            write_sequence_bin(run.sim_path(k), [st.positions for st in states])
            for r in recs:
                r["garment"] = g.name
            records += recs
            # later garments collide with the body plus every garment before them
            gframes = frames_from_positions(garment, read_sequence_bin(run.sim_path(k)))
            colliders = [merge([c, gf], "collider") for c, gf in zip(colliders, gframes)]
        (run.out / "sim" / "records.json").write_text(json.dumps(records, indent=1))
        run.records = records

    run.stage("simulate", payload, run.input_files(), outputs, work)
    if not run.records and (run.out / "sim" / "records.json").exists():
        run.records = json.loads((run.out / "sim" / "records.json").read_text())


def _run_frames(run: Run, stage: str, frames, fn):
    for i in frames:
        t0 = time.perf_counter()
        try:
            fn(i)
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(str(e), stage, i) from e
        run._time(stage, t0)


def stage_bake_ao(run: Run) -> None:
    cfg = run.cfg
    frames = run.frame_range()
    outputs = [run.ao_path(k, i) for k in range(len(cfg.garments)) for i in frames]
    payload = {"ao": cfg.ao.model_dump(), "seed": cfg.seed, "frames": frames,
               "res": cfg.appearance.texture_resolution, "dil": cfg.appearance.dilation}
    inputs = run.input_files() + [run.sim_path(k) for k in range(len(cfg.garments))]

    def work():
        body = run.body_frames()
        garments = [run.garment_frames(k) for k in range(len(cfg.garments))]
        scene = None

        def one(i):
            nonlocal scene
            meshes = [body[i]] + [g[i] for g in garments]
            scene = RayScene(meshes) if scene is None else scene.update(meshes)
            for k in range(len(cfg.garments)):
                occ = bake_ambient_occlusion(
                    garments[k][i], scene, cfg.ao.samples, epsilon=cfg.ao.epsilon,
                    max_distance=cfg.ao.max_distance, seed=cfg.seed, raster=run.raster(k),
                    diagnostics=run.diagnostics)
                run.ao_path(k, i).parent.mkdir(parents=True, exist_ok=True)
                occ.save(run.ao_path(k, i))

        _run_frames(run, "bake-ao", frames, one)

    run.stage("bake-ao", payload, inputs, outputs, work)


def stage_compose(run: Run) -> None:
    cfg = run.cfg
    frames = run.frame_range()
    cams = run.cameras()
    outputs = [run.tex_path(k, c.name, i) for k in range(len(cfg.garments)) for c in cams
               for i in frames]
    payload = {"appearance": cfg.appearance.model_dump(), "cameras": [c.to_dict() for c in cams],
               "frames": frames, "gamma": cfg.render.gamma}
    inputs = (run.input_files() + [run.sim_path(k) for k in range(len(cfg.garments))]
              + [run.ao_path(k, i) for k in range(len(cfg.garments)) for i in frames])

    def work():
        app = cfg.appearance
        params = ViewParams(f0=app.f0, tint=tuple(app.tint))
        sp = ShadowParams(app.shadow_gamma, app.shadow_floor)
        garments = [run.garment_frames(k) for k in range(len(cfg.garments))]

        def one(i):
            for k in range(len(cfg.garments)):
                albedo = run.albedo(k)
                shadow = shadow_map(OcclusionMap.load(run.ao_path(k, i)), sp)
                for cam in cams:
                    tex = _model_texture(app.model, garments[k][i], run.raster(k), albedo,
                                         run.table(), cam.position, params, shadow)
                    p = run.tex_path(k, cam.name, i)
                    p.parent.mkdir(parents=True, exist_ok=True)
                    save_texel_grid(tex, p, {"model": app.model})

        _run_frames(run, "compose", frames, one)

    run.stage("compose", payload, inputs, outputs, work)


def _model_texture(model, mesh, raster, albedo, table, cam_pos, params, shadow) -> TexelGrid:
    if model == "mean":
        return TexelGrid(albedo.values.copy(), albedo.coverage.copy())
    return shade_texture(mesh, raster, albedo, table, cam_pos, params, shadow,
                         view_dependent=model == "full")


def stage_render(run: Run) -> None:
    cfg = run.cfg
    frames = run.frame_range()
    cams = run.cameras()
    outputs = [run.image_path(c.name, i) for c in cams for i in frames]
    payload = {"render": cfg.render.model_dump(), "cameras": [c.to_dict() for c in cams],
               "frames": frames, "body": cfg.appearance.body_color}
    inputs = (run.input_files() + [run.sim_path(k) for k in range(len(cfg.garments))]
              + [run.tex_path(k, c.name, i) for k in range(len(cfg.garments)) for c in cams
                 for i in frames])

    def work():
        body = run.body_frames()
        body_tex = run.body_texture()
        garments = [run.garment_frames(k) for k in range(len(cfg.garments))]

        def one(i):
            for cam in cams:
                items = [(body[i], body_tex)]
                for k in range(len(cfg.garments)):
                    tex, _ = load_texel_grid(run.tex_path(k, cam.name, i))
                    items.append((garments[k][i], tex))
                fb = rasterize(items, cam, cfg.render.background)
                p = run.image_path(cam.name, i)
                for sub in ("images", "masks", "tags"):
                    (run.out / sub / cam.name).mkdir(parents=True, exist_ok=True)
                write_image(p, fb.rgb, cfg.render.gamma)
                write_mask(run.out / "masks" / cam.name / f"{_frame_name(i)}.png", fb.tag >= 1)
                write_labels(run.out / "tags" / cam.name / f"{_frame_name(i)}.png", fb.tag + 1)

        _run_frames(run, "render", frames, one)

    run.stage("render", payload, inputs, outputs, work)


STAGE_FUNCS = {"simulate": stage_simulate, "bake-ao": stage_bake_ao, "compose": stage_compose,
               "render": stage_render}


# ---------------------------------------------------------------------------
# workflows


def _versions() -> dict:
    import numba
    import scipy

    return {"drape": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def hardware() -> dict:
    import numba

    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "cpu_count": os.cpu_count(), "numba_threads": numba.get_num_threads(),
            "system": platform.system()}


def _stats(ms: list[float]) -> dict:
    if not ms:
        return {"n": 0}
    a = np.asarray(ms)
    return {"n": len(a), "mean_ms": float(a.mean()), "median_ms": float(np.median(a)),
            "p95_ms": float(np.percentile(a, 95)), "total_ms": float(a.sum())}


def write_manifest(run: Run, workflow: str, extra: dict | None = None) -> dict:
    man = {
        "workflow": workflow,
        "config": run.cfg.snapshot(),
        "seed": run.cfg.seed,
        "frames": run.frame_range(),
        "versions": _versions(),
        "stages": {s: {"cached": run.cached.get(s, False), **_stats(run.timings.get(s, []))}
                   for s in run.timings},
        "frame_diagnostics": run.records,
        "diagnostics": run.diagnostics.as_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    man.update(extra or {})
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "manifest.json").write_text(json.dumps(man, indent=1, default=float))
    return man


def make_run(cfg: PipelineConfig, out=None, frames=None, seed=None, force=False) -> Run:
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": int(seed)})
    out_dir = Path(out) if out is not None else cfg.path(cfg.output)
    return Run(cfg, out_dir, parse_frames(frames) if isinstance(frames, str) else frames, force)


def run_stages(run: Run, stages=STAGES) -> None:
    for s in stages:
        STAGE_FUNCS[s](run)


def animate(cfg: PipelineConfig, out=None, frames=None, seed=None, force=False) -> dict:
    if not cfg.cameras:
        raise PipelineError("animate needs at least one camera")
    run = make_run(cfg, out, frames, seed, force)
    run_stages(run)
    return write_manifest(run, "animate")


def retarget(cfg: PipelineConfig, body: str, body_topology: str | None = None,
             scale: float = 1.0, out=None, frames=None, seed=None, force=False) -> dict:
    """Same pipeline over a different body sequence, optionally resized garment."""
    if body_topology is not None:
        topo = str(Path(body_topology).resolve())
    elif cfg.body_topology is not None:
        topo = str(cfg.path(cfg.body_topology))
    else:
        topo = None
    new = cfg.model_copy(update={"body": str(Path(body).resolve()), "body_topology": topo,
                                 "sim": cfg.sim.model_copy(update={"rest_scale": float(scale)})})
    new.check_paths()
    run = make_run(new, out, frames, seed, force)
    run_stages(run)
    return write_manifest(run, "retarget", {"scale": scale})


def resize(cfg: PipelineConfig, scale: float, out=None, frames=None, seed=None,
           force=False) -> dict:
    run = make_run(cfg.model_copy(update={"sim": cfg.sim.model_copy(
        update={"rest_scale": float(scale)})}), out, frames, seed, force)
    run_stages(run)
    return write_manifest(run, "resize", {"scale": scale})


def bench(cfg: PipelineConfig, out=None, frames=None, seed=None, budget: bool = True) -> dict:
    """Per-stage timing statistics; stage outputs are the same as animate's."""
    run = make_run(cfg, out, frames, seed, force=True)
    run_stages(run)
    solver = [r["solver_ms"] for r in run.records]
    report = {"hardware": hardware(),
              "stages": {s: _stats(run.timings.get(s, [])) for s in STAGES},
              "solver_per_frame": _stats(solver)}
    if budget:
        report["budget"] = budget_benchmarks()
    write_manifest(run, "bench", {"bench": report})
    (run.out / "bench.json").write_text(json.dumps(report, indent=1))
    return report


def budget_benchmarks(frames: int = 10, seed: int = 0) -> dict:
    """Declared performance targets: 5k-vertex garment at 20 substeps, AO 256^2 x 256."""
    from .scenes import grid, icosphere
    from .sim import CollisionBody, initial_state, step

    cloth = grid(70, 70, (1.2, 1.2), z=1.05, origin=(-0.6, -0.6))
    body = icosphere(3, 0.5, (0, 0, 0.5))
    cons = build_constraints(cloth)
    params = SimParams(substeps=20)
    state = initial_state(cloth)
    collider = CollisionBody(body)
    for _ in range(10):   # JIT warm-up, and lets the cloth settle into contact
        state = step(state, cons, collider, params)
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        state = step(state, cons, collider, params)
        times.append((time.perf_counter() - t0) * 1e3)
    sim_cloth = cloth.with_vertices(state.positions)
    scene = RayScene([sim_cloth, body])
    bake_ambient_occlusion(sim_cloth, scene, 4, 32, seed=seed)   # JIT warm-up
    t0 = time.perf_counter()
    occ = bake_ambient_occlusion(sim_cloth, scene, 256, 256, seed=seed)
    ao_ms = (time.perf_counter() - t0) * 1e3
    return {"solver": {"vertices": cloth.n_vertices, "substeps": 20, **_stats(times),
                       "budget_ms": 100.0},
            "ao": {"resolution": 256, "samples": 256, "covered_texels":
                   int(occ.grid.coverage.sum()), "ms": ao_ms, "budget_ms": 2000.0}}


# ---------------------------------------------------------------------------
# evaluation


def _index_images(root: Path) -> dict:
    out = {}
    if root is None or not root.exists():
        return out
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() in (".png", ".exr") and p.is_file():
            out[str(p.relative_to(root).with_suffix(""))] = p
    return out


def evaluate(cfg: PipelineConfig, out=None, frames=None, rendered=None, references=None,
             masks=None, diagnostics: Diagnostics | None = None) -> dict:
    """Masked L1 / MSE / SSIM per (camera, frame) on the 8-bit value scale."""
    from .metrics import masked_metrics

    ev = cfg.evaluate
    out_dir = Path(out) if out is not None else cfg.path(cfg.output)
    rendered = Path(rendered) if rendered else (cfg.path(ev.rendered) if ev.rendered
                                                else out_dir / "images")
    references = Path(references) if references else cfg.path(ev.references)
    masks = Path(masks) if masks else (cfg.path(ev.masks) if ev.masks else out_dir / "masks")
    if references is None:
        raise PipelineError("evaluate needs a reference directory", "evaluate")
    diag = diagnostics if diagnostics is not None else Diagnostics()
    ren, ref, msk = _index_images(rendered), _index_images(references), _index_images(masks)
    rng = parse_frames(frames) if isinstance(frames, str) else frames
    if rng is not None:
        lo, hi = rng[0], rng[1] if rng[1] is not None else 1 << 62

        def keep(d):
            return {k: v for k, v in d.items() if lo <= int(k.rsplit("_", 1)[-1]) <= hi}

        ren, ref, msk = keep(ren), keep(ref), keep(msk)
    keys = sorted(set(ren) & set(ref) & set(msk))
    missing = sorted((set(ren) | set(ref)) - set(keys))
    if missing:
        diag.warn(f"{len(missing)} frames missing from one side, evaluating the intersection: "
                  + ", ".join(missing[:10]))
    if not keys:
        raise PipelineError("no frames in common between rendered and reference sets",
                            "evaluate")
    records = []
    for k in keys:
        a = read_image(ren[k], ev.gamma)
        b = read_image(ref[k], ev.gamma)
        m = read_mask(msk[k])
        cam, frame = (k.split("/", 1) + [""])[:2] if "/" in k else ("", k)
        rec = {"camera": cam, "frame": frame, **masked_metrics(a, b, m)}
        records.append(rec)
    agg = {m: float(np.mean([r[m] for r in records])) for m in ("l1", "mse", "ssim")}
    report = {"n": len(records), "mean": agg, "records": records, "missing": missing,
              "warnings": diag.messages}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=1))
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["camera", "frame", "l1", "mse", "ssim"])
        w.writeheader()
        w.writerows(records)
    return report


# ---------------------------------------------------------------------------
# registration


def register(cfg: PipelineConfig, out=None, seed=None) -> dict:
    from .registration import (IcpParams, biharmonic_deform, densify_laplace, loop_points,
                               match_boundaries, nonrigid_icp, prune_ransac,
                               read_correspondences_csv, read_loops_json,
                               write_correspondences_csv)

    rc = cfg.registration
    if rc is None:
        raise PipelineError("config has no 'registration' section", "register")
    out_dir = (Path(out) if out is not None else cfg.path(cfg.output)) / "register"
    out_dir.mkdir(parents=True, exist_ok=True)
    template = load_mesh(cfg.path(rc.template))
    target = load_mesh(cfg.path(rc.target))
    body = load_mesh(cfg.path(rc.inner_body))
    tbody = load_mesh(cfg.path(rc.template_body)) if rc.template_body else None
    loops = loop_points(target, read_loops_json(cfg.path(rc.target_loops)))
    timings = {}
    t0 = time.perf_counter()
    corr = match_boundaries(template, loops, body, tbody)
    init = biharmonic_deform(template, corr)
    timings["biharmonic_ms"] = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    params = IcpParams(max_iterations=rc.icp_iterations, distance_cutoff=rc.icp_distance_cutoff,
                       normal_cutoff_deg=rc.icp_normal_cutoff_deg, smoothness=rc.icp_smoothness,
                       convergence=rc.icp_convergence)
    icp = nonrigid_icp(template, target, init, params)
    timings["icp_ms"] = (time.perf_counter() - t0) * 1e3
    registered = template.with_vertices(template.vertices + icp.displacement)
    save_mesh(registered, out_dir / "registered.obj")
    np.save(out_dir / "displacement.npy", icp.displacement)
    report = {"boundary_pairs": len(corr.template_indices), "loop_pairs": corr.loop_pairs,
              "icp_iterations": icp.iterations, "icp_converged": icp.converged,
              "icp_objective": [h[-1] for h in icp.objective], "timings": timings}
    if rc.correspondences:
        sparse = read_correspondences_csv(cfg.path(rc.correspondences))
        kept = prune_ransac(sparse, template.require_uvs(), rc.ransac_threshold,
                            rc.ransac_iterations, cfg.seed if seed is None else int(seed))
        write_correspondences_csv(out_dir / "correspondences_pruned.csv", kept)
        offsets = kept.targets[:, :2] - template.uvs[kept.indices]
        dense = densify_laplace(template, kept, offsets)
        np.save(out_dir / "uv_offsets.npy", dense)
        report.update({"correspondences_in": len(sparse), "correspondences_kept": len(kept)})
    (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    return report
