"""Command-line entry point.

Every subcommand exits 0 on success and prints a JSON summary on stdout.
On failure it exits nonzero and writes one JSON object describing the
error (type, message, stage, frame) to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_FAILURE = 1
EXIT_INPUT = 2


def _set_threads(n: int | None) -> None:
    """Must run before numba is imported to raise the pool size."""
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
        return
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--frames", default=None, help="inclusive range a..b (default: all)")
        p.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    p.add_argument("--out", default=None, help="output directory (default: config 'output')")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads for kernels")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drape", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in [("simulate", "simulate garments over the body sequence"),
                       ("bake-ao", "bake per-frame ambient occlusion maps"),
                       ("compose", "compose per-camera garment textures"),
                       ("render", "render frames, masks and tag images"),
                       ("animate", "run every stage")]:
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("retarget", help="animate the garment over a different body sequence")
    _common(p)
    p.add_argument("--body", required=True, help="target body sequence")
    p.add_argument("--body-topology", default=None, help="topology mesh for a binary sequence")
    p.add_argument("--scale", type=float, default=1.0, help="garment rest-length scale")
    p = sub.add_parser("resize", help="animate with garment rest lengths scaled")
    _common(p)
    p.add_argument("--scale", type=float, required=True)
    p = sub.add_parser("register", help="fit the garment template to a captured mesh")
    _common(p)
    p = sub.add_parser("evaluate", help="masked L1/MSE/SSIM against reference frames")
    _common(p)
    p.add_argument("--rendered", default=None)
    p.add_argument("--references", default=None)
    p.add_argument("--masks", default=None)
    p = sub.add_parser("bench", help="per-stage timing statistics")
    _common(p)
    p.add_argument("--no-budget", action="store_true",
                   help="skip the fixed-size solver and occlusion benchmarks")
    p = sub.add_parser("synth", help="write a synthetic demo scene and config")
    _common(p, config=False)
    p.add_argument("--n-frames", type=int, default=30)
    p.add_argument("--resolution", type=int, default=256, help="texture resolution")
    p.add_argument("--samples", type=int, default=256, help="occlusion samples per texel")
    p.add_argument("--image-size", type=int, default=256)
    return ap


def _summary(man: dict) -> dict:
    return {k: man[k] for k in ("workflow", "frames", "stages") if k in man}


def synth(out: Path, n_frames: int = 30, resolution: int = 256, samples: int = 256,
          image_size: int = 256, seed: int = 0) -> Path:
    """Walking body, skirt with its waistband carried by the body, two cameras."""
    from .config import (AOConfig, AppearanceConfig, CameraConfig, GarmentConfig,
                         PipelineConfig, SimConfig, save_config)
    from .mesh import save_mesh
    from .scenes import skirt, walking_body
    from .sequence import write_sequence_bin

    out.mkdir(parents=True, exist_ok=True)
    body = walking_body(n_frames)
    garment = skirt()
    save_mesh(body[0], out / "body_topology.obj")
    write_sequence_bin(out / "body.bin", body)
    save_mesh(garment, out / "skirt.obj")
    n_around = int((garment.vertices[:, 2] == garment.vertices[0, 2]).sum())
    cams = [CameraConfig(name="front", eye=(2.6, 0.0, 1.1), target=(0, 0, 0.9),
                         width=image_size, height=image_size),
            CameraConfig(name="side", eye=(0.4, 2.6, 1.3), target=(0, 0, 0.9),
                         width=image_size, height=image_size)]
    cfg = PipelineConfig(body="body.bin", body_topology="body_topology.obj",
                         garments=[GarmentConfig(name="skirt", mesh="skirt.obj",
                                                 attach=list(range(n_around)))],
                         cameras=cams, sim=SimConfig(ramp_frames=15),
                         ao=AOConfig(samples=samples),
                         appearance=AppearanceConfig(texture_resolution=resolution),
                         output="out", seed=seed)
    path = out / "config.json"
    save_config(cfg, path)
    return path


def _dispatch(args) -> dict:
    if args.command == "synth":
        out = Path(args.out or "demo")
        path = synth(out, args.n_frames, args.resolution, args.samples, args.image_size,
                     args.seed or 0)
        return {"config": str(path)}

    from . import pipeline as pl
    from .config import load_config

    cfg = load_config(args.config)
    kw = dict(out=args.out, frames=args.frames, seed=args.seed)
    if args.command in pl.STAGE_FUNCS:
        run = pl.make_run(cfg, force=args.force, **kw)
        # a single stage still needs the simulation prefix this run depends on
        pl.STAGE_FUNCS[args.command](run)
        return _summary(pl.write_manifest(run, args.command))
    if args.command == "animate":
        return _summary(pl.animate(cfg, force=args.force, **kw))
    if args.command == "retarget":
        return _summary(pl.retarget(cfg, args.body, args.body_topology, args.scale,
                                    force=args.force, **kw))
    if args.command == "resize":
        return _summary(pl.resize(cfg, args.scale, force=args.force, **kw))
    if args.command == "evaluate":
        rep = pl.evaluate(cfg, args.out, args.frames, args.rendered, args.references, args.masks)
        return {"n": rep["n"], "mean": rep["mean"], "missing": len(rep["missing"])}
    if args.command == "bench":
        return pl.bench(cfg, args.out, args.frames, args.seed, budget=not args.no_budget)
    if args.command == "register":
        return pl.register(cfg, args.out, args.seed)
    raise ValueError(f"unknown command {args.command}")


def _error_payload(e: BaseException) -> dict:
    cause = e.__cause__ if e.__cause__ is not None else e
    return {"error": type(cause).__name__, "message": str(e),
            "stage": getattr(e, "stage", None), "frame": getattr(e, "frame", None)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads(args.threads)
        result = _dispatch(args)
    except (FileNotFoundError, ValueError) as e:
        # includes pydantic validation errors and malformed input files
        print(json.dumps(_error_payload(e)), file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:
        print(json.dumps(_error_payload(e)), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, indent=1, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
