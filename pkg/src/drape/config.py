"""Versioned JSON pipeline configuration.

Relative paths resolve against the config file's directory. Every field
has a default except the body sequence and at least one garment; the
defaults are part of the schema (``python -m drape.config`` prints it).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimConfig(_Model):
    substeps: int = Field(20, ge=1, description="solver substeps per frame")
    iterations: int = Field(1, ge=1, description="constraint iterations per substep")
    dt: float = Field(1 / 30, gt=0, description="frame time step (s)")
    damping: float = Field(0.001, ge=0, le=1, description="velocity damping per substep")
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    stretch_compliance: float = Field(1e-7, ge=0, description="m/N")
    bend_compliance: float = Field(1e-3, ge=0, description="m/N")
    thickness: float = Field(0.005, gt=0, description="collision offset (m)")
    friction: float = Field(0.3, ge=0, le=1)
    rescue_depth: float = Field(0.02, gt=0, description="depth beyond which particles are rescued (m)")
    areal_density: float = Field(0.2, gt=0, description="kg/m^2")
    ramp_frames: int = Field(30, ge=0, description="unrecorded settling frames")
    rest_scale: float = Field(1.0, gt=0, description="garment rest-length scale (resizing)")


class AOConfig(_Model):
    samples: int = Field(256, ge=1)
    epsilon: float = Field(1e-4, ge=0, description="ray origin offset (m)")
    max_distance: float = Field(2.0, gt=0, description="m")


class AppearanceConfig(_Model):
    model: Literal["full", "view_independent", "mean"] = "full"
    texture_resolution: int = Field(512, ge=1)
    dilation: int = Field(2, ge=0)
    irradiance_mode: Literal["grid", "sh"] = "grid"
    environment: str | None = Field(None, description="lat-long EXR; uniform radiance 1/pi (unit irradiance) if unset")
    f0: float = Field(0.04, ge=0, le=1)
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shadow_gamma: float = Field(1.0, gt=0)
    shadow_floor: float = Field(0.0, ge=0, lt=1)
    body_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    body_texture: str | None = None


class CameraConfig(_Model):
    name: str
    eye: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 1.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_y: float = Field(40.0, gt=0, lt=180)
    width: int = Field(256, ge=1)
    height: int = Field(256, ge=1)


class RenderConfig(_Model):
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = Field(2.2, gt=0, description="display gamma for 8-bit output")
    format: Literal["png", "exr"] = "png"


class GarmentConfig(_Model):
    name: str
    mesh: str
    albedo: str | None = Field(None, description="UV texture (PNG/EXR); uniform 0.6 if unset")
    pins: list[int] = []
    attach: list[int] = Field([], description="vertices carried by the body")
    attach_loops: list[int] = Field([], description="boundary loops carried by the body")


class EvaluateConfig(_Model):
    rendered: str | None = Field(None, description="defaults to <output>/images")
    references: str | None = None
    masks: str | None = Field(None, description="defaults to <output>/masks")
    gamma: float = 2.2


class RegisterConfig(_Model):
    template: str
    target: str
    target_loops: str = Field(description="JSON with ordered boundary index lists of the target")
    inner_body: str
    template_body: str | None = None
    correspondences: str | None = Field(None, description="CSV for RANSAC + densification")
    ransac_threshold: float = Field(0.01, gt=0)
    ransac_iterations: int = Field(500, ge=1)
    icp_iterations: int = Field(50, ge=1)
    icp_distance_cutoff: float = Field(0.1, gt=0)
    icp_normal_cutoff_deg: float = Field(60.0, gt=0, le=90)
    icp_smoothness: float = Field(1e-3, gt=0)
    icp_convergence: float = Field(1e-7, gt=0)


class PipelineConfig(_Model):
    version: Literal[1] = SCHEMA_VERSION
    body: str = Field(description="OBJ directory or binary sequence")
    body_topology: str | None = Field(None, description="mesh giving triangles for a binary body")
    garments: list[GarmentConfig]
    cameras: list[CameraConfig] = []
    sim: SimConfig = SimConfig()
    ao: AOConfig = AOConfig()
    appearance: AppearanceConfig = AppearanceConfig()
    render: RenderConfig = RenderConfig()
    evaluate: EvaluateConfig = EvaluateConfig()
    registration: RegisterConfig | None = None
    output: str = "out"
    seed: int = Field(0, ge=0, lt=2 ** 64)
    base_dir: str = Field("", exclude=True, description="directory relative paths resolve against")

    @field_validator("garments")
    @classmethod
    def _unique_names(cls, v):
        names = [g.name for g in v]
        if len(set(names)) != len(names):
            raise ValueError("garment names must be unique")
        return v

    @model_validator(mode="after")
    def _cameras_unique(self):
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValueError("camera names must be unique")
        return self

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def check_paths(self) -> None:
        """All referenced input paths must exist."""
        missing = []
        refs = [self.body, self.body_topology, self.appearance.environment,
                self.appearance.body_texture, self.evaluate.references]
        refs += [g.mesh for g in self.garments] + [g.albedo for g in self.garments]
        for r in refs:
            if r is not None and not self.path(r).exists():
                missing.append(str(self.path(r)))
        if missing:
            raise FileNotFoundError("missing input paths: " + ", ".join(missing))

    def snapshot(self) -> dict:
        return json.loads(self.model_dump_json())


def load_config(path: str | os.PathLike, check: bool = True) -> PipelineConfig:
    path = Path(path)
    data = json.loads(path.read_text())
    cfg = PipelineConfig.model_validate(data)
    cfg.base_dir = str(path.resolve().parent)
    if check:
        cfg.check_paths()
    return cfg


def save_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.snapshot(), indent=2))


if __name__ == "__main__":
    print(json.dumps(PipelineConfig.model_json_schema(), indent=2))
