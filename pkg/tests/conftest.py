"""Shared fixtures: pinhole cameras, a rendered slanted-plane rig and small pipeline configs."""
from __future__ import annotations

import numpy as np
import pytest

from gcmvs.config import PipelineConfig
from gcmvs.geometry import CameraModel
from gcmvs.synth import SceneSpec, TextureSpec, make_rig, render_rig, slanted_plane


# ── Helpers ──────────────────────────────────────────────────────────────

def make_camera(
    fx: float = 100.0,
    fy: float = 100.0,
    cx: float = 50.0,
    cy: float = 50.0,
    rotation=None,
    center=(0.0, 0.0, 0.0),
    width: int = 201,
    height: int = 201,
) -> CameraModel:
    """Pinhole camera placed by its world-space center."""
    rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    translation = -rotation @ np.asarray(center, dtype=np.float64)
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        rotation=rotation,
        translation=translation,
        image_width=width,
        image_height=height,
    )


def rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in radians between (3, ...) vector fields; stable near zero."""
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    dot = np.sum(a * b, axis=0)
    return np.arctan2(cross, dot)


def small_config(tmp_path, name: str = "run", **scene) -> PipelineConfig:
    """Cheap 80x64, 3-view plane run without fusion; scene fields override."""
    config = PipelineConfig(name=name, output_dir=str(tmp_path), base_interval=0.3)
    config.scene.width = 80
    config.scene.height = 64
    config.scene.n_views = 3
    config.scene.frequency = 0.5
    config.fusion.enabled = False
    for key, value in scene.items():
        setattr(config.scene, key, value)
    return config


# ── Fixtures ─────────────────────────────────────────────────────────────

@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture(scope="session")
def plane_spec() -> SceneSpec:
    return SceneSpec(primitive=slanted_plane(depth=10.0, slant_deg=35.0), texture=TextureSpec(frequency=0.5))


@pytest.fixture(scope="session")
def plane_views(plane_spec):
    """Noiseless 5-view arc rig (160x128) around the slanted plane."""
    cams = make_rig(5, 1.5, look_at=(0.0, 0.0, 10.0), image_width=160, image_height=128)
    return render_rig(plane_spec, cams)
