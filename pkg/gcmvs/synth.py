"""Analytic test scenes: one textured plane or sphere seen by a rig of pinhole cameras.

Texture is value noise evaluated at the 3D surface point, so every camera
sees exactly the same color for the same surface point.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .depthmap import DepthMap
from .errors import DegenerateRigError, DegenerateViewError, FormatError, PreconditionError
from .fileio import load_image, read_camera, read_depth, save_png, write_camera, write_depth
from .geometry import CameraModel, look_at_rotation, pixel_grid, pixel_rays
from .normals import NormalMap, load_normal_map, save_normal_map

logger = logging.getLogger(__name__)

PARALLEL_EPS = 1e-12
TABLE_SIZE = 256
# seed offset for the texture of a deliberately mismatched view
DECORRELATED_SEED_OFFSET = 7919

Vec3 = Tuple[float, float, float]


# =======================
# Scene description
# =======================
@dataclass(frozen=True)
class Plane:
    point: Vec3
    normal: Vec3

    def __post_init__(self) -> None:
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise PreconditionError(f"plane normal must be unit length, got {self.normal}")


@dataclass(frozen=True)
class Sphere:
    center: Vec3
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise PreconditionError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class TextureSpec:
    frequency: float = 2.0  # cycles per scene unit at the first octave
    octaves: int = 4
    seed: int = 0
    contrast: float = 1.5


@dataclass(frozen=True)
class SceneSpec:
    primitive: Union[Plane, Sphere]
    texture: TextureSpec = field(default_factory=TextureSpec)
    extent: Optional[float] = None  # plane disc radius around `point`; None is unbounded


@dataclass(frozen=True, eq=False)
class RenderedView:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    cam: CameraModel
    gt_depth: Optional[DepthMap] = None
    gt_normal: Optional[NormalMap] = None


def slanted_plane(depth: float = 10.0, slant_deg: float = 35.0) -> Plane:
    """Plane through (0, 0, depth) tilted about the x axis, facing the origin."""
    theta = np.radians(slant_deg)
    return Plane(point=(0.0, 0.0, float(depth)), normal=(0.0, float(np.sin(theta)), float(-np.cos(theta))))


# =======================
# Texture
# =======================
def _lattice_values(ix, iy, iz, perm: np.ndarray, table: np.ndarray) -> np.ndarray:
    mask = TABLE_SIZE - 1
    h = perm[(perm[(perm[ix & mask] + iy) & mask] + iz) & mask]
    return table[:, h]


def value_noise(points: np.ndarray, texture: TextureSpec) -> np.ndarray:
    """RGB value noise at (3, ...) world points; returns (3, ...) in [0, 1]."""
    rng = np.random.default_rng(texture.seed)
    perm = rng.permutation(TABLE_SIZE)
    table = rng.random((3, TABLE_SIZE))
    points = np.asarray(points, dtype=np.float64)

    total = np.zeros(points.shape)
    weight = 0.0
    for octave in range(int(texture.octaves)):
        amp = 0.5 ** octave
        scaled = points * (texture.frequency * 2.0 ** octave) + 13.7 * octave
        base = np.floor(scaled)
        frac = scaled - base
        smooth = frac * frac * (3.0 - 2.0 * frac)
        ix, iy, iz = base.astype(np.int64)
        sx, sy, sz = smooth
        acc = np.zeros(points.shape)
        for dx in (0, 1):
            wx = sx if dx else 1.0 - sx
            for dy in (0, 1):
                wy = sy if dy else 1.0 - sy
                for dz in (0, 1):
                    wz = sz if dz else 1.0 - sz
                    acc += (wx * wy * wz) * _lattice_values(ix + dx, iy + dy, iz + dz, perm, table)
        total += amp * acc
        weight += amp
    return np.clip(0.5 + texture.contrast * (total / weight - 0.5), 0.0, 1.0)


# =======================
# Rendering
# =======================
def _intersect(primitive, origin: np.ndarray, dirs: np.ndarray, extent: Optional[float]):
    """Ray parameters t (X = origin + t * dir) and surface normals in world space."""
    if isinstance(primitive, Plane):
        normal = np.asarray(primitive.normal, dtype=np.float64)
        point = np.asarray(primitive.point, dtype=np.float64)
        den = np.einsum("a,a...->...", normal, dirs)
        hit = np.abs(den) > PARALLEL_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(hit, normal @ (point - origin) / np.where(hit, den, 1.0), np.nan)
        hit &= t > 0
        if extent is not None:
            surface = origin[:, None, None] + t * dirs
            hit &= np.linalg.norm(surface - point[:, None, None], axis=0) <= extent
        normals = np.broadcast_to(normal[:, None, None], dirs.shape)
        return t, hit, normals

    center = np.asarray(primitive.center, dtype=np.float64)
    offset = origin - center
    c0 = offset @ offset - primitive.radius ** 2
    if c0 < 0:
        raise DegenerateViewError(f"camera at {origin.tolist()} is inside the sphere")
    a = np.sum(dirs * dirs, axis=0)
    b = np.einsum("a,a...->...", offset, dirs)
    disc = b * b - a * c0
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / a, np.nan)
    hit &= t > 0
    surface = origin[:, None, None] + np.where(hit, t, 0.0) * dirs
    normals = (surface - center[:, None, None]) / primitive.radius
    return t, hit, normals


def render_view(
    scene: SceneSpec,
    cam: CameraModel,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    texture: Optional[TextureSpec] = None,
) -> RenderedView:
    """Exact depth, camera-facing normals and texture color per pixel; misses are invalid and black."""
    u, v = pixel_grid(*cam.shape)
    rays = pixel_rays(u, v, cam)  # camera frame, z = 1, so the ray parameter is the depth
    dirs = np.einsum("ba,bhw->ahw", cam.rotation, rays)
    origin = cam.center

    t, hit, normals_world = _intersect(scene.primitive, origin, dirs, scene.extent)
    if not np.any(hit):
        raise DegenerateViewError("the primitive is not visible from this camera")

    depth = np.where(hit, t, 0.0)
    surface = origin[:, None, None] + depth * dirs
    colors = value_noise(surface, texture or scene.texture) * hit[None]
    image = np.transpose(colors, (1, 2, 0))
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        image = np.clip(image + rng.normal(0.0, noise_sigma, image.shape), 0.0, 1.0)

    normals = np.einsum("ab,bhw->ahw", cam.rotation, normals_world)
    facing_away = np.sum(normals * rays, axis=0) > 0
    normals = np.where(facing_away[None], -normals, normals)

    return RenderedView(
        image=image,
        cam=cam,
        gt_depth=DepthMap(values=depth, validity=hit),
        gt_normal=NormalMap(values=normals, validity=hit),
    )


def render_rig(
    scene: SceneSpec,
    cams: Sequence[CameraModel],
    noise_sigma: float = 0.0,
    seed: int = 0,
    decorrelated_view: Optional[int] = None,
) -> List[RenderedView]:
    """Render every camera; `decorrelated_view` gets an unrelated texture seed."""
    rng = np.random.default_rng(seed)
    views = []
    for index, cam in enumerate(cams):
        texture = scene.texture
        if decorrelated_view is not None and index == decorrelated_view:
            texture = TextureSpec(
                frequency=texture.frequency,
                octaves=texture.octaves,
                seed=texture.seed + DECORRELATED_SEED_OFFSET,
                contrast=texture.contrast,
            )
            logger.info("view %d rendered with a decorrelated texture", index)
        views.append(render_view(scene, cam, noise_sigma=noise_sigma, rng=rng, texture=texture))
    return views


# =======================
# Rig
# =======================
def make_rig(
    n_views: int,
    baseline: float,
    look_at=(0.0, 0.0, 10.0),
    image_width: int = 160,
    image_height: int = 128,
    focal: Optional[float] = None,
) -> List[CameraModel]:
    """Cameras on a horizontal arc around `look_at`, adjacent centers `baseline` apart.

    The reference camera sits at the world origin. Sources alternate right and
    left of it: +1, -1, +2, -2, ... arc steps.
    """
    if n_views < 2:
        raise DegenerateRigError(f"a rig needs at least 2 views, got {n_views}")
    if not baseline > 0:
        raise DegenerateRigError(f"baseline must be positive, got {baseline}")
    target = np.asarray(look_at, dtype=np.float64)
    # arc radius in the horizontal (x, z) plane
    radius = float(np.hypot(target[0], target[2]))
    if radius == 0:
        raise DegenerateRigError("look_at must not lie on the reference camera's vertical axis")
    if baseline >= 2 * radius:
        raise DegenerateRigError(f"baseline {baseline} exceeds the arc diameter {2 * radius}")

    step = 2.0 * np.arcsin(baseline / (2.0 * radius))
    angles = [0.0]
    for index in range(1, n_views):
        angles.append(((index + 1) // 2) * step * (1 if index % 2 else -1))
    if max(abs(a) for a in angles) >= np.pi / 2:
        raise DegenerateRigError("rig spans more than a half circle; reduce n_views or baseline")

    focal = float(focal or image_width)
    toward_origin = -target
    cams = []
    for angle in angles:
        c, s = np.cos(angle), np.sin(angle)
        rot_y = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        center = target + rot_y @ toward_origin
        try:
            rotation = look_at_rotation(center, target)
        except PreconditionError as exc:
            raise DegenerateRigError(str(exc)) from exc
        cams.append(
            CameraModel(
                fx=focal,
                fy=focal,
                cx=(image_width - 1) / 2.0,
                cy=(image_height - 1) / 2.0,
                rotation=rotation,
                translation=-rotation @ center,
                image_width=image_width,
                image_height=image_height,
            )
        )
    return cams


# =======================
# Scene directories
# =======================
def export_views(views: Sequence[RenderedView], directory: Union[str, Path]) -> Path:
    """<dir>/images/NNN.png, cams/NNN.txt and, when present, depths/NNN.pfm and normals/NNN.pfm."""
    root = Path(directory)
    for sub in ("images", "cams", "depths", "normals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for index, view in enumerate(views):
        name = f"{index:03d}"
        save_png(root / "images" / f"{name}.png", view.image)
        write_camera(root / "cams" / f"{name}.txt", view.cam)
        if view.gt_depth is not None:
            write_depth(root / "depths" / f"{name}.pfm", view.gt_depth)
        if view.gt_normal is not None:
            save_normal_map(root / "normals" / f"{name}.pfm", view.gt_normal)
    logger.info("exported %d views to %s", len(views), root)
    return root


def load_scene_dir(directory: Union[str, Path]) -> List[RenderedView]:
    """Inverse of export_views; depth and normal maps are optional. View 000 is the reference."""
    root = Path(directory)
    image_paths = sorted((root / "images").glob("*.png"))
    if not image_paths:
        raise FormatError(f"{root}: no images/*.png found")
    views = []
    for image_path in image_paths:
        name = image_path.stem
        image = load_image(image_path)
        cam = read_camera(root / "cams" / f"{name}.txt", image_size=(image.shape[1], image.shape[0]))
        if cam.shape != image.shape[:2]:
            raise FormatError(f"{name}: camera size {cam.shape} does not match image {image.shape[:2]}")
        depth_path = root / "depths" / f"{name}.pfm"
        normal_path = root / "normals" / f"{name}.pfm"
        views.append(
            RenderedView(
                image=image,
                cam=cam,
                gt_depth=read_depth(depth_path) if depth_path.exists() else None,
                gt_normal=load_normal_map(normal_path) if normal_path.exists() else None,
            )
        )
    logger.info("loaded %d views from %s", len(views), root)
    return views
