"""Camera models, projection, plane-sweep correspondence and the planar depth ratio.

Conventions:
    - pixel (u, v): u is the column, v the row; integer values are pixel centers
    - extrinsics are world-to-camera: X_cam = R @ X_world + t
    - all geometry runs in float64
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import DegenerateRayError, PreconditionError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
UNIT_NORMAL_TOL = 1e-6
DEFAULT_EPS_RAY = 1e-8


# =======================
# Types
# =======================
class PixelCoord(NamedTuple):
    u: float
    v: float


class Point3D(NamedTuple):
    x: float
    y: float
    z: float


class SourceProjection(NamedTuple):
    pixel: PixelCoord
    depth: float
    valid: bool


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "image_width", int(self.image_width))
        object.__setattr__(self, "image_height", int(self.image_height))

        if self.image_width <= 0 or self.image_height <= 0:
            raise PreconditionError(f"image size must be positive, got {self.image_width}x{self.image_height}")
        if not (self.fx > 0 and self.fy > 0):
            raise PreconditionError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise PreconditionError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.image_width}x{self.image_height}"
            )
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise PreconditionError("extrinsics must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise PreconditionError("rotation is not orthonormal")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image_height, self.image_width

    def extrinsic_matrix(self) -> np.ndarray:
        """4x4 world-to-camera matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def scaled(self, level: int) -> "CameraModel":
        """Camera of the image box-downsampled 2x `level` times.

        A 2x2 box average puts the new pixel center u' at old coordinate 2u' + 0.5.
        """
        cam = self
        for _ in range(int(level)):
            cam = CameraModel(
                fx=cam.fx / 2.0,
                fy=cam.fy / 2.0,
                cx=(cam.cx - 0.5) / 2.0,
                cy=(cam.cy - 0.5) / 2.0,
                rotation=cam.rotation,
                translation=cam.translation,
                image_width=cam.image_width // 2,
                image_height=cam.image_height // 2,
            )
        return cam

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """(3, ...) world points -> (3, ...) camera points."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(3, -1)
        return (self.rotation @ flat + self.translation[:, None]).reshape(pts.shape)

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        """(3, ...) camera points -> (3, ...) world points."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(3, -1)
        return (self.rotation.T @ (flat - self.translation[:, None])).reshape(pts.shape)


# =======================
# Helpers
# =======================
def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """(u, v) float64 grids of shape (height, width)."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def pixel_rays(u, v, cam: CameraModel) -> np.ndarray:
    """Rays [(u-cx)/fx, (v-cy)/fy, 1] stacked on a leading axis of size 3."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)])


def back_project_array(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Vectorized back-projection; returns (3, ...) camera-frame points."""
    return pixel_rays(u, v, cam) * np.asarray(depth, dtype=np.float64)


def project_points(points: np.ndarray, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective projection of (3, ...) camera-frame points.

    Returns (u, v, z); u and v are NaN where z == 0.
    """
    x, y, z = np.asarray(points, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z != 0, z, np.nan)
        u = cam.fx * x / safe + cam.cx
        v = cam.fy * y / safe + cam.cy
    return u, v, z


def in_bounds(u, v, cam: CameraModel) -> np.ndarray:
    """True where (u, v) lies inside the pixel-center rectangle of the image."""
    u = np.asarray(u)
    v = np.asarray(v)
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u <= cam.image_width - 1) & (v >= 0) & (v <= cam.image_height - 1)


def relative_pose(ref_cam: CameraModel, src_cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """(R, t) mapping reference-camera points into the source camera frame."""
    rot = src_cam.rotation @ ref_cam.rotation.T
    trans = src_cam.translation - rot @ ref_cam.translation
    return rot, trans


def warp_pixels(u, v, depth, ref_cam: CameraModel, src_cam: CameraModel):
    """Plane-sweep correspondence for arrays of pixels and depths.

    Returns (u', v', z', valid): z' is the depth in the source frame and
    valid is False behind the source camera or outside its image.
    """
    rot, trans = relative_pose(ref_cam, src_cam)
    pts = back_project_array(u, v, depth, ref_cam)
    shape = pts.shape
    src_pts = (rot @ pts.reshape(3, -1) + trans[:, None]).reshape(shape)
    su, sv, sz = project_points(src_pts, src_cam)
    with np.errstate(invalid="ignore"):
        valid = (sz > 0) & in_bounds(su, sv, src_cam)
    return su, sv, sz, valid


# =======================
# Operations
# =======================
def back_project(p: PixelCoord, d: float, cam: CameraModel) -> Point3D:
    if not d > 0:
        raise PreconditionError(f"depth must be positive, got {d}")
    x = (p.u - cam.cx) / cam.fx * d
    y = (p.v - cam.cy) / cam.fy * d
    return Point3D(x, y, float(d))


def project_to_source(p: PixelCoord, d: float, ref_cam: CameraModel, src_cam: CameraModel) -> SourceProjection:
    if not d > 0:
        raise PreconditionError(f"depth must be positive, got {d}")
    su, sv, sz, valid = warp_pixels(np.float64(p.u), np.float64(p.v), np.float64(d), ref_cam, src_cam)
    return SourceProjection(PixelCoord(float(su), float(sv)), float(sz), bool(valid))


def ray_depth_ratios(rays_i: np.ndarray, rays_j: np.ndarray, normals: np.ndarray, eps_ray: float = DEFAULT_EPS_RAY):
    """Vectorized planar depth ratio d_j / d_i over leading-axis-3 arrays.

    Normals need not be unit length; the ratio is homogeneous of degree 0 in n.
    Returns (ratio, valid); valid is False for degenerate rays or non-positive ratios
    and ratio is 1 there.
    """
    num = np.sum(normals * rays_i, axis=0)
    den = np.sum(normals * rays_j, axis=0)
    scale = np.linalg.norm(normals, axis=0)
    degenerate = np.abs(den) < eps_ray * np.where(scale > 0, scale, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / np.where(degenerate, 1.0, den)
    valid = ~degenerate & (ratio > 0) & np.isfinite(ratio) & (scale > 0)
    return np.where(valid, ratio, 1.0), valid


def depth_ratio(
    p_i: PixelCoord,
    p_j: PixelCoord,
    n,
    cam: CameraModel,
    eps_ray: float = DEFAULT_EPS_RAY,
) -> float:
    """Depth ratio r_ji = d(p_j) / d(p_i) for two pixels on a plane with normal n.

    The plane and n live in the camera frame of `cam`.
    """
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > UNIT_NORMAL_TOL:
        raise PreconditionError(f"normal must be unit length, got |n|={np.linalg.norm(n)}")
    ray_i = pixel_rays(p_i.u, p_i.v, cam)
    ray_j = pixel_rays(p_j.u, p_j.v, cam)
    den = float(n @ ray_j)
    if abs(den) < eps_ray:
        raise DegenerateRayError(f"plane nearly parallel to the ray through ({p_j.u}, {p_j.v}): n.ray={den:.3e}")
    return float(n @ ray_i) / den


def camera_from_matrices(
    extrinsic: np.ndarray,
    intrinsic: np.ndarray,
    image_width: int,
    image_height: int,
) -> CameraModel:
    """Build a camera from a 3x4 (or 4x4) world-to-camera matrix and a 3x3 K."""
    ext = np.asarray(extrinsic, dtype=np.float64)
    k = np.asarray(intrinsic, dtype=np.float64)
    return CameraModel(
        fx=float(k[0, 0]),
        fy=float(k[1, 1]),
        cx=float(k[0, 2]),
        cy=float(k[1, 2]),
        rotation=ext[:3, :3],
        translation=ext[:3, 3],
        image_width=image_width,
        image_height=image_height,
    )


def look_at_rotation(center, target, up: Optional[np.ndarray] = None) -> np.ndarray:
    """World-to-camera rotation for a camera at `center` looking at `target`.

    Camera axes: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, -1.0, 0.0]) if up is None else np.asarray(up, dtype=np.float64)
    forward = target - center
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise PreconditionError("camera center coincides with the look-at target")
    z = forward / norm
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-12:
        raise PreconditionError("up vector parallel to viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])
