"""Geometric consistency filtering of per-view depth maps and point-cloud fusion."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .costvol import sample_bilinear
from .depthmap import DepthMap
from .errors import InsufficientViewsError, PreconditionError, ShapeError
from .fileio import write_ply as write_ply_file
from .geometry import CameraModel, back_project_array, pixel_grid, project_points

logger = logging.getLogger(__name__)

# bilinear validity samples below this touch an invalid source pixel
FULL_SUPPORT = 1.0 - 1e-9


# =======================
# Types
# =======================
@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) world coordinates
    source_view: np.ndarray  # (N,) view index
    confidence: np.ndarray  # (N,)
    colors: Optional[np.ndarray] = None  # (N, 3) uint8

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise PreconditionError("point cloud holds non-finite coordinates")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "source_view", np.asarray(self.source_view, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=np.float64).reshape(-1))
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3))

    def __len__(self) -> int:
        return self.points.shape[0]


# =======================
# Filtering
# =======================
def _check_against(
    ref_depth: DepthMap,
    ref_cam: CameraModel,
    src_depth: DepthMap,
    src_cam: CameraModel,
    tau_pix: float,
    tau_rel: float,
) -> np.ndarray:
    """Pixels of the reference depth map confirmed by one source depth map."""
    u, v = pixel_grid(*ref_depth.shape)
    world = ref_cam.camera_to_world(back_project_array(u, v, ref_depth.values, ref_cam))
    su, sv, sz = project_points(src_cam.world_to_camera(world), src_cam)

    src_values = sample_bilinear(src_depth.values[None], su, sv)[0]
    support = sample_bilinear(src_depth.validity[None].astype(np.float64), su, sv)[0]
    found = ref_depth.validity & (sz > 0) & (support >= FULL_SUPPORT) & (src_values > 0)

    safe_src = np.where(found, src_values, 1.0)
    back = src_cam.camera_to_world(back_project_array(su, sv, safe_src, src_cam))
    ru, rv, rz = project_points(ref_cam.world_to_camera(back), ref_cam)

    with np.errstate(invalid="ignore"):
        reprojection = np.hypot(ru - u, rv - v)
        relative = np.abs(sz - safe_src) / safe_src
        return found & (rz > 0) & (reprojection < tau_pix) & (relative < tau_rel)


def consistency_filter(
    depths: Sequence[DepthMap],
    confidences: Optional[Sequence[np.ndarray]],
    cams: Sequence[CameraModel],
    tau_pix: float = 1.0,
    tau_rel: float = 0.01,
    min_views: int = 2,
    confidence_floor: float = 0.0,
) -> List[np.ndarray]:
    """Per-view masks of pixels confirmed by at least `min_views` other views.

    `cams` must match the depth maps' resolution. Confidences default to 1.
    """
    if len(depths) < 2:
        raise InsufficientViewsError(f"consistency filtering needs at least 2 views, got {len(depths)}")
    if len(cams) != len(depths) or (confidences is not None and len(confidences) != len(depths)):
        raise ShapeError("depths, confidences and cameras must have one entry per view")
    for depth, cam in zip(depths, cams):
        if cam.shape != depth.shape:
            raise ShapeError(f"camera {cam.shape} does not match depth {depth.shape}")

    masks = []
    for ref_index, (ref_depth, ref_cam) in enumerate(zip(depths, cams)):
        votes = np.zeros(ref_depth.shape, dtype=np.int64)
        for src_index, (src_depth, src_cam) in enumerate(zip(depths, cams)):
            if src_index == ref_index:
                continue
            votes += _check_against(ref_depth, ref_cam, src_depth, src_cam, tau_pix, tau_rel)
        mask = ref_depth.validity & (votes >= min_views)
        if confidences is not None:
            mask &= np.asarray(confidences[ref_index]) >= confidence_floor
        logger.info(
            "view %d: %d of %d valid pixels pass the consistency check",
            ref_index,
            int(np.count_nonzero(mask)),
            int(np.count_nonzero(ref_depth.validity)),
        )
        masks.append(mask)
    return masks


# =======================
# Fusion
# =======================
def voxel_dedup(points: np.ndarray, confidence: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of the most confident point per voxel, in ascending order."""
    keys = np.floor(points / voxel_size).astype(np.int64)
    # sort by voxel, then by descending confidence, then by original order
    order = np.lexsort((np.arange(len(points)), -confidence, keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    return np.sort(order[first])


def fuse_point_cloud(
    depths: Sequence[DepthMap],
    masks: Sequence[np.ndarray],
    cams: Sequence[CameraModel],
    images: Optional[Sequence[np.ndarray]] = None,
    confidences: Optional[Sequence[np.ndarray]] = None,
    voxel_size: float = 0.0,
) -> PointCloud:
    """Back-project surviving pixels to world space; voxel_size > 0 keeps one point per voxel."""
    if not (len(depths) == len(masks) == len(cams)):
        raise ShapeError("depths, masks and cameras must have one entry per view")
    points, views, conf, colors = [], [], [], []
    for index, (depth, mask, cam) in enumerate(zip(depths, masks, cams)):
        keep = np.asarray(mask, dtype=bool) & depth.validity
        v, u = np.nonzero(keep)
        cam_pts = back_project_array(u.astype(np.float64), v.astype(np.float64), depth.values[keep], cam)
        points.append(cam.camera_to_world(cam_pts).T)
        views.append(np.full(u.size, index, dtype=np.int64))
        conf.append(np.ones(u.size) if confidences is None else np.asarray(confidences[index])[keep])
        if images is not None:
            colors.append(np.round(np.clip(np.asarray(images[index])[keep], 0.0, 1.0) * 255.0).astype(np.uint8))

    all_points = np.concatenate(points) if points else np.zeros((0, 3))
    all_views = np.concatenate(views) if views else np.zeros(0, dtype=np.int64)
    all_conf = np.concatenate(conf) if conf else np.zeros(0)
    all_colors = np.concatenate(colors) if images is not None and colors else None

    if len(all_points) == 0:
        logger.warning("no pixel survived filtering; the fused cloud is empty")
    elif voxel_size > 0:
        keep = voxel_dedup(all_points, all_conf, voxel_size)
        logger.info("voxel dedup (size %.4g): %d -> %d points", voxel_size, len(all_points), len(keep))
        all_points, all_views, all_conf = all_points[keep], all_views[keep], all_conf[keep]
        if all_colors is not None:
            all_colors = all_colors[keep]
    return PointCloud(points=all_points, source_view=all_views, confidence=all_conf, colors=all_colors)


def write_ply(path: Union[str, Path], cloud: PointCloud) -> None:
    write_ply_file(path, cloud.points, cloud.colors)


def plane_distances(cloud: PointCloud, point, normal) -> np.ndarray:
    """Unsigned point-to-plane distances for a plane through `point` with `normal`."""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    return np.abs((cloud.points - np.asarray(point, dtype=np.float64)) @ normal)


def plane_rms(cloud: PointCloud, point, normal) -> float:
    if len(cloud) == 0:
        return float("nan")
    return float(np.sqrt(np.mean(plane_distances(cloud, point, normal) ** 2)))
