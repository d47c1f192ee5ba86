"""Surface normals: closed-form plane fits on depth maps, patch fusion and normal-map files.

Normal maps live in the reference camera frame (x right, y down, z forward)
and, unless an axis convention says otherwise, face the camera (n . X < 0).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.transform import Rotation

from .depthmap import DepthMap
from .errors import ConfigError, CoverageError, PreconditionError, ShapeError
from .fileio import read_pfm, write_pfm
from .geometry import CameraModel, back_project_array, pixel_grid

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6
FORMAT_TOL = 0.1
MAX_CONDITION = 1e12
GT_NORMAL_WINDOW = 5
FRONTO_PARALLEL = np.array([0.0, 0.0, -1.0])

AXIS_CONVENTIONS = {
    "camera": (1.0, 1.0, 1.0),
    "z-flip": (1.0, 1.0, -1.0),
    "opengl": (1.0, -1.0, -1.0),
}


# =======================
# Types
# =======================
@dataclass(frozen=True, eq=False)
class NormalMap:
    values: np.ndarray  # (3, H, W)
    validity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != 3:
            raise ShapeError(f"normal map must be (3, H, W), got {values.shape}")
        finite = np.all(np.isfinite(values), axis=0)
        values[:, ~finite] = 0.0
        norm = np.linalg.norm(values, axis=0)
        validity = finite & (norm > 0)
        if self.validity is not None:
            validity &= np.asarray(self.validity, dtype=bool)
        off_unit = validity & (np.abs(norm - 1.0) > UNIT_TOL)
        values[:, off_unit] /= norm[off_unit]
        values[:, ~validity] = 0.0
        values.setflags(write=False)
        validity.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def filled(self, fallback: np.ndarray = FRONTO_PARALLEL) -> np.ndarray:
        """Values with invalid pixels replaced by `fallback`."""
        return np.where(self.validity[None], self.values, np.asarray(fallback, dtype=np.float64)[:, None, None])

    @classmethod
    def constant(cls, normal, height: int, width: int) -> "NormalMap":
        normal = np.asarray(normal, dtype=np.float64).reshape(3, 1, 1)
        return cls(np.broadcast_to(normal, (3, height, width)))


@dataclass(frozen=True, eq=False)
class NormalPatch:
    values: np.ndarray  # (3, h, w)
    origin: Tuple[int, int]  # (row, col) of the top-left pixel
    margin: int = 0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != 3:
            raise ShapeError(f"normal patch must be (3, h, w), got {values.shape}")
        norm = np.linalg.norm(values, axis=0)
        if np.any(norm == 0) or not np.all(np.isfinite(values)):
            raise PreconditionError("normal patch holds zero or non-finite vectors")
        object.__setattr__(self, "values", values / norm)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


# =======================
# Depth to normal
# =======================
def depth_to_normal(
    depth: DepthMap,
    cam: CameraModel,
    window: int = 3,
    toward_camera: bool = True,
) -> NormalMap:
    """Least-squares plane n^T X = 1 through each pixel's window of back-projected points.

    `cam` must match the depth map's resolution.
    """
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ConfigError(f"normal window must be an odd integer >= 3, got {window}")
    height, width = depth.shape
    if cam.shape != (height, width):
        raise ShapeError(f"camera {cam.shape} does not match depth {depth.shape}")

    u, v = pixel_grid(height, width)
    points = back_project_array(u, v, depth.values, cam)
    r = window // 2
    padded_pts = np.pad(points, [(0, 0), (r, r), (r, r)])
    padded_mask = np.pad(depth.validity, r).astype(np.float64)
    win_pts = sliding_window_view(padded_pts, (window, window), axis=(1, 2)).reshape(3, height, width, -1)
    win_mask = sliding_window_view(padded_mask, (window, window)).reshape(height, width, -1)

    masked = win_pts * win_mask[None]
    ata = np.einsum("ahwk,bhwk->hwab", masked, win_pts)
    atb = masked.sum(axis=-1).transpose(1, 2, 0)
    count = win_mask.sum(axis=-1)

    candidate = depth.validity & (count >= 3)
    normals = np.zeros((height, width, 3))
    valid = np.zeros((height, width), dtype=bool)
    if np.any(candidate):
        sub_ata = ata[candidate]
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.linalg.cond(sub_ata)
        solvable = np.isfinite(cond) & (cond < MAX_CONDITION)
        solution = np.zeros((sub_ata.shape[0], 3))
        if np.any(solvable):
            solution[solvable] = np.linalg.solve(sub_ata[solvable], atb[candidate][solvable][..., None])[..., 0]
        norm = np.linalg.norm(solution, axis=-1)
        solvable &= norm > 0
        solution[solvable] /= norm[solvable][:, None]
        normals[candidate] = solution
        valid[candidate] = solvable

    # n^T X = 1 > 0 points away from the camera
    if toward_camera:
        normals = -normals
    return NormalMap(values=normals.transpose(2, 0, 1), validity=valid)


def gt_normal_from_gt_depth(depth: DepthMap, cam: CameraModel) -> NormalMap:
    return depth_to_normal(depth, cam, window=GT_NORMAL_WINDOW)


def downsample_normals(normal_map: NormalMap, level: int) -> NormalMap:
    """2x2 block average of valid normals `level` times, renormalized."""
    values = normal_map.values
    weight = normal_map.validity.astype(np.float64)
    for _ in range(int(level)):
        h, w = values.shape[1] // 2 * 2, values.shape[2] // 2 * 2
        values = values[:, :h, :w] * weight[None, :h, :w]
        weight = weight[:h, :w]
        values = values[:, 0::2, 0::2] + values[:, 1::2, 0::2] + values[:, 0::2, 1::2] + values[:, 1::2, 1::2]
        weight = weight[0::2, 0::2] + weight[1::2, 0::2] + weight[0::2, 1::2] + weight[1::2, 1::2]
        norm = np.linalg.norm(values, axis=0)
        values = np.where(norm > 0, values / np.where(norm > 0, norm, 1.0), 0.0)
        weight = (norm > 0).astype(np.float64)
    return NormalMap(values=values, validity=weight > 0)


def upsample_normals(normal_map: NormalMap, shape: Tuple[int, int]) -> NormalMap:
    """Nearest-neighbor resize to `shape`."""
    height, width = shape
    h, w = normal_map.shape
    rows = np.minimum(np.arange(height) * h // height, h - 1)
    cols = np.minimum(np.arange(width) * w // width, w - 1)
    return NormalMap(
        values=normal_map.values[:, rows][:, :, cols],
        validity=normal_map.validity[np.ix_(rows, cols)],
    )


# =======================
# Patch fusion
# =======================
def patch_rotation(target: np.ndarray, source: np.ndarray) -> Rotation:
    """Rotation R (Kabsch) minimizing sum |target - R source|^2 over (N, 3) vector sets."""
    rotation, _ = Rotation.align_vectors(np.asarray(target), np.asarray(source))
    return rotation


def _feather(patch: NormalPatch, height: int, width: int) -> np.ndarray:
    """Linear ramp over the overlap margin on edges that face another patch."""
    ph, pw = patch.shape
    row, col = patch.origin
    margin = patch.margin
    weights = np.ones((ph, pw))
    if margin <= 0:
        return weights
    ramp_r = np.minimum(1.0, (np.arange(ph) + 1.0) / (margin + 1.0))
    ramp_c = np.minimum(1.0, (np.arange(pw) + 1.0) / (margin + 1.0))
    if row > 0:
        weights *= ramp_r[:, None]
    if row + ph < height:
        weights *= ramp_r[::-1][:, None]
    if col > 0:
        weights *= ramp_c[None, :]
    if col + pw < width:
        weights *= ramp_c[::-1][None, :]
    return weights


def fuse_patch_normals(patches: Sequence[NormalPatch], height: int, width: int) -> NormalMap:
    """Align (rotation only) and feather-blend overlapping normal patches.

    Patches are processed in row-major order of their origins; the first is the
    anchor and every later patch is rotated onto the already-fused overlap.
    """
    if not patches:
        raise CoverageError("no normal patches given")
    ordered = sorted(patches, key=lambda p: p.origin)
    acc = np.zeros((3, height, width))
    wsum = np.zeros((height, width))

    for index, patch in enumerate(ordered):
        ph, pw = patch.shape
        row, col = patch.origin
        if row < 0 or col < 0 or row + ph > height or col + pw > width:
            raise PreconditionError(f"patch at {patch.origin} of size {ph}x{pw} leaves the {height}x{width} image")
        region = (slice(row, row + ph), slice(col, col + pw))
        values = patch.values

        overlap = wsum[region] > 0
        if index > 0 and np.any(overlap):
            target = acc[(slice(None),) + region][:, overlap]
            target = target / np.linalg.norm(target, axis=0)
            source = values[:, overlap]
            agreement = float(np.mean(np.sum(target * source, axis=0)))
            if agreement < 0:
                logger.warning(
                    "patch at %s: overlap normals nearly antipodal (mean dot %.3f); fused without rotation",
                    patch.origin,
                    agreement,
                )
            else:
                rotation = patch_rotation(target.T, source.T)
                logger.debug("patch at %s aligned by %.4g deg", patch.origin, np.degrees(rotation.magnitude()))
                values = rotation.apply(values.reshape(3, -1).T).T.reshape(values.shape)

        weights = _feather(patch, height, width)
        acc[(slice(None),) + region] += weights[None] * values
        wsum[region] += weights

    if np.any(wsum == 0):
        raise CoverageError(f"{int(np.count_nonzero(wsum == 0))} pixels are not covered by any patch")
    return NormalMap(values=acc / np.linalg.norm(acc, axis=0))


# =======================
# Files
# =======================
def apply_axis_convention(values: np.ndarray, axis_convention: str) -> np.ndarray:
    if axis_convention not in AXIS_CONVENTIONS:
        raise ConfigError(f"unknown axis convention {axis_convention!r}; expected one of {sorted(AXIS_CONVENTIONS)}")
    signs = np.asarray(AXIS_CONVENTIONS[axis_convention]).reshape(3, 1, 1)
    return values * signs


def load_normal_map(path: Union[str, Path], axis_convention: str = "camera") -> NormalMap:
    """Read a 3-channel PFM normal map (top-down rows) and bring it into the camera convention."""
    data = read_pfm(path, top_down=True)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError(f"{path}: expected a 3-channel normal map, got {data.shape}")
    values = np.transpose(data, (2, 0, 1)).astype(np.float64)
    norm = np.linalg.norm(values, axis=0)
    nonzero = norm > 0
    off = nonzero & (np.abs(norm - 1.0) > FORMAT_TOL)
    if np.any(off):
        logger.warning("%s: %d normals deviate from unit length by more than %.1f", path, int(np.count_nonzero(off)), FORMAT_TOL)
    return NormalMap(values=apply_axis_convention(values, axis_convention))


def save_normal_map(path: Union[str, Path], normal_map: NormalMap, axis_convention: str = "camera") -> None:
    values = apply_axis_convention(normal_map.values, axis_convention)
    write_pfm(path, np.transpose(values, (1, 2, 0)), top_down=True)


def load_normal_patches(paths: Sequence[Union[str, Path]], origins: Sequence[Tuple[int, int]], margin: int) -> List[NormalPatch]:
    """Normal patch files with their placements, e.g. outputs of a monocular normal network."""
    if len(paths) != len(origins):
        raise PreconditionError(f"{len(paths)} patch files but {len(origins)} origins")
    return [NormalPatch(values=load_normal_map(p).values, origin=o, margin=margin) for p, o in zip(paths, origins)]
