"""Patch descriptors, two-view correlation volumes and weighted multi-view aggregation."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import PreconditionError, ShapeError, SizeError
from .geometry import CameraModel, pixel_grid, warp_pixels
from .hypotheses import HypothesisVolume

logger = logging.getLogger(__name__)

NUM_CHANNELS = 12
WEIGHT_FLOOR = 1e-3
NORM_FLOOR = 1e-6
# keeps absolute intensity from swamping the patch-structure channels
INTENSITY_WEIGHT = 0.1
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


# =======================
# Types
# =======================
@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (M, H, W)
    scale: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 3 or values.shape[0] < 1:
            raise ShapeError(f"feature map must be (M>=1, H, W), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise PreconditionError("feature map contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True, eq=False)
class CostVolume:
    values: np.ndarray  # (M, L, H, W)
    hyps: Optional[HypothesisVolume] = None
    visible: Optional[np.ndarray] = None  # (L, H, W) bool, two-view volumes only

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise ShapeError(f"cost volume must be (M, L, H, W), got {values.shape}")
        if self.hyps is not None and values.shape[1:] != self.hyps.samples.shape:
            raise ShapeError(f"cost {values.shape} inconsistent with hypotheses {self.hyps.samples.shape}")
        if not np.all(np.isfinite(values)):
            raise PreconditionError("cost volume contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.visible is not None:
            visible = np.asarray(self.visible, dtype=bool)
            if visible.shape != values.shape[1:]:
                raise ShapeError(f"visibility {visible.shape} does not match cost {values.shape}")
            object.__setattr__(self, "visible", visible)

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    def summed(self) -> np.ndarray:
        """(L, H, W) channel sum, i.e. the dot-product correlation."""
        return self.values.sum(axis=0)


@dataclass(frozen=True, eq=False)
class ViewWeightMap:
    values: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"weight map must be 2-D, got {values.shape}")
        if np.any(values < 0) or np.any(values > 1):
            raise PreconditionError("view weights must lie in [0, 1]")
        object.__setattr__(self, "values", values)


# =======================
# Features
# =======================
def downsample_image(image: np.ndarray, level: int) -> np.ndarray:
    """2x box downsampling `level` times over the first two axes (odd rows/cols are cropped)."""
    out = np.asarray(image, dtype=np.float64)
    for _ in range(int(level)):
        h, w = out.shape[0] // 2 * 2, out.shape[1] // 2 * 2
        out = out[:h, :w]
        out = 0.25 * (out[0::2, 0::2] + out[1::2, 0::2] + out[0::2, 1::2] + out[1::2, 1::2])
    return out


def extract_features(image: np.ndarray, level: int = 0) -> FeatureMap:
    """12-channel unit-norm descriptor per pixel.

    Channels: intensity centered on mid-gray (scaled by INTENSITY_WEIGHT),
    horizontal and vertical gradient, and the mean-subtracted 3x3 patch
    (row-major). Each descriptor is scaled to unit length, so the
    channel-summed correlation of two descriptors is a cosine.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise PreconditionError("image values must lie in [0, 1]")
    small = downsample_image(image, level)
    if small.shape[0] < 3 or small.shape[1] < 3:
        raise SizeError(f"image is {small.shape[0]}x{small.shape[1]} at level {level}; need at least 3x3")

    gray = small @ GRAY_WEIGHTS
    grad_v, grad_u = np.gradient(gray)
    padded = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    patch = np.stack([padded[r:r + h, c:c + w] for r in range(3) for c in range(3)])
    patch = patch - patch.mean(axis=0, keepdims=True)

    desc = np.concatenate([INTENSITY_WEIGHT * (gray - 0.5)[None], grad_u[None], grad_v[None], patch])
    return FeatureMap(values=_unit_descriptors(desc).astype(np.float32), scale=int(level))


def _unit_descriptors(desc: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=0, keepdims=True)
    return desc / np.maximum(norm, NORM_FLOOR)


# =======================
# Cost volumes
# =======================
def sample_bilinear(values: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (C, H, W) values at float coordinates; returns (C,) + u.shape."""
    coords = np.stack([v, u])
    coords = np.nan_to_num(coords, nan=-1.0, posinf=-1.0, neginf=-1.0)
    return np.stack(
        [map_coordinates(channel, coords, order=1, mode="constant", cval=0.0) for channel in values]
    )


def two_view_correlation(
    ref_feat: FeatureMap,
    src_feat: FeatureMap,
    hyps: HypothesisVolume,
    ref_cam: CameraModel,
    src_cam: CameraModel,
) -> CostVolume:
    """Channel-wise product of reference and warped source descriptors per hypothesis.

    Cameras are the full-resolution models; they are rescaled to the feature level.
    Out-of-frustum samples score 0 in every channel and are marked in `visible`.
    """
    if ref_feat.scale != src_feat.scale or ref_feat.values.shape[0] != src_feat.values.shape[0]:
        raise ShapeError(f"feature scales differ: {ref_feat.scale} vs {src_feat.scale}")
    if hyps.shape != ref_feat.shape:
        raise ShapeError(f"hypotheses {hyps.shape} do not match features {ref_feat.shape}")
    ref_level = ref_cam.scaled(ref_feat.scale)
    src_level = src_cam.scaled(src_feat.scale)
    if src_level.shape != src_feat.shape:
        raise ShapeError(f"source camera {src_level.shape} does not match source features {src_feat.shape}")

    u, v = pixel_grid(*ref_feat.shape)
    su, sv, _, valid = warp_pixels(u[None], v[None], hyps.samples, ref_level, src_level)
    warped = sample_bilinear(src_feat.values.astype(np.float64), su, sv)
    warped = _unit_descriptors(warped) * valid[None]

    values = ref_feat.values.astype(np.float64)[:, None] * warped
    return CostVolume(values=values.astype(np.float32), hyps=hyps, visible=valid)


def compute_view_weights(two_view_vols: Sequence[CostVolume], floor: float = WEIGHT_FLOOR) -> List[ViewWeightMap]:
    """Per-view pixel weights: best correlation over hypotheses, clamped to [floor, 1].

    Descriptors are unit length, so the channel-summed correlation is already a
    cosine in [-1, 1].
    """
    if not two_view_vols:
        raise PreconditionError("at least one source view is required")
    weights = []
    for vol in two_view_vols:
        best = vol.summed().astype(np.float64).max(axis=0)
        weights.append(ViewWeightMap(values=np.clip(best, floor, 1.0)))
    return weights


def upsample_weights(weights: Sequence[ViewWeightMap], shape: Tuple[int, int]) -> List[ViewWeightMap]:
    """Nearest 2x upsampling of stage-0 weights for a finer stage."""
    height, width = shape
    out = []
    for weight in weights:
        h, w = weight.values.shape
        rows = np.minimum(np.arange(height) * h // height, h - 1)
        cols = np.minimum(np.arange(width) * w // width, w - 1)
        out.append(ViewWeightMap(values=weight.values[np.ix_(rows, cols)]))
    return out


def aggregate_views(two_view_vols: Sequence[CostVolume], weights: Sequence[ViewWeightMap]) -> CostVolume:
    """C = sum_i W_i * V_i / sum_i W_i, broadcast over channels and hypotheses.

    When every volume carries a visibility mask, the denominator only counts
    views that see the hypothesis; hypotheses no view sees aggregate to 0.
    """
    if len(two_view_vols) != len(weights) or not two_view_vols:
        raise ShapeError(f"{len(two_view_vols)} volumes vs {len(weights)} weight maps")
    shape = two_view_vols[0].values.shape
    for vol, weight in zip(two_view_vols, weights):
        if vol.values.shape != shape or weight.values.shape != shape[2:]:
            raise ShapeError("two-view volumes and weight maps must share one shape")
    dtype = np.result_type(*[vol.values.dtype for vol in two_view_vols])
    masked = all(vol.visible is not None for vol in two_view_vols)

    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape[1:] if masked else shape[2:], dtype=np.float64)
    for vol, weight in zip(two_view_vols, weights):
        w = weight.values * vol.visible if masked else weight.values
        num += w * vol.values.astype(np.float64)
        den += w
    values = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return CostVolume(values=values.astype(dtype), hyps=two_view_vols[0].hyps)
