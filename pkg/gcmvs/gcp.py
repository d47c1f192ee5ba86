"""Geometrically consistent propagation of neighboring costs and their aggregation.

For a reference pixel i and a neighbor j in a k x k window, the neighbor's
normal n_j fixes a local plane. Pixels on that plane satisfy
d_j = r_ji * d_i with r_ji = n.ray_i / n.ray_j, so the reference ladder
d_i^m maps to depths r_ji * d_i^m in j's space. j's cost is looked up there by
linear interpolation along j's own ladder and stored in the reference depth
space. The stacked k^2 * M channels are then mixed by a 1 x 1 x k_d kernel.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .costvol import CostVolume
from .errors import ConfigError, FormatError, ShapeError
from .geometry import DEFAULT_EPS_RAY, CameraModel, pixel_grid, pixel_rays, ray_depth_ratios
from .hypotheses import HypothesisVolume, map_hypotheses
from .normals import NormalMap

logger = logging.getLogger(__name__)

NORMAL_ANCHORS = ("neighbor", "reference")
OUT_OF_RANGE_MODES = ("clamp", "zero")
KERNEL_HEADER = struct.Struct("<3I")


# =======================
# Types
# =======================
@dataclass(frozen=True, eq=False)
class UnfoldedClues:
    hyps: np.ndarray  # (k^2, L, H, W)
    normals: np.ndarray  # (k^2, 3, H, W)
    u: np.ndarray  # (k^2, H, W) column of the pixel each slot reads
    v: np.ndarray  # (k^2, H, W) row of the pixel each slot reads
    k: int

    @property
    def center(self) -> int:
        return (self.k * self.k) // 2


@dataclass(frozen=True, eq=False)
class PropagatedCost:
    values: np.ndarray  # (k^2 * M, L, H, W), slot-major
    validity: np.ndarray  # (k^2, H, W)
    k: int

    @property
    def num_channels(self) -> int:
        return self.values.shape[0] // (self.k * self.k)

    def slot(self, index: int) -> np.ndarray:
        m = self.num_channels
        return self.values[index * m:(index + 1) * m]


@dataclass(frozen=True, eq=False)
class AggregationKernel:
    weights: np.ndarray  # (k^2, M, k_d)

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 3:
            raise ConfigError(f"kernel must be (k^2, M, k_d), got {weights.shape}")
        if weights.shape[2] % 2 == 0:
            raise ConfigError(f"kernel depth extent must be odd, got {weights.shape[2]}")
        object.__setattr__(self, "weights", weights)

    @property
    def depth_extent(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def uniform(cls, k: int, channels: int, depth_extent: int = 1) -> "AggregationKernel":
        """Average over slots and depth taps, identity over channels."""
        _check_window(k)
        weights = np.full((k * k, channels, depth_extent), 1.0 / (k * k * depth_extent))
        return cls(weights)

    @classmethod
    def center_slot(cls, k: int, channels: int) -> "AggregationKernel":
        _check_window(k)
        weights = np.zeros((k * k, channels, 1))
        weights[(k * k) // 2] = 1.0
        return cls(weights)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AggregationKernel":
        """Header of three uint32 LE (k^2, M, k_d) followed by float32 LE weights."""
        data = Path(path).read_bytes()
        if len(data) < KERNEL_HEADER.size:
            raise FormatError(f"{path}: kernel file too short")
        shape = KERNEL_HEADER.unpack_from(data)
        count = shape[0] * shape[1] * shape[2]
        body = data[KERNEL_HEADER.size:]
        if len(body) != 4 * count:
            raise FormatError(f"{path}: expected {count} weights for shape {shape}, found {len(body) // 4}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(shape))

    def save(self, path: Union[str, Path]) -> None:
        shape = self.weights.shape
        Path(path).write_bytes(KERNEL_HEADER.pack(*shape) + self.weights.astype("<f4").tobytes())


# =======================
# Helpers
# =======================
def _check_window(k: int) -> None:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ConfigError(f"window size must be a positive odd integer, got {k}")


def _window_offsets(k: int):
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def unfold(values: np.ndarray, k: int) -> np.ndarray:
    """(..., H, W) -> (k^2, ..., H, W) with edge replication, slots row-major."""
    _check_window(k)
    r = k // 2
    h, w = values.shape[-2:]
    pad = [(0, 0)] * (values.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(values, pad, mode="edge")
    return np.stack([padded[..., r + dy:r + dy + h, r + dx:r + dx + w] for dy, dx in _window_offsets(k)])


def fractional_indices(ladder: np.ndarray, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Locate query depths in strictly increasing per-pixel ladders.

    ladder: (L, H, W); query: (Q, H, W). Returns (lo, t) with lo in [0, L-2] and
    query = ladder[lo] + t * (ladder[lo+1] - ladder[lo]); t < 0 or t > 1 marks
    depths outside the ladder.
    """
    num = ladder.shape[0]
    lo = np.zeros(query.shape, dtype=np.intp)
    hi = np.full(query.shape, num - 1, dtype=np.intp)
    for _ in range(int(np.ceil(np.log2(max(num - 1, 1))))):
        mid = (lo + hi) // 2
        right = np.take_along_axis(ladder, mid, axis=0) <= query
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
    lower = np.take_along_axis(ladder, lo, axis=0)
    upper = np.take_along_axis(ladder, lo + 1, axis=0)
    return lo, (query - lower) / (upper - lower)


# =======================
# Operations
# =======================
def unfold_clues(hyps: HypothesisVolume, normals: NormalMap, k: int) -> UnfoldedClues:
    """Collect each pixel's k x k window of ladders and normals (invalid normals read as fronto-parallel)."""
    _check_window(k)
    if normals.shape != hyps.shape:
        raise ShapeError(f"normals {normals.shape} do not match hypotheses {hyps.shape}")
    height, width = hyps.shape
    u, v = pixel_grid(height, width)
    return UnfoldedClues(
        hyps=unfold(hyps.samples, k),
        normals=unfold(normals.filled(), k),
        u=unfold(u, k),
        v=unfold(v, k),
        k=int(k),
    )


def propagate_cost(
    cost: CostVolume,
    clues: UnfoldedClues,
    cam: CameraModel,
    normal_anchor: str = "neighbor",
    out_of_range: str = "clamp",
    eps_ray: float = DEFAULT_EPS_RAY,
) -> PropagatedCost:
    """Move each neighbor's cost into the reference pixel's depth space.

    `cam` is the reference camera at the cost volume's resolution.
    """
    if normal_anchor not in NORMAL_ANCHORS:
        raise ConfigError(f"normal_anchor must be one of {NORMAL_ANCHORS}, got {normal_anchor!r}")
    if out_of_range not in OUT_OF_RANGE_MODES:
        raise ConfigError(f"out_of_range must be one of {OUT_OF_RANGE_MODES}, got {out_of_range!r}")
    values = cost.values
    channels, num, height, width = values.shape
    slots = clues.k * clues.k
    if clues.hyps.shape != (slots, num, height, width):
        raise ShapeError(f"clues {clues.hyps.shape} do not match cost {values.shape}")
    if cam.shape != (height, width):
        raise ShapeError(f"camera {cam.shape} does not match cost {(height, width)}")

    center = clues.center
    ref_ladder = clues.hyps[center]
    rays_i = pixel_rays(clues.u[center], clues.v[center], cam)
    neighbor_costs = unfold(values, clues.k)

    out = np.empty((slots * channels, num, height, width), dtype=values.dtype)
    validity = np.empty((slots, height, width), dtype=bool)
    for s in range(slots):
        normal = clues.normals[s] if normal_anchor == "neighbor" else clues.normals[center]
        rays_j = pixel_rays(clues.u[s], clues.v[s], cam)
        ratio, valid = ray_depth_ratios(rays_i, rays_j, normal, eps_ray)
        mapped = map_hypotheses(ref_ladder, ratio)
        valid &= mapped.valid

        lo, t = fractional_indices(clues.hyps[s], mapped.depths)
        cost_j = neighbor_costs[s]
        lower = np.take_along_axis(cost_j, lo[None], axis=1)
        upper = np.take_along_axis(cost_j, lo[None] + 1, axis=1)
        if out_of_range == "zero":
            outside = (t < 0) | (t > 1)
            t = np.clip(t, 0.0, 1.0)
            slot_cost = np.where(outside[None], 0.0, (1.0 - t) * lower + t * upper)
        else:
            t = np.clip(t, 0.0, 1.0)
            slot_cost = (1.0 - t) * lower + t * upper
        slot_cost = np.where(valid[None, None], slot_cost, values)

        out[s * channels:(s + 1) * channels] = slot_cost
        validity[s] = valid

    skipped = int(np.count_nonzero(~validity))
    if skipped:
        logger.debug("propagate_cost: %d neighbor slots self-substituted", skipped)
    return PropagatedCost(values=out, validity=validity, k=clues.k)


def aggregate_propagated(prop: PropagatedCost, kernel: AggregationKernel) -> CostVolume:
    """1 x 1 x k_d convolution along hypotheses mixing slots channel by channel (zero-padded)."""
    slots = prop.k * prop.k
    channels = prop.num_channels
    if kernel.weights.shape[:2] != (slots, channels):
        raise ConfigError(f"kernel {kernel.weights.shape} inconsistent with k^2={slots}, M={channels}")
    depth_extent = kernel.depth_extent
    r = depth_extent // 2
    stacked = prop.values.reshape((slots, channels) + prop.values.shape[1:]).astype(np.float64)
    num = stacked.shape[2]
    padded = np.pad(stacked, [(0, 0), (0, 0), (r, r), (0, 0), (0, 0)])
    out = np.zeros(stacked.shape[1:], dtype=np.float64)
    for tap in range(depth_extent):
        out += np.einsum("sc,sclhw->clhw", kernel.weights[:, :, tap], padded[:, :, tap:tap + num])
    return CostVolume(values=out.astype(prop.values.dtype))


def unfold_cost(cost: CostVolume, k: int) -> PropagatedCost:
    """Neighbor costs stacked per slot without any depth remapping."""
    values = unfold(cost.values, k)
    slots = values.shape[0]
    stacked = values.reshape((slots * values.shape[1],) + values.shape[2:])
    validity = np.ones((slots,) + cost.values.shape[2:], dtype=bool)
    return PropagatedCost(values=stacked, validity=validity, k=k)


def standard_aggregate(cost: CostVolume, k: int, depth_extent: int) -> CostVolume:
    """Plain k x k x depth_extent box aggregation in hypothesis-index space."""
    kernel = AggregationKernel.uniform(k, cost.num_channels, depth_extent)
    out = aggregate_propagated(unfold_cost(cost, k), kernel)
    return CostVolume(values=out.values, hyps=cost.hyps)


def gcp_aggregate(
    cost: CostVolume,
    hyps: HypothesisVolume,
    normals: NormalMap,
    cam: CameraModel,
    k: int = 3,
    kernel: Optional[AggregationKernel] = None,
    normal_anchor: str = "neighbor",
    out_of_range: str = "clamp",
) -> CostVolume:
    """Unfold, propagate and aggregate in one call."""
    clues = unfold_clues(hyps, normals, k)
    prop = propagate_cost(cost, clues, cam, normal_anchor=normal_anchor, out_of_range=out_of_range)
    kernel = kernel or AggregationKernel.uniform(k, cost.num_channels)
    out = aggregate_propagated(prop, kernel)
    return CostVolume(values=out.values, hyps=hyps)
