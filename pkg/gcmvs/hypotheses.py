"""Per-pixel depth hypotheses for the three-stage cascade and their remapping between pixels."""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .depthmap import DepthMap
from .errors import ConfigError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)


# =======================
# Types
# =======================
@dataclass(frozen=True)
class StageConfig:
    num_samples: int
    interval_scale: float
    depth_min: Optional[float] = None
    depth_max: Optional[float] = None

    def __post_init__(self) -> None:
        if int(self.num_samples) < 2:
            raise ConfigError(f"num_samples must be >= 2, got {self.num_samples}")
        if not self.interval_scale > 0:
            raise ConfigError(f"interval_scale must be > 0, got {self.interval_scale}")
        if self.depth_min is not None or self.depth_max is not None:
            if self.depth_min is None or self.depth_max is None:
                raise ConfigError("depth_min and depth_max must be given together")
            if not 0 < self.depth_min < self.depth_max:
                raise ConfigError(f"need 0 < depth_min < depth_max, got [{self.depth_min}, {self.depth_max}]")

    @property
    def depth_range(self) -> Tuple[float, float]:
        if self.depth_min is None:
            raise ConfigError("stage has no depth range")
        return float(self.depth_min), float(self.depth_max)


@dataclass(frozen=True, eq=False)
class HypothesisVolume:
    samples: np.ndarray  # (L, H, W) float64
    stage: int
    interval: float

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 3 or samples.shape[0] < 2:
            raise ShapeError(f"hypotheses must be (L>=2, H, W), got {samples.shape}")
        if not np.all(samples > 0):
            raise PreconditionError("depth hypotheses must be positive")
        if not np.all(np.diff(samples, axis=0) > 0):
            raise PreconditionError("depth hypotheses must be strictly increasing along L")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.samples.shape[1], self.samples.shape[2]


class MappedHypotheses(NamedTuple):
    depths: np.ndarray
    valid: np.ndarray


# =======================
# Operations
# =======================
def sample_initial(cfg: StageConfig, height: int, width: int, stage: int = 0) -> HypothesisVolume:
    """Uniform ladder over [depth_min, depth_max], identical for every pixel."""
    depth_min, depth_max = cfg.depth_range
    ladder = np.linspace(depth_min, depth_max, int(cfg.num_samples))
    samples = np.broadcast_to(ladder[:, None, None], (ladder.size, height, width)).copy()
    interval = (depth_max - depth_min) / (cfg.num_samples - 1)
    return HypothesisVolume(samples=samples, stage=stage, interval=interval)


def upsample_nearest(values: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """2x nearest-neighbor upsampling of the last two axes, edge-padded or cropped to `shape`."""
    up = np.repeat(np.repeat(values, 2, axis=-2), 2, axis=-1)
    height, width = shape
    pad_h = max(0, height - up.shape[-2])
    pad_w = max(0, width - up.shape[-1])
    if pad_h or pad_w:
        pad = [(0, 0)] * (up.ndim - 2) + [(0, pad_h), (0, pad_w)]
        up = np.pad(up, pad, mode="edge")
    return up[..., :height, :width]


def refine_cascade(
    prev_depth: DepthMap,
    cfg: StageConfig,
    base_interval: float,
    depth_range: Tuple[float, float],
    shape: Optional[Tuple[int, int]] = None,
    stage: int = 1,
) -> HypothesisVolume:
    """Recenter a uniform ladder on the upsampled previous-stage depth.

    The ladder is shifted (not squeezed) to stay inside depth_range so samples
    stay strictly increasing; pixels without a previous depth get the uniform
    stage-0 style ladder over the whole range.
    """
    if not base_interval > 0:
        raise ConfigError(f"base_interval must be > 0, got {base_interval}")
    depth_min, depth_max = depth_range
    prev_h, prev_w = prev_depth.values.shape
    shape = shape or (2 * prev_h, 2 * prev_w)

    center = upsample_nearest(prev_depth.values, shape)
    known = upsample_nearest(prev_depth.validity, shape)

    num = int(cfg.num_samples)
    spacing = cfg.interval_scale * base_interval
    offsets = (np.arange(num, dtype=np.float64) - (num - 1) / 2.0) * spacing
    half_width = offsets[-1]

    fallback = np.linspace(depth_min, depth_max, num)
    if 2 * half_width > depth_max - depth_min:
        logger.warning(
            "stage %d ladder (%.4g wide) exceeds the depth range; using a uniform ladder",
            stage,
            2 * half_width,
        )
        samples = np.broadcast_to(fallback[:, None, None], (num,) + tuple(shape)).copy()
        return HypothesisVolume(samples=samples, stage=stage, interval=(depth_max - depth_min) / (num - 1))

    center = np.clip(np.where(known, center, depth_min + half_width), depth_min + half_width, depth_max - half_width)
    samples = np.clip(center[None] + offsets[:, None, None], depth_min, depth_max)
    samples = np.where(known[None], samples, fallback[:, None, None])
    missing = int(np.count_nonzero(~known))
    if missing:
        logger.debug("stage %d: %d pixels without previous depth use the full range", stage, missing)
    return HypothesisVolume(samples=samples, stage=stage, interval=spacing)


def map_hypotheses(ref_hyps, r_ji) -> MappedHypotheses:
    """Scale a reference ladder (L leading axis) into a neighbor's depth space.

    Non-positive ratios mark the neighbor invalid; its entries keep the
    reference depths so callers can self-substitute.
    """
    hyps = np.asarray(ref_hyps, dtype=np.float64)
    ratio = np.asarray(r_ji, dtype=np.float64)
    valid = np.isfinite(ratio) & (ratio > 0)
    scale = np.where(valid, ratio, 1.0)
    if not np.all(valid):
        logger.debug("map_hypotheses: %d non-positive ratios skipped", int(np.count_nonzero(~valid)))
    return MappedHypotheses(depths=hyps * scale, valid=valid)
