"""Probability volumes, winner-takes-all depth, cross-entropy scoring and depth metrics."""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import binary_erosion

from .errors import EmptyMetricsError, PreconditionError, ShapeError, UndefinedLossError

if TYPE_CHECKING:
    from .costvol import CostVolume
    from .hypotheses import HypothesisVolume

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


# =======================
# Types
# =======================
@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    validity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"depth map must be 2-D, got {values.shape}")
        finite_positive = np.isfinite(values) & (values > 0)
        if self.validity is None:
            validity = finite_positive
        else:
            validity = np.asarray(self.validity, dtype=bool)
            if validity.shape != values.shape:
                raise ShapeError(f"validity {validity.shape} does not match depth {values.shape}")
            validity = validity & finite_positive
        values[~validity] = 0.0
        values.setflags(write=False)
        validity = validity.copy()
        validity.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    values: np.ndarray  # (L, H, W)
    confidence: np.ndarray = field(default=None)  # (H, W)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeError(f"probability volume must be (L, H, W), got {values.shape}")
        if np.any(values < 0):
            raise PreconditionError("probabilities must be non-negative")
        object.__setattr__(self, "values", values)
        if self.confidence is None:
            object.__setattr__(self, "confidence", values.max(axis=0))


@dataclass
class DepthMetrics:
    mae: float
    within: Dict[float, float]
    valid_fraction: float
    count: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "within": {str(k): v for k, v in self.within.items()},
            "valid_fraction": self.valid_fraction,
            "count": self.count,
        }


# =======================
# Operations
# =======================
def softmax_probability(cost: Union["CostVolume", np.ndarray], temperature: float = 1.0) -> ProbabilityVolume:
    """Channel-sum the cost, then softmax over hypotheses per pixel."""
    values = cost.values if hasattr(cost, "values") else np.asarray(cost)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 4:
        values = values.sum(axis=0)
    if values.ndim != 3:
        raise ShapeError(f"cost must be (M, L, H, W) or (L, H, W), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise PreconditionError("cost volume contains non-finite values")
    if not temperature > 0:
        raise PreconditionError(f"temperature must be positive, got {temperature}")
    logits = values / temperature
    logits = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(logits)
    return ProbabilityVolume(values=exp / exp.sum(axis=0, keepdims=True))


def winner_takes_all(
    prob: ProbabilityVolume,
    hyps: "HypothesisVolume",
    parabola_refinement: bool = False,
) -> DepthMap:
    """Depth at the most probable hypothesis; ties go to the smaller index."""
    samples = hyps.samples
    if samples.shape != prob.values.shape:
        raise ShapeError(f"hypotheses {samples.shape} do not match probabilities {prob.values.shape}")
    best = np.argmax(prob.values, axis=0)
    depth = np.take_along_axis(samples, best[None], axis=0)[0]
    if parabola_refinement:
        depth = _parabola_refine(prob.values, samples, best, depth)
    return DepthMap(values=depth, validity=np.isfinite(depth) & (depth > 0))


def _parabola_refine(prob: np.ndarray, samples: np.ndarray, best: np.ndarray, depth: np.ndarray) -> np.ndarray:
    num = prob.shape[0]
    inner = (best > 0) & (best < num - 1)
    lo = np.clip(best - 1, 0, num - 1)[None]
    hi = np.clip(best + 1, 0, num - 1)[None]
    p_lo = np.take_along_axis(prob, lo, axis=0)[0]
    p_mid = np.take_along_axis(prob, best[None], axis=0)[0]
    p_hi = np.take_along_axis(prob, hi, axis=0)[0]
    curvature = p_lo - 2.0 * p_mid + p_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(curvature < 0, 0.5 * (p_lo - p_hi) / curvature, 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    d_lo = np.take_along_axis(samples, lo, axis=0)[0]
    d_hi = np.take_along_axis(samples, hi, axis=0)[0]
    step = np.where(offset > 0, d_hi - depth, depth - d_lo)
    return np.where(inner, depth + offset * step, depth)


def cross_entropy(prob: ProbabilityVolume, gt_depth: DepthMap, hyps: "HypothesisVolume") -> float:
    """Mean over unmasked pixels of -log P at the hypothesis nearest the GT depth."""
    samples = hyps.samples
    if samples.shape != prob.values.shape or gt_depth.shape != samples.shape[1:]:
        raise ShapeError("probabilities, hypotheses and GT depth must agree in shape")
    gt = gt_depth.values
    mask = gt_depth.validity & (gt >= samples[0]) & (gt <= samples[-1])
    if not np.any(mask):
        raise UndefinedLossError("all pixels are masked (GT invalid or outside the hypothesis range)")
    nearest = np.argmin(np.abs(samples - gt[None]), axis=0)
    p_true = np.take_along_axis(prob.values, nearest[None], axis=0)[0]
    loss = -np.log(np.maximum(p_true[mask], LOG_FLOOR))
    return float(loss.mean())


def depth_metrics(
    pred: DepthMap,
    gt: DepthMap,
    thresholds: Sequence[float],
    mask: Optional[np.ndarray] = None,
) -> DepthMetrics:
    """MAE and within-threshold fractions over jointly valid pixels.

    `mask` optionally restricts the evaluation region (e.g. interior pixels).
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and GT {gt.shape} differ in size")
    region = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    reference = gt.validity & region
    joint = reference & pred.validity
    count = int(np.count_nonzero(joint))
    if count == 0:
        raise EmptyMetricsError("prediction and GT share no valid pixel")
    err = np.abs(pred.values[joint] - gt.values[joint])
    within = {float(t): float(np.count_nonzero(err <= t)) / count for t in thresholds}
    return DepthMetrics(
        mae=float(err.mean()),
        within=within,
        valid_fraction=count / int(np.count_nonzero(reference)),
        count=count,
    )


def interior_mask(validity: np.ndarray, border: int) -> np.ndarray:
    """Valid pixels at least `border` pixels away from the image edge and from invalid pixels."""
    mask = np.asarray(validity, dtype=bool)
    if border <= 0:
        return mask.copy()
    eroded = binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), iterations=border, border_value=0)
    return eroded


def downsample_depth(depth: DepthMap, level: int) -> DepthMap:
    """2x2 block average `level` times; a block is valid only if all four pixels are."""
    values = depth.values
    valid = depth.validity
    for _ in range(int(level)):
        h, w = values.shape[0] // 2 * 2, values.shape[1] // 2 * 2
        values, valid = values[:h, :w], valid[:h, :w]
        values = 0.25 * (values[0::2, 0::2] + values[1::2, 0::2] + values[0::2, 1::2] + values[1::2, 1::2])
        valid = valid[0::2, 0::2] & valid[1::2, 0::2] & valid[0::2, 1::2] & valid[1::2, 1::2]
    return DepthMap(values=values, validity=valid)
