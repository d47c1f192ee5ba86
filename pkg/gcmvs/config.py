"""Pipeline configuration: environment defaults, YAML files and validation."""
import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .errors import ConfigError
from .gcp import NORMAL_ANCHORS, OUT_OF_RANGE_MODES
from .hypotheses import StageConfig
from .normals import AXIS_CONVENTIONS

logger = logging.getLogger(__name__)

# =======================
# ENV / SETTINGS
# =======================
LOG_LEVEL = (os.getenv("GCMVS_LOG_LEVEL") or "INFO").strip().upper()
OUTPUT_DIR = (os.getenv("GCMVS_OUTPUT_DIR") or "runs").strip()
SEED = int((os.getenv("GCMVS_SEED") or "0").strip())

# aggregation mode -> depth extent of the plain box kernel (None: geometric propagation)
AGGREGATION_MODES: Dict[str, Optional[int]] = {
    "gcp": None,
    "standard-k3": 3,
    "standard-depth5": 5,
    "standard-depth7": 7,
}
NORMAL_SOURCES = ("gt", "from-depth", "file")
SCENE_KINDS = ("plane", "sphere", "directory")
NUM_STAGES = 3
MIN_IMAGE_SIDE = 12  # 3x3 pixels at the coarsest (quarter) resolution


def _default_stages() -> List[StageConfig]:
    return [
        StageConfig(num_samples=48, interval_scale=4.0, depth_min=6.0, depth_max=16.0),
        StageConfig(num_samples=32, interval_scale=1.0),
        StageConfig(num_samples=8, interval_scale=0.5),
    ]


# =======================
# Sections
# =======================
@dataclass
class GcpSettings:
    mode: str = "gcp"
    k: int = 3
    depth_extent: int = 1
    normal_anchor: str = "neighbor"
    out_of_range: str = "clamp"
    kernel_path: Optional[str] = None


@dataclass
class NormalSettings:
    source: str = "gt"
    path: Optional[str] = None
    axis_convention: str = "camera"
    window: int = 3


@dataclass
class FusionSettings:
    enabled: bool = True
    tau_pix: float = 1.0
    tau_rel: float = 0.01
    min_views: int = 2
    confidence_floor: float = 0.0
    voxel_size: float = 0.0  # 0: final-stage interval


@dataclass
class SceneSettings:
    kind: str = "plane"
    directory: Optional[str] = None
    depth: float = 10.0
    slant_deg: float = 35.0
    center: List[float] = field(default_factory=lambda: [0.0, 0.0, 10.0])
    radius: float = 3.0
    extent: Optional[float] = None
    frequency: float = 2.0
    octaves: int = 4
    texture_seed: int = 0
    contrast: float = 1.5
    n_views: int = 5
    baseline: float = 1.5
    width: int = 160
    height: int = 128
    focal: Optional[float] = None
    noise_sigma: float = 0.0
    decorrelated_view: Optional[int] = None


@dataclass
class MetricsSettings:
    thresholds: List[float] = field(default_factory=lambda: [0.05, 0.1, 0.25])
    border: int = 4


@dataclass
class PipelineConfig:
    name: str = "run"
    stages: List[StageConfig] = field(default_factory=_default_stages)
    base_interval: Optional[float] = None  # None: stage-0 spacing / stage-0 interval_scale
    last_stage_halving: bool = False
    temperature: float = 0.1
    parabola_refinement: bool = False
    gcp: GcpSettings = field(default_factory=GcpSettings)
    normals: NormalSettings = field(default_factory=NormalSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    scene: SceneSettings = field(default_factory=SceneSettings)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)
    output_dir: str = OUTPUT_DIR
    seed: int = SEED

    # ---- derived values ----
    @property
    def depth_range(self) -> Tuple[float, float]:
        return self.stages[0].depth_range

    def resolved_base_interval(self) -> float:
        if self.base_interval is not None:
            return float(self.base_interval)
        stage0 = self.stages[0]
        depth_min, depth_max = stage0.depth_range
        return (depth_max - depth_min) / (stage0.num_samples - 1) / stage0.interval_scale

    def effective_stages(self) -> List[StageConfig]:
        """Stages with the last interval halved when `last_stage_halving` is set."""
        stages = list(self.stages)
        if self.last_stage_halving:
            last = stages[-1]
            stages[-1] = dataclasses.replace(last, interval_scale=last.interval_scale / 2.0)
        return stages

    def final_interval(self) -> float:
        return self.effective_stages()[-1].interval_scale * self.resolved_base_interval()

    # ---- validation ----
    def validate(self) -> "PipelineConfig":
        """Collect every problem, then raise one ConfigError listing them all."""
        problems: List[str] = []
        if len(self.stages) != NUM_STAGES:
            problems.append(f"stages: expected {NUM_STAGES} stages, got {len(self.stages)}")
        elif self.stages[0].depth_min is None:
            problems.append("stages[0]: depth_min and depth_max are required")
        if self.base_interval is not None and not self.base_interval > 0:
            problems.append(f"base_interval: must be > 0, got {self.base_interval}")
        if not self.temperature > 0:
            problems.append(f"temperature: must be > 0, got {self.temperature}")

        gcp = self.gcp
        if gcp.mode not in AGGREGATION_MODES:
            problems.append(f"gcp.mode: {gcp.mode!r} not in {sorted(AGGREGATION_MODES)}")
        if not _is_odd_positive(gcp.k):
            problems.append(f"gcp.k: must be a positive odd integer, got {gcp.k}")
        if not _is_odd_positive(gcp.depth_extent):
            problems.append(f"gcp.depth_extent: must be a positive odd integer, got {gcp.depth_extent}")
        if gcp.normal_anchor not in NORMAL_ANCHORS:
            problems.append(f"gcp.normal_anchor: {gcp.normal_anchor!r} not in {list(NORMAL_ANCHORS)}")
        if gcp.out_of_range not in OUT_OF_RANGE_MODES:
            problems.append(f"gcp.out_of_range: {gcp.out_of_range!r} not in {list(OUT_OF_RANGE_MODES)}")
        if gcp.kernel_path and not Path(gcp.kernel_path).is_file():
            problems.append(f"gcp.kernel_path: {gcp.kernel_path} does not exist")

        normals = self.normals
        if normals.source not in NORMAL_SOURCES:
            problems.append(f"normals.source: {normals.source!r} not in {list(NORMAL_SOURCES)}")
        if normals.source == "file" and not normals.path:
            problems.append("normals.path: required when normals.source is 'file'")
        if normals.path and normals.source == "file" and not _is_file_or_dir(normals.path):
            problems.append(f"normals.path: {normals.path} does not exist")
        if normals.axis_convention not in AXIS_CONVENTIONS:
            problems.append(f"normals.axis_convention: {normals.axis_convention!r} not in {sorted(AXIS_CONVENTIONS)}")
        if not (_is_odd_positive(normals.window) and normals.window >= 3):
            problems.append(f"normals.window: must be an odd integer >= 3, got {normals.window}")

        fusion = self.fusion
        if not fusion.tau_pix > 0:
            problems.append(f"fusion.tau_pix: must be > 0, got {fusion.tau_pix}")
        if not fusion.tau_rel > 0:
            problems.append(f"fusion.tau_rel: must be > 0, got {fusion.tau_rel}")
        if int(fusion.min_views) < 1:
            problems.append(f"fusion.min_views: must be >= 1, got {fusion.min_views}")
        if fusion.voxel_size < 0:
            problems.append(f"fusion.voxel_size: must be >= 0, got {fusion.voxel_size}")

        scene = self.scene
        if scene.kind not in SCENE_KINDS:
            problems.append(f"scene.kind: {scene.kind!r} not in {list(SCENE_KINDS)}")
        if scene.kind == "directory":
            if not scene.directory:
                problems.append("scene.directory: required when scene.kind is 'directory'")
            elif not Path(scene.directory).is_dir():
                problems.append(f"scene.directory: {scene.directory} is not a directory")
        else:
            if int(scene.n_views) < 2:
                problems.append(f"scene.n_views: must be >= 2, got {scene.n_views}")
            if not scene.baseline > 0:
                problems.append(f"scene.baseline: must be > 0, got {scene.baseline}")
            if min(int(scene.width), int(scene.height)) < MIN_IMAGE_SIDE:
                problems.append(f"scene.width/height: each must be >= {MIN_IMAGE_SIDE}")
            if len(scene.center) != 3:
                problems.append(f"scene.center: expected 3 coordinates, got {scene.center}")
            if not scene.radius > 0:
                problems.append(f"scene.radius: must be > 0, got {scene.radius}")
            if scene.noise_sigma < 0:
                problems.append(f"scene.noise_sigma: must be >= 0, got {scene.noise_sigma}")
            if scene.decorrelated_view is not None and not 1 <= scene.decorrelated_view < scene.n_views:
                problems.append(f"scene.decorrelated_view: must be a source view in [1, {scene.n_views}), got {scene.decorrelated_view}")

        if not self.metrics.thresholds or any(not t > 0 for t in self.metrics.thresholds):
            problems.append(f"metrics.thresholds: need positive values, got {self.metrics.thresholds}")
        if int(self.metrics.border) < 0:
            problems.append(f"metrics.border: must be >= 0, got {self.metrics.border}")

        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems), problems)
        return self

    # ---- (de)serialization ----
    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "PipelineConfig":
        data = dict(data or {})
        problems: List[str] = []
        sections = {
            "gcp": GcpSettings,
            "normals": NormalSettings,
            "fusion": FusionSettings,
            "scene": SceneSettings,
            "metrics": MetricsSettings,
        }
        kwargs: Dict[str, Any] = {}
        for name, section_cls in sections.items():
            if name in data:
                kwargs[name] = _build(section_cls, data.pop(name), name, problems)
        if "stages" in data:
            kwargs["stages"] = _build_stages(data.pop("stages"), problems)
        known = {f.name for f in fields(cls)}
        for key in sorted(set(data) - known):
            problems.append(f"{key}: unknown key")
        kwargs.update({k: v for k, v in data.items() if k in known})
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems), problems)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        logger.debug("loaded config from %s", path)
        return cls.from_dict(data)


# =======================
# Helpers
# =======================
def _is_odd_positive(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value > 0 and value % 2 == 1


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(section_cls, data, prefix: str, problems: List[str]):
    if data is None:
        return section_cls()
    if not isinstance(data, dict):
        problems.append(f"{prefix}: expected a mapping")
        return section_cls()
    known = {f.name for f in fields(section_cls)}
    for key in sorted(set(data) - known):
        problems.append(f"{prefix}.{key}: unknown key")
    return section_cls(**{k: v for k, v in data.items() if k in known})


def _build_stages(data, problems: List[str]) -> List[StageConfig]:
    if not isinstance(data, list):
        problems.append("stages: expected a list")
        return _default_stages()
    stages = []
    for index, entry in enumerate(data):
        if not isinstance(entry, dict):
            problems.append(f"stages[{index}]: expected a mapping")
            continue
        try:
            stages.append(StageConfig(**entry))
        except (ConfigError, TypeError) as exc:
            problems.append(f"stages[{index}]: {exc}")
    return stages


def set_option(config: PipelineConfig, dotted: str, value: Any) -> None:
    """Assign e.g. "fusion.tau_pix" on a config in place."""
    target: Any = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown option {dotted!r}")
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise ConfigError(f"unknown option {dotted!r}")
    setattr(target, parts[-1], value)


def _is_file_or_dir(path: str) -> bool:
    # a directory holds one NNN.pfm per view
    return Path(path).is_file() or Path(path).is_dir()
