"""End-to-end runs: scene setup, the three-stage cascade, fusion, reports and ablations."""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import AGGREGATION_MODES, NUM_STAGES, PipelineConfig
from .costvol import (
    NUM_CHANNELS,
    aggregate_views,
    compute_view_weights,
    extract_features,
    two_view_correlation,
    upsample_weights,
)
from .depthmap import (
    DepthMap,
    DepthMetrics,
    cross_entropy,
    depth_metrics,
    downsample_depth,
    interior_mask,
    softmax_probability,
    winner_takes_all,
)
from .errors import ComparisonError, PreconditionError, UndefinedLossError
from .fileio import FORMAT_VERSION, save_depth_preview, write_depth, write_pfm
from .fusion import PointCloud, consistency_filter, fuse_point_cloud, plane_rms, write_ply
from .gcp import AggregationKernel, gcp_aggregate, standard_aggregate
from .hypotheses import HypothesisVolume, refine_cascade, sample_initial
from .normals import (
    FRONTO_PARALLEL,
    NormalMap,
    depth_to_normal,
    downsample_normals,
    load_normal_map,
    upsample_normals,
)
from .synth import (
    Plane,
    RenderedView,
    SceneSpec,
    Sphere,
    TextureSpec,
    load_scene_dir,
    make_rig,
    render_rig,
    slanted_plane,
)

logger = logging.getLogger(__name__)


# =======================
# Types
# =======================
@dataclass
class SceneInputs:
    views: List[RenderedView]
    spec: Optional[SceneSpec] = None

    @property
    def plane(self) -> Optional[Plane]:
        if self.spec is not None and isinstance(self.spec.primitive, Plane):
            return self.spec.primitive
        return None


@dataclass
class StageResult:
    stage: int
    level: int
    hyps: HypothesisVolume
    depth: DepthMap
    confidence: np.ndarray
    cross_entropy: Optional[float] = None
    metrics: Optional[DepthMetrics] = None


@dataclass
class RunReport:
    run_dir: Path
    config: PipelineConfig
    stages: List[StageResult]  # reference view
    final_depths: List[DepthMap]
    gt_depth: Optional[DepthMap]
    metrics: Optional[DepthMetrics]
    cloud: Optional[PointCloud]
    plane_rms: Optional[float]
    runtime_s: float
    files: List[str] = field(default_factory=list)

    @property
    def depth(self) -> DepthMap:
        return self.stages[-1].depth


@dataclass
class AblationResult:
    table: str
    records: List[Dict]
    reports: List[RunReport]


# =======================
# Scene
# =======================
def build_scene(config: PipelineConfig) -> SceneInputs:
    scene = config.scene
    if scene.kind == "directory":
        return SceneInputs(views=load_scene_dir(scene.directory))

    texture = TextureSpec(
        frequency=scene.frequency,
        octaves=scene.octaves,
        seed=scene.texture_seed,
        contrast=scene.contrast,
    )
    if scene.kind == "plane":
        primitive = slanted_plane(depth=scene.depth, slant_deg=scene.slant_deg)
        look_at = primitive.point
    else:
        primitive = Sphere(center=tuple(scene.center), radius=scene.radius)
        look_at = primitive.center
    spec = SceneSpec(primitive=primitive, texture=texture, extent=scene.extent)
    cams = make_rig(
        scene.n_views,
        scene.baseline,
        look_at=look_at,
        image_width=scene.width,
        image_height=scene.height,
        focal=scene.focal,
    )
    views = render_rig(
        spec,
        cams,
        noise_sigma=scene.noise_sigma,
        seed=config.seed,
        decorrelated_view=scene.decorrelated_view,
    )
    logger.info("rendered %d views of a %s scene at %dx%d", len(views), scene.kind, scene.width, scene.height)
    return SceneInputs(views=views, spec=spec)


# =======================
# Cascade
# =======================
def _load_kernel(config: PipelineConfig) -> Optional[AggregationKernel]:
    gcp = config.gcp
    if gcp.mode != "gcp":
        return None
    if gcp.kernel_path:
        kernel = AggregationKernel.from_file(gcp.kernel_path)
        logger.info("loaded aggregation kernel %s from %s", kernel.weights.shape, gcp.kernel_path)
        return kernel
    return AggregationKernel.uniform(gcp.k, NUM_CHANNELS, gcp.depth_extent)


def _file_normals(config: PipelineConfig, view_index: int) -> Optional[NormalMap]:
    path = Path(config.normals.path)
    if path.is_dir():
        path = path / f"{view_index:03d}.pfm"
    elif view_index != 0:
        return None
    if not path.is_file():
        return None
    return load_normal_map(path, axis_convention=config.normals.axis_convention)


def stage_normals(
    config: PipelineConfig,
    view: RenderedView,
    view_index: int,
    level: int,
    shape,
    prev: Optional[StageResult],
) -> NormalMap:
    """Normal cue for one stage of one reference view, at the stage's resolution."""
    source = config.normals.source
    full = None
    if source == "gt":
        if view.gt_normal is None:
            raise PreconditionError(f"view {view_index} has no ground-truth normals; use normals.source=from-depth")
        full = view.gt_normal
    elif source == "file":
        full = _file_normals(config, view_index)
        if full is None:
            logger.warning("view %d: no normal file; estimating normals from depth", view_index)
    if full is not None:
        if full.shape != view.cam.shape:
            raise PreconditionError(f"normal map {full.shape} does not match image {view.cam.shape}")
        normals = downsample_normals(full, level)
        return normals if normals.shape == tuple(shape) else upsample_normals(normals, shape)

    if prev is None:
        return NormalMap.constant(FRONTO_PARALLEL, *shape)
    coarse = depth_to_normal(prev.depth, view.cam.scaled(prev.level), window=config.normals.window)
    return upsample_normals(coarse, shape)


def estimate_depth(
    views: Sequence[RenderedView],
    ref_index: int,
    config: PipelineConfig,
    kernel: Optional[AggregationKernel] = None,
) -> List[StageResult]:
    """Run the cascade with `views[ref_index]` as reference and every other view as source."""
    ref = views[ref_index]
    sources = [view for index, view in enumerate(views) if index != ref_index]
    stages = config.effective_stages()
    base_interval = config.resolved_base_interval()
    depth_range = config.depth_range
    mode = config.gcp.mode
    thresholds = config.metrics.thresholds

    results: List[StageResult] = []
    stage0_weights = None
    prev: Optional[StageResult] = None
    for stage, stage_cfg in enumerate(stages):
        level = NUM_STAGES - 1 - stage
        ref_feat = extract_features(ref.image, level)
        src_feats = [extract_features(view.image, level) for view in sources]
        shape = ref_feat.shape
        if prev is None:
            hyps = sample_initial(stage_cfg, *shape, stage=stage)
        else:
            hyps = refine_cascade(prev.depth, stage_cfg, base_interval, depth_range, shape=shape, stage=stage)

        vols = [two_view_correlation(ref_feat, feat, hyps, ref.cam, view.cam) for feat, view in zip(src_feats, sources)]
        if stage0_weights is None:
            stage0_weights = compute_view_weights(vols)
            weights = stage0_weights
        else:
            weights = upsample_weights(stage0_weights, shape)
        cost = aggregate_views(vols, weights)

        if mode == "gcp":
            normals = stage_normals(config, ref, ref_index, level, shape, prev)
            cost = gcp_aggregate(
                cost,
                hyps,
                normals,
                ref.cam.scaled(level),
                k=config.gcp.k,
                kernel=kernel,
                normal_anchor=config.gcp.normal_anchor,
                out_of_range=config.gcp.out_of_range,
            )
        else:
            cost = standard_aggregate(cost, config.gcp.k, AGGREGATION_MODES[mode])

        prob = softmax_probability(cost, temperature=config.temperature)
        depth = winner_takes_all(prob, hyps, parabola_refinement=config.parabola_refinement)
        result = StageResult(stage=stage, level=level, hyps=hyps, depth=depth, confidence=prob.confidence)

        if ref.gt_depth is not None:
            gt = downsample_depth(ref.gt_depth, level)
            try:
                result.cross_entropy = cross_entropy(prob, gt, hyps)
            except UndefinedLossError:
                logger.warning("stage %d: GT outside every ladder; cross-entropy undefined", stage)
            mask = interior_mask(gt.validity, max(1, config.metrics.border >> level))
            result.metrics = depth_metrics(depth, gt, thresholds, mask=mask)
            logger.info(
                "view %d stage %d (%dx%d, L=%d): MAE %.4f, CE %s",
                ref_index,
                stage,
                shape[1],
                shape[0],
                hyps.num_samples,
                result.metrics.mae,
                "n/a" if result.cross_entropy is None else f"{result.cross_entropy:.4f}",
            )
        results.append(result)
        prev = result
    return results


# =======================
# Runs
# =======================
def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_pipeline(config: PipelineConfig, scene: Optional[SceneInputs] = None) -> RunReport:
    """Validate, reconstruct, fuse and write a self-describing run directory.

    Layout: config.yaml, manifest.json, metrics.json, cloud.ply and
    depth/viewNNN_stageS.pfm (+ confidence and PNG previews).
    """
    started = time.perf_counter()
    config.validate()
    run_dir = Path(config.output_dir) / config.name
    (run_dir / "depth").mkdir(parents=True, exist_ok=True)
    config.to_yaml(run_dir / "config.yaml")

    scene = scene or build_scene(config)
    views = scene.views
    if len(views) < 2:
        raise PreconditionError(f"need at least 2 views, got {len(views)}")
    kernel = _load_kernel(config)

    files = ["config.yaml"]
    refs = range(len(views)) if config.fusion.enabled else [0]
    per_view: Dict[int, List[StageResult]] = {}
    for ref_index in refs:
        results = estimate_depth(views, ref_index, config, kernel=kernel)
        per_view[ref_index] = results
        for result in results:
            name = f"view{ref_index:03d}_stage{result.stage}"
            write_depth(run_dir / "depth" / f"{name}.pfm", result.depth)
            write_pfm(run_dir / "depth" / f"{name}_conf.pfm", result.confidence)
            files += [f"depth/{name}.pfm", f"depth/{name}_conf.pfm"]
        save_depth_preview(run_dir / "depth" / f"view{ref_index:03d}.png", results[-1].depth)
        files.append(f"depth/view{ref_index:03d}.png")

    reference = per_view[0]
    final_depths = [per_view[i][-1].depth for i in refs]
    gt_depth = views[0].gt_depth
    final_metrics = reference[-1].metrics

    cloud = None
    rms = None
    if config.fusion.enabled:
        fusion = config.fusion
        cams = [view.cam for view in views]
        confidences = [per_view[i][-1].confidence for i in refs]
        masks = consistency_filter(
            final_depths,
            confidences,
            cams,
            tau_pix=fusion.tau_pix,
            tau_rel=fusion.tau_rel,
            min_views=fusion.min_views,
            confidence_floor=fusion.confidence_floor,
        )
        voxel = fusion.voxel_size or config.final_interval()
        cloud = fuse_point_cloud(
            final_depths,
            masks,
            cams,
            images=[view.image for view in views],
            confidences=confidences,
            voxel_size=voxel,
        )
        write_ply(run_dir / "cloud.ply", cloud)
        files.append("cloud.ply")
        if scene.plane is not None:
            rms = plane_rms(cloud, scene.plane.point, scene.plane.normal)
            logger.info("fused %d points, RMS distance to the plane %.4g", len(cloud), rms)

    runtime = time.perf_counter() - started
    metrics = {
        "name": config.name,
        "mode": config.gcp.mode,
        "normal_source": config.normals.source,
        "final_interval": config.final_interval(),
        "stages": [
            {
                "stage": r.stage,
                "samples": r.hyps.num_samples,
                "interval": r.hyps.interval,
                "cross_entropy": r.cross_entropy,
                "metrics": r.metrics.to_dict() if r.metrics else None,
            }
            for r in reference
        ],
        "final": final_metrics.to_dict() if final_metrics else None,
        "points": len(cloud) if cloud is not None else None,
        "plane_rms": rms,
        "runtime_s": runtime,
    }
    _write_json(run_dir / "metrics.json", metrics)
    files.append("metrics.json")
    _write_json(
        run_dir / "manifest.json",
        {"gcmvs_version": __version__, "formats": FORMAT_VERSION, "files": sorted(files)},
    )
    logger.info("run %s finished in %.1f s -> %s", config.name, runtime, run_dir)
    return RunReport(
        run_dir=run_dir,
        config=config,
        stages=reference,
        final_depths=final_depths,
        gt_depth=gt_depth,
        metrics=final_metrics,
        cloud=cloud,
        plane_rms=rms,
        runtime_s=runtime,
        files=sorted(files),
    )


# =======================
# Ablation
# =======================
def _scene_key(config: PipelineConfig) -> Dict:
    data = config.to_dict()
    return {"scene": data["scene"], "seed": data["seed"]}


def format_table(records: Sequence[Dict]) -> str:
    thresholds = sorted({t for r in records for t in r["within"]}, key=float)
    header = ["name", "mode", "normals", "MAE"] + [f"<={t}" for t in thresholds] + ["runtime_s"]
    rows = []
    for r in records:
        rows.append(
            [r["name"], r["mode"], r["normals"], f"{r['mae']:.5f}"]
            + [f"{r['within'].get(t, float('nan')):.4f}" for t in thresholds]
            + [f"{r['runtime_s']:.1f}"]
        )
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def run_ablation(configs: Sequence[PipelineConfig], output_dir: Optional[Path] = None) -> AblationResult:
    """Run each config on one shared scene and tabulate the final-stage metrics."""
    if not configs:
        raise PreconditionError("run_ablation needs at least one config")
    if len(configs) < 2:
        raise PreconditionError("an ablation compares at least two configs")
    key = _scene_key(configs[0])
    for config in configs[1:]:
        if _scene_key(config) != key:
            raise ComparisonError(f"config {config.name!r} uses a different scene or seed than {configs[0].name!r}")
    seen: Dict[Tuple[str, str], str] = {}
    for config in configs:
        variant = (config.gcp.mode, config.normals.source)
        if variant in seen:
            raise PreconditionError(
                f"configs {seen[variant]!r} and {config.name!r} share mode {variant[0]!r}"
                f" and normal source {variant[1]!r}"
            )
        seen[variant] = config.name

    for config in configs:
        config.validate()
    scene = build_scene(configs[0])
    reports, records = [], []
    for config in configs:
        report = run_pipeline(config, scene=scene)
        if report.metrics is None:
            raise ComparisonError(f"config {config.name!r} produced no metrics (scene has no GT depth)")
        reports.append(report)
        records.append(
            {
                "name": config.name,
                "mode": config.gcp.mode,
                "normals": config.normals.source,
                "mae": report.metrics.mae,
                "within": {str(t): v for t, v in report.metrics.within.items()},
                "valid_fraction": report.metrics.valid_fraction,
                "runtime_s": report.runtime_s,
            }
        )
    table = format_table(records)
    logger.info("ablation:\n%s", table)
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "ablation.txt").write_text(table + "\n")
        _write_json(output_dir / "ablation.json", {"records": records})
    return AblationResult(table=table, records=records, reports=reports)
