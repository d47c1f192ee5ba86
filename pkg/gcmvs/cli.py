"""Command line: run, ablate, synth, fuse, eval and normals.

Exit status: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from .config import AGGREGATION_MODES, LOG_LEVEL, NORMAL_SOURCES, SCENE_KINDS, PipelineConfig, set_option
from .depthmap import depth_metrics, interior_mask
from .errors import ConfigError, GcmvsError, UsageError
from .fileio import read_depth, read_pfm
from .fusion import consistency_filter, fuse_point_cloud, write_ply
from .hypotheses import StageConfig
from .normals import AXIS_CONVENTIONS, fuse_patch_normals, load_normal_patches, save_normal_map
from .pipeline import build_scene, run_ablation, run_pipeline
from .synth import export_views, load_scene_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _words(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _origin(text: str):
    values = _floats(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"origin must be 'row,col', got {text!r}")
    return int(values[0]), int(values[1])


# flag dest -> dotted config option
OVERRIDES = {
    "name": "name",
    "output_dir": "output_dir",
    "seed": "seed",
    "base_interval": "base_interval",
    "temperature": "temperature",
    "mode": "gcp.mode",
    "k": "gcp.k",
    "depth_extent": "gcp.depth_extent",
    "normal_anchor": "gcp.normal_anchor",
    "out_of_range": "gcp.out_of_range",
    "kernel": "gcp.kernel_path",
    "normal_source": "normals.source",
    "normal_path": "normals.path",
    "axis_convention": "normals.axis_convention",
    "normal_window": "normals.window",
    "tau_pix": "fusion.tau_pix",
    "tau_rel": "fusion.tau_rel",
    "min_views": "fusion.min_views",
    "confidence_floor": "fusion.confidence_floor",
    "voxel_size": "fusion.voxel_size",
    "scene_kind": "scene.kind",
    "scene_dir": "scene.directory",
    "n_views": "scene.n_views",
    "baseline": "scene.baseline",
    "width": "scene.width",
    "height": "scene.height",
    "focal": "scene.focal",
    "slant": "scene.slant_deg",
    "noise_sigma": "scene.noise_sigma",
    "texture_seed": "scene.texture_seed",
    "decorrelated_view": "scene.decorrelated_view",
    "thresholds": "metrics.thresholds",
    "border": "metrics.border",
}


# =======================
# Parser
# =======================
def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML pipeline config; flags override its values")
    p.add_argument("--name", help="run name (subdirectory of the output dir)")
    p.add_argument("--output-dir", help="root directory for runs (env GCMVS_OUTPUT_DIR)")
    p.add_argument("--seed", type=int, help="random seed (env GCMVS_SEED)")

    g = p.add_argument_group("cascade")
    g.add_argument("--samples", type=_floats, help="samples per stage, e.g. 48,32,8")
    g.add_argument("--intervals", type=_floats, help="interval scales per stage, e.g. 4,1,0.5")
    g.add_argument("--depth-range", type=_floats, help="stage-0 depth range 'min,max'")
    g.add_argument("--base-interval", type=float, help="unit the interval scales multiply")
    g.add_argument("--last-stage-halving", action="store_true", default=None, help="halve the last stage interval")
    g.add_argument("--temperature", type=float, help="softmax temperature")
    g.add_argument("--parabola", action="store_true", default=None, help="3-bin parabola refinement after WTA")

    g = p.add_argument_group("aggregation")
    g.add_argument("--mode", choices=sorted(AGGREGATION_MODES))
    g.add_argument("--k", type=int, help="propagation window size (odd)")
    g.add_argument("--depth-extent", type=int, help="depth taps of the aggregation kernel (odd)")
    g.add_argument("--normal-anchor", choices=["neighbor", "reference"])
    g.add_argument("--out-of-range", choices=["clamp", "zero"])
    g.add_argument("--kernel", help="binary aggregation kernel file")

    g = p.add_argument_group("normals")
    g.add_argument("--normal-source", choices=list(NORMAL_SOURCES))
    g.add_argument("--normal-path", help="normal map file, or a directory of NNN.pfm files")
    g.add_argument("--axis-convention", choices=sorted(AXIS_CONVENTIONS))
    g.add_argument("--normal-window", type=int)

    g = p.add_argument_group("fusion")
    g.add_argument("--no-fusion", action="store_true", help="reconstruct the reference view only")
    g.add_argument("--tau-pix", type=float)
    g.add_argument("--tau-rel", type=float)
    g.add_argument("--min-views", type=int)
    g.add_argument("--confidence-floor", type=float)
    g.add_argument("--voxel-size", type=float, help="0 derives it from the final interval")

    g = p.add_argument_group("scene")
    g.add_argument("--scene-kind", choices=list(SCENE_KINDS))
    g.add_argument("--scene-dir", help="directory with images/ and cams/ (scene kind 'directory')")
    g.add_argument("--n-views", type=int)
    g.add_argument("--baseline", type=float)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--focal", type=float)
    g.add_argument("--slant", type=float, help="plane slant in degrees")
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--texture-seed", type=int)
    g.add_argument("--decorrelated-view", type=int)

    g = p.add_argument_group("metrics")
    g.add_argument("--thresholds", type=_floats, help="comma-separated error thresholds in scene units")
    g.add_argument("--border", type=int, help="interior margin in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcmvs", description="Geometrically consistent cost aggregation for multi-view stereo")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="reconstruct a scene through the three-stage cascade")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("ablate", help="compare aggregation modes / normal sources on one scene")
    _add_config_flags(p)
    p.add_argument("--configs", type=Path, nargs="+", help="explicit config files, one row each")
    p.add_argument("--modes", type=_words, help="comma-separated aggregation modes")
    p.add_argument("--normal-sources", type=_words, help="comma-separated normal sources (gcp rows)")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("synth", help="render a synthetic scene to disk")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="scene directory (default <output>/<name>/scene)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fuse", help="filter and fuse existing depth maps into a PLY cloud")
    _add_config_flags(p)
    p.add_argument("--depth-dir", type=Path, required=True, help="directory of NNN.pfm depth maps")
    p.add_argument("--conf-dir", type=Path, help="directory of NNN.pfm confidence maps")
    p.add_argument("--out", type=Path, required=True, help="output PLY file")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("eval", help="depth metrics of a predicted PFM against a GT PFM")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--thresholds", type=_floats, default=[0.05, 0.1, 0.25])
    p.add_argument("--border", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the metrics as JSON")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("normals", help="align and fuse overlapping normal patches into one map")
    p.add_argument("--patches", type=Path, nargs="+", required=True, help="3-channel PFM patch files")
    p.add_argument("--origins", type=_origin, nargs="+", required=True, help="'row,col' per patch")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--margin", type=int, default=0, help="overlap width used for feathering")
    p.add_argument("--axis-convention", choices=sorted(AXIS_CONVENTIONS), default="camera")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_normals)
    return parser


# =======================
# Config assembly
# =======================
def load_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.from_yaml(args.config) if args.config else PipelineConfig()
    for dest, dotted in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_option(config, dotted, value)
    if getattr(args, "last_stage_halving", None):
        config.last_stage_halving = True
    if getattr(args, "parabola", None):
        config.parabola_refinement = True
    if getattr(args, "no_fusion", False):
        config.fusion.enabled = False
    _override_stages(config, args)
    return config.validate()


def _override_stages(config: PipelineConfig, args: argparse.Namespace) -> None:
    samples = getattr(args, "samples", None)
    intervals = getattr(args, "intervals", None)
    depth_range = getattr(args, "depth_range", None)
    if samples is None and intervals is None and depth_range is None:
        return
    stages = config.stages
    for name, values in (("--samples", samples), ("--intervals", intervals)):
        if values is not None and len(values) != len(stages):
            raise UsageError(f"{name} needs {len(stages)} values, got {len(values)}")
    if depth_range is not None and len(depth_range) != 2:
        raise UsageError(f"--depth-range needs 'min,max', got {depth_range}")
    rebuilt = []
    for index, stage in enumerate(stages):
        d_min, d_max = (depth_range if depth_range and index == 0 else (stage.depth_min, stage.depth_max))
        rebuilt.append(
            StageConfig(
                num_samples=int(samples[index]) if samples else stage.num_samples,
                interval_scale=intervals[index] if intervals else stage.interval_scale,
                depth_min=d_min,
                depth_max=d_max,
            )
        )
    config.stages = rebuilt


# =======================
# Commands
# =======================
def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args)
    report = run_pipeline(config)
    if report.metrics is not None:
        print(f"{config.name}: MAE {report.metrics.mae:.5f} over {report.metrics.count} pixels")
    if report.cloud is not None:
        print(f"{config.name}: {len(report.cloud)} fused points")
    print(f"run directory: {report.run_dir}")
    return EXIT_OK


def _ablation_configs(args: argparse.Namespace) -> List[PipelineConfig]:
    if args.configs:
        configs = []
        for path in args.configs:
            config = PipelineConfig.from_yaml(path)
            config.name = config.name if config.name != "run" else path.stem
            configs.append(config)
        return configs

    base = load_config(args)
    modes = args.modes or sorted(AGGREGATION_MODES)
    sources = args.normal_sources or [base.normals.source]
    configs = []
    for mode in modes:
        for source in sources if mode == "gcp" else sources[:1]:
            config = PipelineConfig.from_dict(base.to_dict())
            config.gcp.mode = mode
            config.normals.source = source
            config.name = f"{base.name}-{mode}" + (f"-{source}" if mode == "gcp" and len(sources) > 1 else "")
            configs.append(config)
    return configs


def cmd_ablate(args: argparse.Namespace) -> int:
    configs = _ablation_configs(args)
    if not configs:
        raise UsageError("no ablation configs given")
    out = Path(configs[0].output_dir) / f"{configs[0].name}-ablation"
    result = run_ablation(configs, output_dir=out)
    print(result.table)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_config(args)
    scene = build_scene(config)
    out = args.out or Path(config.output_dir) / config.name / "scene"
    export_views(scene.views, out)
    print(f"wrote {len(scene.views)} views to {out}")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    config = load_config(args)
    if not config.scene.directory:
        raise UsageError("fuse needs --scene-dir (images/ and cams/)")
    views = load_scene_dir(config.scene.directory)
    depths, confidences = [], []
    for index in range(len(views)):
        depths.append(read_depth(args.depth_dir / f"{index:03d}.pfm"))
        if args.conf_dir:
            confidences.append(read_pfm(args.conf_dir / f"{index:03d}.pfm"))
    cams = [view.cam for view in views]
    fusion = config.fusion
    masks = consistency_filter(
        depths,
        confidences or None,
        cams,
        tau_pix=fusion.tau_pix,
        tau_rel=fusion.tau_rel,
        min_views=fusion.min_views,
        confidence_floor=fusion.confidence_floor,
    )
    cloud = fuse_point_cloud(
        depths,
        masks,
        cams,
        images=[view.image for view in views],
        confidences=confidences or None,
        voxel_size=fusion.voxel_size,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(args.out, cloud)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pred = read_depth(args.pred)
    gt = read_depth(args.gt)
    mask = interior_mask(gt.validity, args.border) if args.border else None
    metrics = depth_metrics(pred, gt, args.thresholds, mask=mask)
    text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_normals(args: argparse.Namespace) -> int:
    patches = load_normal_patches(args.patches, args.origins, args.margin)
    fused = fuse_patch_normals(patches, args.height, args.width)
    save_normal_map(args.out, fused, axis_convention=args.axis_convention)
    print(f"fused {len(patches)} patches into {args.out}")
    return EXIT_OK


# =======================
# Entry point
# =======================
def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (UsageError, ConfigError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (GcmvsError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
