"""End-to-end runs on the synthetic slanted plane: accuracy, outputs, determinism and ablations."""
from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from gcmvs import __version__
from gcmvs.config import PipelineConfig
from gcmvs.depthmap import interior_mask
from gcmvs.errors import ComparisonError, PreconditionError
from gcmvs.normals import FRONTO_PARALLEL, save_normal_map
from gcmvs.pipeline import (
    SceneInputs,
    build_scene,
    estimate_depth,
    format_table,
    run_ablation,
    run_pipeline,
    stage_normals,
)
from gcmvs.synth import Plane, export_views

from conftest import small_config


def _full_config(output_dir, name="full", **fusion):
    config = PipelineConfig(name=name, output_dir=str(output_dir), base_interval=0.3)
    config.scene.frequency = 0.5
    for key, value in fusion.items():
        setattr(config.fusion, key, value)
    return config


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    return run_pipeline(_full_config(tmp_path_factory.mktemp("runs")))


# ── full reconstruction ──────────────────────────────────────────────────

def test_reference_depth_is_within_one_final_interval(full_run):
    interval = full_run.config.final_interval()
    gt = full_run.gt_depth
    region = interior_mask(gt.validity, 4)
    error = np.abs(full_run.depth.values - gt.values)[region]
    assert (error <= interval).mean() >= 0.95


def test_fused_cloud_hugs_the_plane(full_run):
    assert full_run.cloud is not None and len(full_run.cloud) > 1000
    assert full_run.plane_rms <= full_run.config.final_interval()


def test_cascade_error_shrinks(full_run):
    maes = [stage.metrics.mae for stage in full_run.stages]
    assert maes[2] < maes[0]


def test_run_directory_is_self_describing(full_run):
    run_dir = full_run.run_dir
    for name in ("config.yaml", "manifest.json", "metrics.json", "cloud.ply", "depth/view000_stage2.pfm", "depth/view004_stage2_conf.pfm"):
        assert (run_dir / name).is_file(), name
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["gcmvs_version"] == __version__
    assert "cloud.ply" in manifest["files"]
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert [s["samples"] for s in metrics["stages"]] == [48, 32, 8]
    assert metrics["final"]["mae"] == pytest.approx(full_run.metrics.mae)
    assert PipelineConfig.from_yaml(run_dir / "config.yaml") == full_run.config


def test_runs_are_bit_identical(tmp_path):
    outputs = []
    for sub in ("a", "b"):
        config = small_config(tmp_path / sub)
        config.fusion.enabled = True
        config.fusion.min_views = 1
        outputs.append(run_pipeline(config).run_dir)
    for name in ("depth/view000_stage2.pfm", "depth/view002_stage1.pfm", "depth/view001_stage2_conf.pfm", "cloud.ply"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


# ── cascade details ──────────────────────────────────────────────────────

def test_stages_run_coarse_to_fine(tmp_path):
    config = small_config(tmp_path)
    scene = build_scene(config)
    results = estimate_depth(scene.views, 0, config)
    assert [r.level for r in results] == [2, 1, 0]
    assert [r.hyps.num_samples for r in results] == [48, 32, 8]
    assert [r.depth.shape for r in results] == [(16, 20), (32, 40), (64, 80)]
    assert all(r.cross_entropy is not None for r in results)


def test_first_stage_without_normal_cue_is_fronto_parallel(tmp_path):
    config = small_config(tmp_path)
    config.normals.source = "from-depth"
    view = build_scene(config).views[0]
    normals = stage_normals(config, view, 0, 2, (16, 20), None)
    np.testing.assert_array_equal(normals.values[:, 3, 4], FRONTO_PARALLEL)


def test_gt_normal_cue_is_resampled_to_the_stage(tmp_path):
    config = small_config(tmp_path)
    view = build_scene(config).views[0]
    normals = stage_normals(config, view, 0, 1, (32, 40), None)
    assert normals.shape == (32, 40)
    assert normals.validity.all()


def test_normals_from_a_file(tmp_path):
    config = small_config(tmp_path)
    scene = build_scene(config)
    path = tmp_path / "ref_normals.pfm"
    save_normal_map(path, scene.views[0].gt_normal)
    config.normals.source = "file"
    config.normals.path = str(path)
    report = run_pipeline(config, scene=scene)
    assert report.metrics is not None


def test_normals_from_a_directory_of_per_view_files(tmp_path, caplog):
    config = small_config(tmp_path)
    config.fusion.enabled = True
    config.fusion.min_views = 1
    scene = build_scene(config)
    normals_dir = tmp_path / "normals"
    normals_dir.mkdir()
    for index, view in enumerate(scene.views):
        save_normal_map(normals_dir / f"{index:03d}.pfm", view.gt_normal)
    config.normals.source = "file"
    config.normals.path = str(normals_dir)

    view = scene.views[2]
    from_file = stage_normals(config, view, 2, 0, view.cam.shape, None)
    np.testing.assert_allclose(from_file.values, view.gt_normal.values, atol=1e-6)

    with caplog.at_level(logging.WARNING, logger="gcmvs.pipeline"):
        report = run_pipeline(config, scene=scene)
    assert "no normal file" not in caplog.text
    assert len(report.final_depths) == 3


def test_directory_scene_has_no_analytic_primitive(tmp_path):
    config = small_config(tmp_path)
    export_views(build_scene(config).views, tmp_path / "scene")
    config.scene.kind = "directory"
    config.scene.directory = str(tmp_path / "scene")
    scene = build_scene(config)
    assert len(scene.views) == 3
    assert scene.plane is None
    assert scene.views[0].gt_depth is not None


def test_sphere_scene(tmp_path):
    config = small_config(tmp_path, kind="sphere")
    scene = build_scene(config)
    assert scene.plane is None
    assert scene.views[0].gt_depth.values[32, 40] == pytest.approx(7.0, abs=0.05)


def test_plane_scene_exposes_its_plane(tmp_path):
    scene = build_scene(small_config(tmp_path))
    assert isinstance(scene.plane, Plane)


def test_run_needs_two_views(tmp_path):
    config = small_config(tmp_path)
    scene = build_scene(config)
    with pytest.raises(PreconditionError):
        run_pipeline(config, scene=SceneInputs(views=scene.views[:1], spec=scene.spec))


# ── ablations ────────────────────────────────────────────────────────────

def _mode_configs(output_dir, modes, **fusion):
    configs = []
    for mode in modes:
        config = _full_config(output_dir, name=mode, enabled=False, **fusion)
        config.gcp.mode = mode
        configs.append(config)
    return configs


def test_ablation_writes_a_table(tmp_path):
    modes = ["gcp", "standard-k3", "standard-depth5", "standard-depth7"]
    configs = [small_config(tmp_path, name=mode) for mode in modes]
    for config, mode in zip(configs, modes):
        config.gcp.mode = mode
    result = run_ablation(configs, output_dir=tmp_path / "ablation")
    assert [r["mode"] for r in result.records] == modes
    assert len(result.table.splitlines()) == 2 + len(modes)
    assert (tmp_path / "ablation" / "ablation.txt").read_text().strip() == result.table
    assert len(json.loads((tmp_path / "ablation" / "ablation.json").read_text())["records"]) == 4


def test_propagation_beats_plain_aggregation(tmp_path):
    result = run_ablation(_mode_configs(tmp_path, ["gcp", "standard-k3", "standard-depth5", "standard-depth7"]))
    mae = {r["mode"]: r["mae"] for r in result.records}
    assert mae["gcp"] < min(mae["standard-k3"], mae["standard-depth5"], mae["standard-depth7"])


def test_gt_normals_beat_estimated_normals(tmp_path):
    configs = []
    for source in ("gt", "from-depth"):
        config = _full_config(tmp_path, name=source, enabled=False)
        config.scene.noise_sigma = 0.02
        config.normals.source = source
        configs.append(config)
    result = run_ablation(configs)
    mae = {r["normals"]: r["mae"] for r in result.records}
    assert mae["gt"] <= mae["from-depth"]


def test_ablation_input_checks(tmp_path):
    with pytest.raises(PreconditionError):
        run_ablation([])
    with pytest.raises(PreconditionError):
        run_ablation([small_config(tmp_path)])
    other = small_config(tmp_path, name="other")
    other.seed = 99
    with pytest.raises(ComparisonError):
        run_ablation([small_config(tmp_path), other])
    moved = small_config(tmp_path, name="moved", baseline=2.0)
    with pytest.raises(ComparisonError):
        run_ablation([small_config(tmp_path), moved])


def test_ablation_configs_must_differ_in_mode_or_normal_source(tmp_path):
    first = small_config(tmp_path, name="k3")
    second = small_config(tmp_path, name="k5")
    second.gcp.k = 5
    with pytest.raises(PreconditionError, match="share mode"):
        run_ablation([first, second])
    assert not (tmp_path / "k3").exists()


def test_format_table_aligns_columns():
    records = [
        {"name": "a", "mode": "gcp", "normals": "gt", "mae": 0.1, "within": {"0.1": 0.5}, "runtime_s": 1.0},
        {"name": "longer-name", "mode": "standard-k3", "normals": "gt", "mae": 0.25, "within": {"0.1": 0.25}, "runtime_s": 2.0},
    ]
    lines = format_table(records).splitlines()
    assert lines[0].split() == ["name", "mode", "normals", "MAE", "<=0.1", "runtime_s"]
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].index("gcp") == lines[3].index("standard-k3")
