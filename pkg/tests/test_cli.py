from __future__ import annotations

import json

import numpy as np
import pytest

from gcmvs.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from gcmvs.depthmap import DepthMap
from gcmvs.fileio import read_ply, write_depth
from gcmvs.normals import NormalMap, load_normal_map, save_normal_map
from gcmvs.synth import SceneSpec, export_views, make_rig, render_rig, slanted_plane

SMALL = ["--width", "48", "--height", "40", "--n-views", "3", "--base-interval", "0.3"]


def _depth_pair(tmp_path):
    gt = np.full((6, 8), 4.0)
    pred = gt + 0.05
    write_depth(tmp_path / "gt.pfm", DepthMap(values=gt))
    write_depth(tmp_path / "pred.pfm", DepthMap(values=pred))
    return tmp_path / "pred.pfm", tmp_path / "gt.pfm"


def test_eval_prints_and_writes_metrics(tmp_path, capsys):
    pred, gt = _depth_pair(tmp_path)
    out = tmp_path / "metrics.json"
    code = main(["eval", "--pred", str(pred), "--gt", str(gt), "--thresholds", "0.01,0.1", "--out", str(out)])
    assert code == EXIT_OK
    metrics = json.loads(out.read_text())
    assert metrics["mae"] == pytest.approx(0.05, abs=1e-6)
    assert metrics["within"] == {"0.01": 0.0, "0.1": 1.0}
    assert '"mae"' in capsys.readouterr().out


def test_missing_command_is_a_usage_error():
    assert main([]) == EXIT_USAGE


def test_missing_flag_value_is_a_usage_error(tmp_path):
    assert main(["eval", "--pred"]) == EXIT_USAGE


def test_unknown_flag_is_a_usage_error():
    assert main(["run", "--frobnicate"]) == EXIT_USAGE


def test_invalid_config_is_a_usage_error(tmp_path):
    assert main(["run", "--output-dir", str(tmp_path), "--k", "4"]) == EXIT_USAGE
    assert not (tmp_path / "run").exists()


def test_wrong_stage_count_is_a_usage_error(tmp_path):
    assert main(["run", "--output-dir", str(tmp_path), "--samples", "48,32"]) == EXIT_USAGE


def test_missing_input_file_is_a_runtime_error(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "nope.pfm"), "--gt", str(tmp_path / "nope.pfm")]) == EXIT_RUNTIME


def test_malformed_input_file_is_a_runtime_error(tmp_path):
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"not a pfm")
    assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == EXIT_RUNTIME


def test_synth_writes_a_scene(tmp_path):
    out = tmp_path / "scene"
    assert main(["synth", "--output-dir", str(tmp_path), "--out", str(out)] + SMALL) == EXIT_OK
    assert sorted(p.name for p in (out / "images").iterdir()) == ["000.png", "001.png", "002.png"]
    assert (out / "cams" / "002.txt").is_file()
    assert (out / "depths" / "000.pfm").is_file()


def test_run_without_fusion(tmp_path, capsys):
    code = main(["run", "--output-dir", str(tmp_path), "--name", "tiny", "--no-fusion", "--samples", "16,8,4"] + SMALL)
    assert code == EXIT_OK
    assert (tmp_path / "tiny" / "depth" / "view000_stage2.pfm").is_file()
    assert not (tmp_path / "tiny" / "cloud.ply").exists()
    assert "MAE" in capsys.readouterr().out


def test_fuse_existing_depth_maps(tmp_path):
    views = render_rig(SceneSpec(primitive=slanted_plane()), make_rig(3, 1.0, image_width=48, image_height=40))
    export_views(views, tmp_path / "scene")
    (tmp_path / "depths").mkdir()
    for index, view in enumerate(views):
        write_depth(tmp_path / "depths" / f"{index:03d}.pfm", view.gt_depth)
    out = tmp_path / "out" / "cloud.ply"
    code = main(
        ["fuse", "--scene-dir", str(tmp_path / "scene"), "--depth-dir", str(tmp_path / "depths"), "--out", str(out)]
    )
    assert code == EXIT_OK
    points, colors = read_ply(out)
    assert len(points) > 100
    assert colors is not None


def test_fuse_needs_a_scene_directory(tmp_path):
    assert main(["fuse", "--depth-dir", str(tmp_path), "--out", str(tmp_path / "c.ply")]) == EXIT_USAGE


def test_normals_fuses_patch_files(tmp_path):
    values = np.zeros((3, 6, 10))
    values[2] = -1.0
    left, right = tmp_path / "left.pfm", tmp_path / "right.pfm"
    save_normal_map(left, NormalMap(values=values[:, :, :6]))
    save_normal_map(right, NormalMap(values=values[:, :, 4:]))
    out = tmp_path / "fused.pfm"
    code = main(
        ["normals", "--patches", str(left), str(right), "--origins", "0,0", "0,4", "--height", "6", "--width", "10", "--margin", "1", "--out", str(out)]
    )
    assert code == EXIT_OK
    np.testing.assert_allclose(load_normal_map(out).values, values, atol=1e-7)


def test_normals_with_uncovered_pixels_is_a_runtime_error(tmp_path):
    values = np.zeros((3, 6, 6))
    values[2] = -1.0
    patch = tmp_path / "p.pfm"
    save_normal_map(patch, NormalMap(values=values))
    code = main(["normals", "--patches", str(patch), "--origins", "0,0", "--height", "6", "--width", "10", "--out", str(tmp_path / "o.pfm")])
    assert code == EXIT_RUNTIME
