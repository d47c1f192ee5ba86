from __future__ import annotations

import pytest

from gcmvs.config import PipelineConfig, set_option
from gcmvs.errors import ConfigError
from gcmvs.hypotheses import StageConfig


def test_defaults_are_valid():
    config = PipelineConfig().validate()
    assert [s.num_samples for s in config.stages] == [48, 32, 8]
    assert [s.interval_scale for s in config.stages] == [4.0, 1.0, 0.5]
    assert config.depth_range == (6.0, 16.0)


def test_base_interval_defaults_to_stage_zero_spacing():
    config = PipelineConfig()
    assert config.resolved_base_interval() == pytest.approx(10.0 / 47 / 4.0)
    assert config.final_interval() == pytest.approx(0.5 * 10.0 / 47 / 4.0)


def test_explicit_base_interval_wins():
    config = PipelineConfig(base_interval=0.3)
    assert config.resolved_base_interval() == 0.3
    assert config.final_interval() == pytest.approx(0.15)


def test_last_stage_halving_leaves_stages_untouched():
    config = PipelineConfig(base_interval=0.4, last_stage_halving=True)
    assert config.effective_stages()[-1].interval_scale == 0.25
    assert config.stages[-1].interval_scale == 0.5
    assert config.final_interval() == pytest.approx(0.1)


def test_yaml_round_trip(tmp_path):
    config = PipelineConfig(name="slanted", base_interval=0.2, temperature=0.5)
    config.gcp.mode = "standard-depth5"
    config.scene.kind = "sphere"
    config.scene.center = [0.5, 0.0, 9.0]
    config.metrics.thresholds = [0.1, 0.2]
    path = tmp_path / "config.yaml"
    config.to_yaml(path)
    assert PipelineConfig.from_yaml(path) == config


def test_empty_yaml_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert PipelineConfig.from_yaml(path) == PipelineConfig()


def test_partial_yaml_keeps_other_defaults(tmp_path):
    path = tmp_path / "partial.yaml"
    path.write_text("fusion:\n  tau_pix: 2.0\nstages:\n  - {num_samples: 16, interval_scale: 2.0, depth_min: 1.0, depth_max: 3.0}\n  - {num_samples: 8, interval_scale: 1.0}\n  - {num_samples: 4, interval_scale: 0.5}\n")
    config = PipelineConfig.from_yaml(path)
    assert config.fusion.tau_pix == 2.0
    assert config.fusion.tau_rel == 0.01
    assert config.stages[0] == StageConfig(16, 2.0, 1.0, 3.0)
    config.validate()


def test_unknown_keys_are_all_reported():
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_dict({"bogus": 1, "gcp": {"colour": "red", "k": 5}})
    assert "bogus: unknown key" in info.value.problems
    assert "gcp.colour: unknown key" in info.value.problems


def test_bad_stage_entries_are_reported():
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_dict({"stages": [{"num_samples": 1, "interval_scale": 1.0}, "nope"]})
    assert len(info.value.problems) == 2


@pytest.mark.parametrize("text", ["- just\n- a list\n", "key: [unclosed\n"])
def test_malformed_yaml_raises(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        PipelineConfig.from_yaml(path)


def test_validation_collects_every_problem():
    config = PipelineConfig(temperature=0.0)
    config.gcp.k = 4
    config.normals.source = "file"
    config.fusion.tau_rel = -1.0
    with pytest.raises(ConfigError) as info:
        config.validate()
    problems = info.value.problems
    assert len(problems) == 4
    assert any(p.startswith("gcp.k") for p in problems)
    assert any(p.startswith("normals.path") for p in problems)


def test_stage_count_is_checked():
    config = PipelineConfig(stages=[StageConfig(8, 1.0, 1.0, 2.0), StageConfig(4, 0.5)])
    with pytest.raises(ConfigError, match="expected 3 stages"):
        config.validate()


def test_missing_initial_depth_range_is_reported():
    config = PipelineConfig(stages=[StageConfig(8, 1.0), StageConfig(8, 1.0), StageConfig(4, 0.5)])
    with pytest.raises(ConfigError, match="depth_min and depth_max are required"):
        config.validate()


def test_tiny_images_are_rejected():
    config = PipelineConfig()
    config.scene.width = 8
    with pytest.raises(ConfigError, match="scene.width/height"):
        config.validate()


def test_decorrelated_view_must_be_a_source():
    config = PipelineConfig()
    config.scene.decorrelated_view = 0
    with pytest.raises(ConfigError, match="decorrelated_view"):
        config.validate()


def test_set_option_assigns_nested_fields():
    config = PipelineConfig()
    set_option(config, "fusion.tau_pix", 2.5)
    set_option(config, "temperature", 0.7)
    assert config.fusion.tau_pix == 2.5
    assert config.temperature == 0.7


def test_set_option_rejects_unknown_paths():
    with pytest.raises(ConfigError):
        set_option(PipelineConfig(), "fusion.tau", 1.0)
    with pytest.raises(ConfigError):
        set_option(PipelineConfig(), "nowhere.tau_pix", 1.0)


def test_normals_path_may_be_a_directory(tmp_path):
    config = PipelineConfig()
    config.normals.source = "file"
    config.normals.path = str(tmp_path)
    config.validate()
    config.normals.path = str(tmp_path / "missing")
    with pytest.raises(ConfigError, match="normals.path"):
        config.validate()
