import json

import pytest

from mvvc.config import PipelineConfig, config_from_dict, load_config
from mvvc.errors import ConfigError


def test_empty_config_is_all_defaults():
    cfg = config_from_dict({})
    assert cfg == PipelineConfig()
    assert cfg.fill.shore_band == 2.0
    assert cfg.schedule.total_steps == 800
    assert cfg.render.n_cameras == 8


def test_nested_overrides_keep_section_defaults():
    cfg = config_from_dict({"fill": {"threshold": 0.3}, "schedule": {"batch_size": 16},
                            "render": {"tilt_range": [5, 15]}})
    assert cfg.fill.threshold == 0.3 and cfg.fill.shore_band == 2.0
    assert cfg.schedule.batch_size == 16 and cfg.schedule.total_steps == 800
    assert cfg.render.tilt_range == (5, 15)


@pytest.mark.parametrize("data, where", [
    ({"bogus": 1}, "bogus"),
    ({"sweep": {"kdrop": 2}}, "config.sweep"),
    ({"scene": []}, "config.scene"),
    ({"train": {"experiments": ["full", "triple"]}}, "triple"),
    ({"train": {"experiments": ["mosaic"]}}, "full"),
    ({"train": {"precision": "float16"}}, "precision"),
    ({"render": {"n_cameras": 1}}, "n_cameras"),
    ({"sweep": {"window": 2}}, "window"),
    ({"schedule": {"base_lr": -1}}, "base_lr"),
    ({"fill": {"tile_size": 10, "tile_overlap": 10}}, "config.fill"),
])
def test_bad_configs_name_the_problem(data, where):
    with pytest.raises(ConfigError, match=where):
        config_from_dict(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"seed": 5}))
    assert load_config(good).seed == 5
    assert load_config(None) == PipelineConfig()


def test_hash_ignores_output_dir_and_tracks_sections():
    a = config_from_dict({})
    b = config_from_dict({"out": "elsewhere"})
    c = config_from_dict({"fill": {"threshold": 0.3}})
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()
    assert a.hash("scene", "render") == c.hash("scene", "render")
    assert a.with_seed(3).hash() != a.hash()


def test_json_roundtrip():
    cfg = config_from_dict({"seed": 2, "render": {"image_size": 128}})
    assert config_from_dict(json.loads(json.dumps(cfg.to_json()))) == cfg
