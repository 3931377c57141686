import json

import pytest

from src.config import DESK_SMOOTHING_POINTS, PAPER_SMOOTHING_POINTS, RunConfig, load_config
from src.exceptions import ConfigError


def test_defaults_are_desk_scale():
    config = load_config()
    assert config.scale == "desk"
    assert config.patch_dims() == (3, 8, 9, 16)
    assert config.probe_geometry().pitch == pytest.approx(1540.0 / 15.625e6)


def test_paper_scale_dimensions():
    config = load_config(paper_scale=True)
    assert config.patch_dims() == (11, 16, 17, 128)
    assert config.aberration.smoothing_points == 16
    assert config.dataset.count == 20000


def test_knot_count_follows_the_scale():
    desk, paper = load_config(), load_config(paper_scale=True)
    assert desk.aberration.smoothing_points == DESK_SMOOTHING_POINTS == 6
    assert paper.aberration.smoothing_points == PAPER_SMOOTHING_POINTS == 16
    for config in (desk, paper):
        spacing = (config.probe_geometry().num_elements - 1) / (config.aberration.smoothing_points - 1)
        assert spacing >= 3


def test_file_values_override_defaults(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 7, "ulm": {"max_link_dist": 3.0}}))
    config = load_config(path)
    assert config.seed == 7
    assert config.ulm.max_link_dist == 3.0
    assert config.ulm.min_track_len == 16


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"ulm": {"max_link_distance": 3.0}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("ULM_SEED", "42")
    monkeypatch.setenv("ULM_WORKERS", "3")
    config = load_config()
    assert config.seed == 42
    assert config.workers == 3


def test_bad_environment_value(monkeypatch):
    monkeypatch.setenv("ULM_WORKERS", "many")
    with pytest.raises(ConfigError):
        load_config()


def test_snapshot_reloads_identically(tmp_path, monkeypatch):
    monkeypatch.delenv("ULM_SEED", raising=False)
    monkeypatch.delenv("ULM_WORKERS", raising=False)
    monkeypatch.delenv("ULM_OUTPUT_DIR", raising=False)
    config = load_config(paper_scale=True)
    path = config.write_snapshot(tmp_path)
    reloaded = load_config(path)
    assert reloaded == config
    assert reloaded.config_hash() == config.config_hash()


@pytest.mark.parametrize("section, key, value", [
    ("ulm", "patch_samples", 8),
    ("ulm", "fit_fraction", 0.0),
    ("aberration", "phase_bound", 0.7),
    ("train", "dropout_p", 1.0),
])
def test_invalid_values(tmp_path, section, key, value):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({section: {key: value}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_estimator():
    config = RunConfig(estimator="magic")
    with pytest.raises(ConfigError):
        config.validate()


def test_hash_changes_with_content():
    assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()
