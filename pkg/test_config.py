"""
Tests for run configuration loading, overrides and validation.
"""

import sys
from pathlib import Path

import pytest
import yaml

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.errors import ConfigError
from config.settings import ABLATIONS, RunConfig, apply_override


class TestDefaults:
    def test_defaults_are_valid(self):
        config = RunConfig()
        assert config.evaluation.n_samples == 50
        assert config.dataset.horizon == 6
        assert config.schedule.T == 100
        assert config.ablation == "none"

    def test_shipped_yaml_matches_defaults(self):
        config = RunConfig.load(str(project_root / "config" / "default_run.yaml"), use_env=False)
        assert config.to_dict() == RunConfig().to_dict()

    def test_horizon_mismatch_is_fatal(self):
        with pytest.raises(ConfigError, match="horizon"):
            RunConfig.load(None, ["model.denoiser.horizon=8"], use_env=False)

    def test_visuelle_needs_a_path(self):
        with pytest.raises(ConfigError, match="dataset.path"):
            RunConfig.load(None, ["dataset.source=visuelle"], use_env=False)


class TestOverrides:
    def test_values_are_parsed_as_yaml(self):
        config = RunConfig.load(None, ["train.epochs=3", "train.learning_rate=0.01",
                                       "evaluation.quantiles=[0.05, 0.95]"], use_env=False)
        assert config.train.epochs == 3
        assert config.train.learning_rate == 0.01
        assert config.evaluation.quantiles == (0.05, 0.95)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.load(None, ["train.epoch=3"], use_env=False)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            apply_override(RunConfig().to_dict(), "trainer.epochs=3")

    def test_missing_equals_sign(self):
        with pytest.raises(ConfigError):
            apply_override({}, "train.epochs")

    @pytest.mark.parametrize("override", ["evaluation.n_samples=0", "schedule.variance=huge",
                                          "evaluation.quantiles=[0.9, 0.1]", "train.batch_size=0",
                                          "dataset.synthetic.n_train=0"])
    def test_invalid_values(self, override):
        with pytest.raises(ConfigError):
            RunConfig.load(None, [override], use_env=False)

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_ablation_names_round_trip(self, name):
        overrides = [f"{key}={str(flag).lower()}" for key, flag in ABLATIONS[name].items()]
        assert RunConfig.load(None, overrides, use_env=False).ablation == name


class TestFiles:
    def test_yaml_file_is_merged(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"seed": 9, "train": {"epochs": 4}}))
        config = RunConfig.load(str(path), ["train.epochs=5"], use_env=False)
        assert config.seed == 9
        assert config.train.epochs == 5
        assert config.train.batch_size == 32

    def test_unknown_yaml_key(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochz": 4}}))
        with pytest.raises(ConfigError, match="epochz"):
            RunConfig.load(str(path), use_env=False)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(str(tmp_path / "absent.yaml"), use_env=False)

    def test_save_and_reload(self, tmp_path):
        config = RunConfig.load(None, ["seed=3", "model.conditioning.use_image=false"], use_env=False)
        path = config.save_to_file(str(tmp_path / "nested" / "resolved.yaml"))
        reloaded = RunConfig.from_file(str(path))
        assert reloaded.to_dict() == config.to_dict()
        assert reloaded.ablation == "no-image"


class TestEnvironment:
    def test_environment_overrides_defaults(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MDIFF_SEED", "7")
        monkeypatch.setenv("MDIFF_OUTPUT_ROOT", str(tmp_path / "runs"))
        config = RunConfig.load()
        assert config.seed == 7
        assert config.output_root == str(tmp_path / "runs")

    def test_overrides_beat_environment(self, monkeypatch):
        monkeypatch.setenv("MDIFF_SEED", "7")
        assert RunConfig.load(None, ["seed=1"]).seed == 1


    def test_non_integer_seed_is_a_config_error(self, monkeypatch):
        monkeypatch.setenv("MDIFF_SEED", "seven")
        with pytest.raises(ConfigError, match="MDIFF_SEED"):
            RunConfig.load()


class TestGuidance:
    def test_zero_strength_is_accepted(self):
        assert RunConfig.load(None, ["schedule.guidance_strength=0.0"], use_env=False).schedule.guidance_strength == 0

    @pytest.mark.parametrize("strength", [5.0, -1.0])
    def test_nonzero_strength_is_refused(self, strength):
        with pytest.raises(ConfigError, match="guidance_strength"):
            RunConfig.load(None, [f"schedule.guidance_strength={strength}"], use_env=False)
