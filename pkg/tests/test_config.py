"""
Tests for configuration presets, files, overrides and validation.
"""

import json

import pytest

from code_ssm.config import (
    PRESETS,
    EncoderConfig,
    GradcheckConfig,
    RunConfig,
    TrainConfig,
    describe_differences,
    encoder_config_from_dict,
    load_config,
    parse_override,
    write_resolved_config,
)
from code_ssm.exceptions import ConfigError


class TestLoadConfig:
    """Preset, file, override and seed precedence."""

    def test_defaults(self):
        """Test the desk defaults with no file, overrides or environment."""
        config = load_config(environ={})
        assert config.model.variant == "base"
        assert config.train.warmup_steps == 300
        assert config.train.mask_prob == 0.15
        assert config.seed == 0

    def test_presets_validate(self):
        """Test presets validate."""
        for name in PRESETS:
            load_config(preset=name, environ={})

    def test_large_preset(self):
        """Test large preset."""
        config = load_config(preset="large", environ={})
        assert (config.model.n_layers, config.model.hidden_dim, config.model.state_size) == (12, 1024, 64)
        assert config.train.lr == pytest.approx(5e-5)

    def test_unknown_preset(self):
        """Test unknown preset."""
        with pytest.raises(ConfigError):
            load_config(preset="huge", environ={})

    def test_file_then_overrides(self, tmp_path):
        """Test file then overrides."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"model": {"variant": "uni", "n_layers": 3}, "seed": 7}))
        config = load_config(str(path), overrides=["model.n_layers=4", "train.lr=0.002"], environ={})
        assert config.model.variant == "uni"
        assert config.model.n_layers == 4
        assert config.train.lr == pytest.approx(0.002)
        assert config.seed == 7

    def test_seed_environment_wins(self):
        """Test seed environment wins."""
        config = load_config(seed=3, environ={"CODESSM_SEED": "11"})
        assert config.seed == 11
        assert load_config(seed=3, environ={}).seed == 3

    def test_bad_seed_environment(self):
        """Test bad seed environment."""
        with pytest.raises(ConfigError):
            load_config(environ={"CODESSM_SEED": "abc"})

    def test_missing_file(self, tmp_path):
        """Test missing file."""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"), environ={})

    def test_invalid_json(self, tmp_path):
        """Test invalid json."""
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(path), environ={})

    def test_unknown_key(self):
        """Test unknown key."""
        with pytest.raises(ConfigError):
            load_config(overrides=["model.depth=3"], environ={})

    def test_type_mismatch(self):
        """Test type mismatch."""
        with pytest.raises(ConfigError):
            load_config(overrides=["model.n_layers=two"], environ={})

    @pytest.mark.parametrize("override", [
        "model.variant=wide",
        "model.hidden_dim=7",
        "train.warmup_steps=5000",
        "train.mask_prob=1.5",
        "task.kind=translation",
        "bench.lengths=[]",
        "log_level=LOUD",
    ])
    def test_invalid_values(self, override):
        """Test invalid values."""
        with pytest.raises(ConfigError):
            load_config(overrides=[override], environ={})


class TestOverrides:

    def test_parse_number(self):
        """Test parse number."""
        assert parse_override("train.lr=1e-3") == {"train": {"lr": 1e-3}}

    def test_parse_bare_string(self):
        """Test parse bare string."""
        assert parse_override("model.variant=dft") == {"model": {"variant": "dft"}}

    def test_parse_top_level(self):
        """Test parse top level."""
        assert parse_override("seed=5") == {"seed": 5}

    def test_parse_list(self):
        """Test parse list."""
        assert parse_override("bench.lengths=[256,512]") == {"bench": {"lengths": [256, 512]}}

    @pytest.mark.parametrize("text", ["model.variant", "=3", "a.b.c=1"])
    def test_malformed(self, text):
        """Test rejection of malformed override strings."""
        with pytest.raises(ConfigError):
            parse_override(text)


class TestEncoderConfig:

    def test_hash_is_stable_and_sensitive(self):
        """Test hash is stable and sensitive."""
        assert EncoderConfig().config_hash() == EncoderConfig().config_hash()
        assert EncoderConfig().config_hash() != EncoderConfig(variant="uni").config_hash()

    def test_round_trip_through_dict(self):
        """Test round trip through dict."""
        config = EncoderConfig(n_layers=3, variant="pos", tie_mlm_head=False)
        assert encoder_config_from_dict(config.to_dict()) == config

    def test_from_dict_rejects_unknown(self):
        """Test from dict rejects unknown."""
        with pytest.raises(ConfigError):
            encoder_config_from_dict({"n_layers": 2, "width": 3})

    def test_describe_differences(self):
        """Test describe differences."""
        diffs = describe_differences(EncoderConfig(), EncoderConfig(n_layers=5))
        assert diffs == [("n_layers", 2, 5)]


class TestRunConfig:

    def test_from_dict(self):
        """Test from dict."""
        config = RunConfig.from_dict({"train": {"total_steps": 10, "warmup_steps": 2}})
        assert config.train.total_steps == 10

    def test_warmup_may_not_exceed_steps(self):
        """Test warmup may not exceed steps."""
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=10, warmup_steps=20).validate()

    def test_gradcheck_floor_defaults_and_must_be_positive(self):
        """Test the gradient check floor default and its validation."""
        assert load_config(environ={}).gradcheck.atol == 1e-6
        with pytest.raises(ConfigError):
            GradcheckConfig(atol=0.0).validate()

    def test_resolved_snapshot(self, tmp_path):
        """Test resolved snapshot."""
        config = load_config(preset="tiny", environ={})
        path = write_resolved_config(config, tmp_path)
        data = json.loads(path.read_text())
        assert data["model"]["hidden_dim"] == 16
        assert RunConfig.from_dict(data) == config
