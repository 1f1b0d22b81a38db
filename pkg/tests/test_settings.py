"""
Tests for structured settings: defaults, file loading and validation.
"""
import json

import pytest

from app.errors import ConfigurationError
from app.settings import (
    DataConfig, DSSNConfig, MAEConfig, PerturbSpec, PromptEncoderConfig, Settings, TrainConfig,
)
from tests.conftest import TINY_CONFIG


class TestDefaults:
    """Test the built-in configuration."""

    def test_defaults_are_consistent(self):
        """Test the default settings validate at 64x64."""
        settings = Settings()
        assert settings.resolution == 64
        assert settings.dssn.grid_sizes(64) == [16, 8, 4, 2]
        assert [s.kind for s in settings.robustness] == ['jpeg', 'gaussian_blur']

    def test_tiny_grids(self, tiny_settings):
        """Test the test configuration's token grids."""
        assert tiny_settings.dssn.grid_sizes(32) == [8, 4, 2, 1]

    def test_dict_round_trip(self, tiny_settings):
        """Test settings rebuild from their own dictionary."""
        assert Settings.from_dict(tiny_settings.to_dict()) == tiny_settings


class TestLoading:
    """Test reading configuration files."""

    def test_yaml(self, tiny_config_file):
        """Test a YAML file loads every section."""
        settings = Settings.from_file(tiny_config_file)
        assert settings.resolution == 32
        assert settings.mae.embed_dim == 32
        assert settings.dssn.stage_dims == (8, 16, 16, 16)
        assert settings.robustness[1].levels == (0, 8)

    def test_json(self, tmp_path):
        """Test a JSON file loads the same settings."""
        path = tmp_path / 'tiny.json'
        path.write_text(json.dumps(TINY_CONFIG))
        assert Settings.from_file(path).train.batch_size == 4

    def test_missing_sections_use_defaults(self, tmp_path):
        """Test a partial file keeps defaults for absent sections."""
        path = tmp_path / 'partial.yaml'
        path.write_text('train:\n  lr: 0.001\n')
        settings = Settings.from_file(path)
        assert settings.train.lr == 0.001
        assert settings.mae == MAEConfig()

    def test_empty_file(self, tmp_path):
        """Test an empty YAML file gives the defaults."""
        path = tmp_path / 'empty.yaml'
        path.write_text('')
        assert Settings.from_file(path) == Settings()

    def test_missing_file(self, tmp_path):
        """Test a missing file raises ConfigurationError."""
        with pytest.raises(ConfigurationError, match='not found'):
            Settings.from_file(tmp_path / 'nope.yaml')

    def test_unsupported_suffix(self, tmp_path):
        """Test only YAML and JSON are accepted."""
        path = tmp_path / 'settings.toml'
        path.write_text('x = 1')
        with pytest.raises(ConfigurationError, match='unsupported'):
            Settings.from_file(path)

    def test_non_mapping(self, tmp_path):
        """Test a top-level list is refused."""
        path = tmp_path / 'list.yaml'
        path.write_text('- 1\n- 2\n')
        with pytest.raises(ConfigurationError, match='mapping'):
            Settings.from_file(path)

    def test_unknown_section(self):
        """Test unknown sections are refused."""
        with pytest.raises(ConfigurationError, match='section'):
            Settings.from_dict({'optimizer': {}})

    def test_unknown_key(self):
        """Test unknown keys inside a section are refused."""
        with pytest.raises(ConfigurationError, match='unknown key'):
            Settings.from_dict({'mae': {'depth': 3}})


class TestValidation:
    """Test invariants checked on construction."""

    def test_resolution_must_fit_every_component(self):
        """Test a resolution divisible by the patch size but not by the segmenter is refused."""
        with pytest.raises(ConfigurationError, match='downsample'):
            Settings(data=DataConfig(resolution=48))

    def test_resolution_minimum(self):
        """Test images smaller than 32 pixels are refused."""
        with pytest.raises(ConfigurationError):
            DataConfig(resolution=16)

    @pytest.mark.parametrize('area_range', [(0.0, 0.3), (0.4, 0.2), (0.1, 1.0)])
    def test_area_range(self, area_range):
        """Test forged areas must satisfy 0 < lo <= hi < 1."""
        with pytest.raises(ConfigurationError):
            DataConfig(area_range=area_range)

    def test_texture_mix(self):
        """Test texture weights must be known and sum to one."""
        with pytest.raises(ConfigurationError):
            DataConfig(texture_mix={'gaussian_field': 0.5, 'gradient': 0.4})
        with pytest.raises(ConfigurationError):
            DataConfig(texture_mix={'marble': 1.0})

    def test_mae_heads(self):
        """Test embedding widths must split over the heads."""
        with pytest.raises(ConfigurationError, match='divisible'):
            MAEConfig(embed_dim=30, num_heads=4)

    def test_mae_mask_ratio(self):
        """Test the mask ratio must be in [0, 1)."""
        with pytest.raises(ConfigurationError):
            MAEConfig(mask_ratio=1.0)

    def test_dssn_stage_lengths(self):
        """Test per-stage lists must have one entry per stage."""
        with pytest.raises(ConfigurationError, match='entries'):
            DSSNConfig(stage_dims=(8, 16), num_heads=(1, 1, 1, 1))

    def test_prompt_downsample(self):
        """Test the prompt downsample must match the number of stride-2 convs."""
        with pytest.raises(ConfigurationError):
            PromptEncoderConfig(channels=(4, 4, 8), downsample=16)

    @pytest.mark.parametrize('values', [
        {'patience': 10, 'max_epochs': 10},
        {'use_tapi': False, 'use_adaptive_decoder': True},
        {'threshold': 1.0},
        {'alpha': -0.5},
    ])
    def test_train_config(self, values):
        """Test inconsistent training options are refused."""
        with pytest.raises(ConfigurationError):
            TrainConfig(**values)


class TestOverrides:
    """Test per-section overrides."""

    def test_returns_copy(self, tiny_settings):
        """Test overrides leave the original untouched."""
        updated = tiny_settings.with_overrides('train', seed=7)
        assert updated.train.seed == 7
        assert tiny_settings.train.seed == 0

    def test_revalidates(self, tiny_settings):
        """Test overridden values are validated."""
        with pytest.raises(ConfigurationError):
            tiny_settings.with_overrides('train', patience=5)

    def test_unknown_section(self, tiny_settings):
        """Test overriding an unknown section raises."""
        with pytest.raises(ConfigurationError):
            tiny_settings.with_overrides('optimizer', lr=1.0)


class TestPerturbSpec:
    """Test robustness specs."""

    def test_sigma(self):
        """Test blur sigma scales with the level."""
        assert PerturbSpec(kind='gaussian_blur', levels=(4,), sigma_per_level=0.5).sigma(4) == 2.0

    def test_invalid_jpeg_level(self):
        """Test JPEG levels outside 1..100 are refused."""
        with pytest.raises(ConfigurationError):
            PerturbSpec(kind='jpeg', levels=(0,))
