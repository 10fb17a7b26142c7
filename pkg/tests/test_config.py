"""
Tests for loading and validating run configurations.
"""

import math

import pytest

from src.schemas.config import ConfigError, load_config, parse_config

MODEL_SECTION = """
[model]
name = "gauss_mean"
prior_mean = [0.0]
prior_cov = [[1.0]]

[model.synthetic]
theta = [1.0]
n = 10
"""


def _config(top: str = "", model: str = MODEL_SECTION) -> str:
    return top + "\n" + model


class TestLoadConfig:
    def test_defaults(self, toml_writer, tmp_path):
        cfg = load_config(toml_writer(_config()))
        assert math.isinf(cfg.epsilon)
        assert cfg.schedule.kind == "sequential"
        assert cfg.alpha == 1.0
        assert cfg.estimator == "abc"
        assert cfg.output_dir == tmp_path / "output"

    def test_schedule_shorthand(self, toml_writer):
        cfg = load_config(toml_writer(_config('schedule = "parallel"')))
        assert cfg.schedule.kind == "parallel"

    def test_block_parallel_table(self, toml_writer):
        cfg = load_config(toml_writer(_config('schedule = { kind = "block_parallel", n_core = 4 }')))
        assert cfg.schedule.label == "block_parallel(4)"

    def test_block_parallel_needs_cores(self, toml_writer):
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config('schedule = "block_parallel"')))
        assert info.value.fields == ["schedule"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(tmp_path / "nope.toml")
        assert info.value.code == "CONFIG_ERROR"

    def test_bad_toml(self, toml_writer):
        with pytest.raises(ConfigError):
            load_config(toml_writer("epsilon = = 1"))


class TestValidation:
    def test_alpha_zero_names_field(self, toml_writer):
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config("alpha = 0.0")))
        assert info.value.fields == ["alpha"]
        assert "alpha" in str(info.value)

    def test_unknown_key(self, toml_writer):
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config("mystery = 1")))
        assert "mystery" in info.value.fields

    def test_nested_field_path(self, toml_writer):
        model = MODEL_SECTION.replace('prior_cov = [[1.0]]', 'prior_cov = [[1.0]]\nnoise_sd = -1.0')
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config(model=model)))
        assert info.value.fields == ["model.noise_sd"]

    def test_prior_cov_not_positive_definite(self, toml_writer):
        model = MODEL_SECTION.replace("prior_cov = [[1.0]]", "prior_cov = [[-1.0]]")
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config(model=model)))
        assert info.value.fields == ["model.prior_cov"]

    def test_target_above_cap(self, toml_writer):
        with pytest.raises(ConfigError):
            load_config(toml_writer(_config("m_target = 100\nm_max = 10")))

    def test_missing_data_file(self, toml_writer):
        model = '[model]\nname = "gauss_mean"\nprior_mean = [0.0]\nprior_cov = [[1.0]]\ndata_file = "absent.csv"\n'
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer(_config(model=model)))
        assert info.value.fields == ["model.data_file"]

    def test_data_source_required(self, toml_writer):
        model = '[model]\nname = "gauss_mean"\nprior_mean = [0.0]\nprior_cov = [[1.0]]\n'
        with pytest.raises(ConfigError):
            load_config(toml_writer(_config(model=model)))

    def test_data_file_resolves_next_to_config(self, toml_writer, tmp_path):
        (tmp_path / "obs.csv").write_text("0.1\n0.2\n", encoding="utf-8")
        model = '[model]\nname = "gauss_mean"\nprior_mean = [0.0]\nprior_cov = [[1.0]]\ndata_file = "obs.csv"\n'
        cfg = load_config(toml_writer(_config(model=model)))
        assert cfg.model.data_file == tmp_path / "obs.csv"

    def test_exact_estimator_only_for_gauss_mean(self):
        data = {
            "estimator": "exact",
            "model": {
                "name": "ar1",
                "prior_mean": [0.0, 0.0],
                "prior_cov": [[1.0, 0.0], [0.0, 1.0]],
                "synthetic": {"theta": [0.2, 0.0], "n": 20},
            },
        }
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_recycling_rejects_markov_model(self):
        data = {
            "use_recycling": True,
            "model": {
                "name": "ar1",
                "prior_mean": [0.0, 0.0],
                "prior_cov": [[1.0, 0.0], [0.0, 1.0]],
                "synthetic": {"theta": [0.2, 0.0], "n": 20},
            },
        }
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_max_stable_needs_layout(self):
        data = {
            "model": {
                "name": "max_stable",
                "prior_mean": [2.0, 1.0],
                "prior_cov": [[1.0, 0.0], [0.0, 1.0]],
                "synthetic": {"theta": [2.0, 1.4], "n": 5},
            },
        }
        with pytest.raises(ConfigError):
            parse_config(data)


class TestSections:
    def test_abc_config_and_policy(self, toml_writer):
        cfg = load_config(toml_writer(_config("epsilon = 0.5\nm_target = 20\nm_max = 1000\nalpha = 0.5")))
        abc = cfg.abc_config()
        assert abc.epsilon == 0.5 and abc.m_target == 20 and abc.m_max == 1000
        assert cfg.abc_config(epsilon=2.0).epsilon == 2.0
        assert cfg.update_policy().alpha == 0.5

    def test_heatmap_axes(self):
        data = {
            "model": {
                "name": "gauss_mean",
                "prior_mean": [0.0],
                "prior_cov": [[1.0]],
                "synthetic": {"theta": [0.0], "n": 1},
            },
            "heatmap": {"nu_min": 1.0, "nu_max": 10.0, "n_nu": 4, "c_min": 1.0, "c_max": 5.0, "n_c": 3},
        }
        nu_axis, c_axis = parse_config(data).heatmap.axes()
        assert nu_axis.tolist() == [1.0, 4.0, 7.0, 10.0]
        assert c_axis.tolist() == [1.0, 3.0, 5.0]

    def test_heatmap_bounds(self):
        data = {
            "model": {
                "name": "gauss_mean",
                "prior_mean": [0.0],
                "prior_cov": [[1.0]],
                "synthetic": {"theta": [0.0], "n": 1},
            },
            "heatmap": {"nu_min": 10.0, "nu_max": 1.0, "c_min": 1.0, "c_max": 5.0},
        }
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_compare_schedule_shorthand(self, toml_writer):
        text = _config(model=MODEL_SECTION + '\n[compare]\nschedules = ["sequential", "parallel"]\nseeds = [1, 2]\n')
        cfg = load_config(toml_writer(text))
        assert [s.kind for s in cfg.compare.schedules] == ["sequential", "parallel"]
        assert cfg.compare.seeds == [1, 2]

    def test_heatmap_only_needs_no_model(self, toml_writer, tmp_path):
        text = 'output_dir = "hm"\n[heatmap]\nnu_min = 1.0\nnu_max = 2.0\nc_min = 1.0\nc_max = 2.0\n'
        cfg = load_config(toml_writer(text))
        assert cfg.model is None
        assert cfg.output_dir == tmp_path / "hm"
        with pytest.raises(ConfigError) as info:
            cfg.prior()
        assert info.value.fields == ["model"]

    def test_model_required_without_heatmap(self, toml_writer):
        with pytest.raises(ConfigError) as info:
            load_config(toml_writer("epsilon = 0.5\n"))
        assert info.value.fields == ["model"]
