"""
Tests for the configuration model.
"""
import json
import pytest
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.models.config import ABLATION_GRID, ABLATIONS, EnvConfig, TrainConfig
from seqcomm_dfl.utils.errors import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), "configs")


class TestTrainConfig:
    """Test cases for the TrainConfig class."""

    def test_published_defaults(self):
        """Test the default hyperparameter table."""
        config = TrainConfig()
        assert (config.eta_theta, config.eta_w, config.cg_damping) == (3e-5, 1e-4, 0.1)
        assert (config.k_inner, config.k_cg, config.d_m) == (15, 10, 8)
        assert (config.lambda_va, config.lambda_inf, config.epsilon_margin) == (0.1, 0.01, 0.1)
        assert config.env.n_patients == 100

    def test_round_trip_through_dict(self):
        """Test that to_dict/from_dict preserves every value."""
        config = TrainConfig(d_m=16, no_gp=True, env=EnvConfig(horizon=7))
        restored = TrainConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert restored == config

    def test_partial_dict_merges_defaults(self):
        """Test that omitted keys take their defaults."""
        config = TrainConfig.from_dict({"train": {"k_inner": 3}})
        assert config.k_inner == 3
        assert config.k_cg == 10

    def test_unknown_key_lists_defaults(self):
        """Test that a typo raises with the valid keys in the message."""
        with pytest.raises(ConfigError) as info:
            TrainConfig.from_dict({"train": {"k_iner": 3}})
        assert "k_iner" in str(info.value)
        assert "k_inner=15" in str(info.value)

    def test_unknown_block(self):
        """Test that an unexpected top-level block raises."""
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"model": {}})

    @pytest.mark.parametrize("overrides", [
        {"tau": 0.0}, {"gamma": 1.5}, {"d_m": 0}, {"eta_theta": -1.0}, {"curvature": "diagonal"},
    ])
    def test_invalid_values(self, overrides):
        """Test that out-of-range values raise."""
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"train": overrides})

    def test_ablation_switches(self):
        """Test that ablations zero the matching loss weights."""
        config = TrainConfig()
        assert config.with_ablation("no_va").effective_lambda_va == 0.0
        assert config.with_ablation("no_influence").effective_lambda_inf == 0.0
        silent = config.with_ablation("no_comm")
        assert not silent.comm_enabled
        assert silent.effective_lambda_aware == 0.0
        assert silent.ablation_name() == "no_comm"
        assert config.ablation_name() == "full"
        with pytest.raises(ConfigError):
            config.with_ablation("no_everything")

    def test_grid_names_are_known(self):
        """Test that the ablation grid only names known variants."""
        assert set(ABLATION_GRID) <= set(ABLATIONS)

    def test_warmup_schedules(self):
        """Test the annealing weight and exploration schedule."""
        config = TrainConfig(warmup_iterations=10)
        assert config.beta(0) == 0.0
        assert config.beta(5) == pytest.approx(0.5)
        assert config.beta(20) == 1.0
        assert config.epsilon(10) == pytest.approx(config.epsilon_end)
        assert TrainConfig(warmup_iterations=0).beta(0) == 1.0

    @pytest.mark.parametrize("name", ["default.json", "desk_scale.json"])
    def test_shipped_configs_load(self, name):
        """Test that bundled experiment files validate."""
        with open(os.path.join(CONFIG_DIR, name)) as f:
            config = TrainConfig.from_dict(json.load(f))
        assert config.env.n_agents == 3

    def test_readme_example_loads(self):
        """Test that the JSON example in the README is a valid config."""
        readme = os.path.join(os.path.dirname(CONFIG_DIR), "README.md")
        with open(readme) as f:
            text = f.read()
        example = text.split("```json", 1)[1].split("```", 1)[0]
        config = TrainConfig.from_dict(json.loads(example))
        assert (config.k_inner, config.d_m, config.iterations) == (15, 8, 500)
        assert config.env.horizon == 50


class TestEnvConfig:
    """Test cases for the EnvConfig class."""

    def test_efficacy_list_becomes_tuple(self):
        """Test that JSON lists are normalized."""
        config = EnvConfig.from_dict({"efficacy": [0.0, 0.1, 0.2]})
        assert config.efficacy == (0.0, 0.1, 0.2)

    @pytest.mark.parametrize("overrides", [
        {"n_agents": 4}, {"n_patients": 2}, {"n_actions": 2}, {"match_probability": 1.5}, {"horizon": 0},
    ])
    def test_invalid_env(self, overrides):
        """Test that impossible wards raise."""
        with pytest.raises(ConfigError):
            EnvConfig.from_dict(overrides)

    def test_unknown_env_key(self):
        """Test that unknown environment keys raise."""
        with pytest.raises(ConfigError):
            EnvConfig.from_dict({"beds": 3})
