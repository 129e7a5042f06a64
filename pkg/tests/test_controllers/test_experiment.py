"""
Tests for the experiment runner.
"""
import csv
import json
import pytest
import tempfile
import shutil
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.controllers.experiment import (
    ABLATION_COLUMNS, THREADS_VARIABLE, ExperimentRunner, ExperimentSpec, _mean_std, load_config,
    parse_seeds, random_policy_reward, run, worker_count,
)
from seqcomm_dfl.controllers.selftest import tiny_config
from seqcomm_dfl.models.config import EnvConfig
from seqcomm_dfl.utils.errors import ConfigError


class TestParsing:
    """Test cases for seed lists, config files and the worker setting."""

    def test_parse_seeds(self):
        """Test ranges, lists and single seeds."""
        assert parse_seeds("1..4") == [1, 2, 3, 4]
        assert parse_seeds("3, 1,2") == [3, 1, 2]
        assert parse_seeds("7") == [7]

    @pytest.mark.parametrize("text", ["", "a..b", "1,x", "5..1"])
    def test_parse_seeds_rejects(self, text):
        """Test that malformed or empty lists raise."""
        with pytest.raises(ConfigError):
            parse_seeds(text)

    def test_load_config_defaults(self):
        """Test that no path means defaults."""
        assert load_config(None).k_inner == 15

    def test_load_config_errors(self):
        """Test missing files, malformed JSON and non-object JSON."""
        temp_dir = tempfile.mkdtemp()
        try:
            with pytest.raises(ConfigError):
                load_config(os.path.join(temp_dir, "missing.json"))
            broken = os.path.join(temp_dir, "broken.json")
            with open(broken, 'w') as f:
                f.write("{not json")
            with pytest.raises(ConfigError):
                load_config(broken)
            listing = os.path.join(temp_dir, "list.json")
            with open(listing, 'w') as f:
                json.dump([1, 2], f)
            with pytest.raises(ConfigError):
                load_config(listing)
        finally:
            shutil.rmtree(temp_dir)

    def test_worker_count(self, monkeypatch):
        """Test the environment variable and its fallback."""
        monkeypatch.delenv(THREADS_VARIABLE, raising=False)
        assert worker_count() == 1
        monkeypatch.setenv(THREADS_VARIABLE, "4")
        assert worker_count() == 4
        monkeypatch.setenv(THREADS_VARIABLE, "0")
        assert worker_count() == 1
        monkeypatch.setenv(THREADS_VARIABLE, "many")
        with pytest.raises(ConfigError):
            worker_count()

    def test_mean_std(self):
        """Test the sample standard deviation and the single-value case."""
        mean, std = _mean_std([1.0, 3.0])
        assert mean == 2.0
        assert std == pytest.approx(2.0 ** 0.5)
        assert _mean_std([5.0]) == (5.0, 0.0)

    @pytest.mark.parametrize("spec", [
        ExperimentSpec(mode="dance"),
        ExperimentSpec(seeds=[]),
        ExperimentSpec(seeds=[1, 1]),
        ExperimentSpec(iters=-1),
        ExperimentSpec(eval_episodes=0),
        ExperimentSpec(ablation="no_everything"),
        ExperimentSpec(mode="train", ablation="comm_dim"),
    ])
    def test_invalid_specs(self, spec):
        """Test spec validation."""
        with pytest.raises(ConfigError):
            spec.validate()

    def test_random_policy_reward(self):
        """Test that the random baseline is finite and reproducible."""
        env = EnvConfig(n_patients=6, horizon=4)
        assert random_policy_reward(env, 3, 1) == random_policy_reward(env, 3, 1)


class TestRunner:
    """Test cases for the runner modes on a tiny configuration."""

    def setup_method(self):
        """Set up an output directory and a tiny experiment file."""
        self.temp_dir = tempfile.mkdtemp()
        self.out = os.path.join(self.temp_dir, "runs")
        self.config_path = os.path.join(self.temp_dir, "tiny.json")
        with open(self.config_path, 'w') as f:
            json.dump(tiny_config().to_dict(), f)

    def teardown_method(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.temp_dir)

    def spec(self, mode, seeds=(0,), **kwargs):
        return ExperimentSpec(config_path=self.config_path, mode=mode, seeds=list(seeds),
                              out_dir=self.out, iters=1, eval_episodes=1, **kwargs)

    def test_train_then_eval(self):
        """Test that eval reads what train wrote."""
        assert run(self.spec("train", seeds=(0, 1))) == 0
        with open(os.path.join(self.out, "train.json")) as f:
            report = json.load(f)
        assert report["seeds"] == [0, 1]
        assert len(report["runs"]) == 2
        assert os.path.exists(os.path.join(self.out, "seed_1", "checkpoints", "latest.npz"))

        assert run(self.spec("eval", seeds=(0, 1))) == 0
        with open(os.path.join(self.out, "seed_0", "eval.json")) as f:
            assert json.load(f)["episodes"] == 1

    def test_iters_override(self):
        """Test that --iters replaces the configured iteration count."""
        runner = ExperimentRunner(self.spec("train"))
        assert runner.base.iterations == 1

    def test_train_with_ablation(self):
        """Test that train mode applies the requested ablation."""
        report = ExperimentRunner(self.spec("train", ablation="no_comm")).run()
        assert report["method"] == "omd"
        assert report["ablation"] == "no_comm"

    def test_eval_without_training_fails(self):
        """Test that evaluating a missing run exits with status 1."""
        assert run(self.spec("eval", seeds=(3,))) == 1

    def test_bad_config_exits_with_two(self):
        """Test that configuration errors map to exit status 2."""
        with open(self.config_path, 'w') as f:
            json.dump({"train": {"k_iner": 1}}, f)
        assert run(self.spec("train")) == 2

    def test_compare(self):
        """Test the comparison report and series file."""
        report = ExperimentRunner(self.spec("compare")).run()
        assert set(report["methods"]) == {"seqcomm_dfl", "omd"}
        assert "improvement_ratio" in report
        assert report["severity_wins"] in (0, 1)
        with open(os.path.join(self.out, "compare_series.csv")) as f:
            rows = list(csv.DictReader(f))
        assert {row["method"] for row in rows} == {"seqcomm_dfl", "omd"}
        assert os.path.exists(os.path.join(self.out, "compare.json"))

    def test_ablate(self):
        """Test the ablation grid with deltas against the full variant."""
        report = ExperimentRunner(self.spec("ablate")).run()
        assert report["reference"] == "full"
        rows = {row["variant"]: row for row in report["rows"]}
        assert set(rows) == {"full", "no_va", "parallel_msgs", "no_gp", "no_influence"}
        assert rows["full"]["delta"] == 0.0
        with open(os.path.join(self.out, "ablation.csv")) as f:
            assert next(csv.reader(f)) == list(ABLATION_COLUMNS)

    def test_comm_dim_sweep(self):
        """Test the message-width sweep and its reference."""
        report = ExperimentRunner(self.spec("ablate", ablation="comm_dim")).run()
        assert report["reference"] == "d_m=8"
        assert [row["variant"] for row in report["rows"]] == ["d_m=4", "d_m=8", "d_m=16", "d_m=32"]
