"""
Tests for the training loop.
"""
import json
import pytest
import tempfile
import shutil
import numpy as np
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.controllers.bilevel import batch_messages
from seqcomm_dfl.controllers.comm import message_effects, value_aware_loss
from seqcomm_dfl.controllers.selftest import tiny_config
from seqcomm_dfl.controllers.trainer import LAST_WINDOW, SeqCommTrainer, derived_seed
from seqcomm_dfl.utils.errors import ConfigError, UsageError
from seqcomm_dfl.utils.storage import RunStorage


class TestExperience:
    """Test cases for experience collection."""

    def test_collect_fills_buffer(self):
        """Test that every step lands in the replay buffer."""
        trainer = SeqCommTrainer(tiny_config())
        stats = trainer.collect_experience(2, seed=0, epsilon=0.1)
        assert len(stats) == 2
        assert len(trainer.buffer) == sum(e.steps for e in stats)
        assert all(1 <= e.steps <= 4 for e in stats)

    def test_evaluate_stores_nothing(self):
        """Test that evaluation leaves the buffer untouched."""
        trainer = SeqCommTrainer(tiny_config())
        result = trainer.evaluate(2, seed=5)
        assert len(trainer.buffer) == 0
        assert result["episodes"] == 2
        assert np.isfinite(result["mean_episode_reward"])

    def test_mc_grounding_runs_before_warmup(self):
        """Test per-sender Monte-Carlo estimates at the episode start."""
        trainer = SeqCommTrainer(tiny_config())
        trainer.env.reset(0)
        estimates = trainer.estimate_mc(1)
        assert estimates.shape == (3,)
        assert np.all(np.isfinite(estimates))

    def test_derived_seed_is_stable(self):
        """Test the seed derivation helper."""
        assert derived_seed(1, 2) == derived_seed(1, 2)
        assert derived_seed(1, 2) != derived_seed(2, 1)

    def test_invalid_config_rejected(self):
        """Test that construction validates the configuration."""
        with pytest.raises(ConfigError):
            SeqCommTrainer(tiny_config(tau=0.0))

    def test_sampling_empty_buffer(self):
        """Test that an update before any experience raises."""
        trainer = SeqCommTrainer(tiny_config())
        with pytest.raises(UsageError):
            trainer.buffer.sample(4, trainer.sample_rng)


class TestOuterStep:
    """Test cases for one world-model update."""

    def make_step(self, **overrides):
        trainer = SeqCommTrainer(tiny_config(**overrides))
        trainer.collect_experience(2, seed=0, epsilon=0.1)
        batch = trainer.buffer.sample(trainer.config.batch_size, trainer.sample_rng)
        problem = trainer.make_problem(0, batch, batch)
        problem.run_inner()
        return trainer, problem

    def test_update_is_clipped(self):
        """Test that θ moves by at most η_θ times the clip norm."""
        trainer, problem = self.make_step(eta_theta=1e-2, clip_norm=0.5)
        before = np.concatenate([p.data.ravel() for p in trainer.world.parameters()])
        report = trainer.outer_step(problem)
        after = np.concatenate([p.data.ravel() for p in trainer.world.parameters()])
        assert report.grad_norm > 0.0
        assert np.linalg.norm(after - before) <= 1e-2 * 0.5 + 1e-12

    def test_report_losses(self):
        """Test that every enabled loss term is reported."""
        trainer, problem = self.make_step()
        report = trainer.outer_step(problem)
        for value in (report.loss_model, report.loss_aware, report.loss_va, report.loss_inf, report.loss_pred):
            assert np.isfinite(value)
        assert 0.0 <= report.loss_aware <= trainer.config.epsilon_margin
        assert report.loss_pred >= 0.0

    def test_value_aware_loss_follows_beta(self):
        """Test that L_VA uses stored MC impacts at β = 0 and the critic at β = 1."""
        trainer, problem = self.make_step()
        batch = problem.model_batch
        batch.dq_mc = np.random.default_rng(3).normal(size=batch.dq_mc.shape)
        messages = batch_messages(trainer.world, batch, trainer.config)
        delta_q, _, _ = message_effects(trainer.critic, batch.observations, messages, trainer.config.tau)
        critic_value = value_aware_loss(delta_q).item()

        report = trainer.outer_step(problem, beta=0.0)
        assert report.loss_va == pytest.approx(-batch.dq_mc.mean())

        trainer, problem = self.make_step()
        assert trainer.outer_step(problem, beta=1.0).loss_va == pytest.approx(critic_value)

    def test_disabled_terms_report_zero(self):
        """Test that switched-off message losses contribute nothing."""
        trainer, problem = self.make_step(no_va=True, no_influence=True, alpha_pred=0.0)
        report = trainer.outer_step(problem)
        assert report.loss_va == 0.0
        assert report.loss_inf == 0.0
        assert report.loss_pred == 0.0


class TestTraining:
    """Test cases for full outer iterations with storage."""

    def setup_method(self):
        """Set up test environment with temporary directory."""
        self.temp_dir = tempfile.mkdtemp()
        self.storage = RunStorage(self.temp_dir)

    def teardown_method(self):
        """Clean up temporary directory."""
        shutil.rmtree(self.temp_dir)

    def test_train_writes_artifacts(self):
        """Test metrics, summary, config and checkpoints of a two-iteration run."""
        result = SeqCommTrainer(tiny_config(), self.storage).train()
        assert len(result.metrics) == 2
        rows = self.storage.load_metrics()
        assert [row["iteration"] for row in rows] == [1, 2]
        assert rows[0]["beta"] == 0.0
        assert rows[1]["beta"] == 1.0
        assert self.storage.has_checkpoint("latest")
        assert self.storage.has_checkpoint("iter_00002")
        with open(os.path.join(self.temp_dir, "summary.json")) as f:
            summary = json.load(f)
        assert summary["iterations"] == 2
        assert summary["method"] == "seqcomm_dfl"
        assert self.storage.load_config()["train"]["k_inner"] == 3

    def test_metrics_are_finite(self):
        """Test that losses and norms are finite numbers."""
        result = SeqCommTrainer(tiny_config()).train()
        for row in result.metrics:
            for key in ("loss_model", "loss_true", "hypergrad_norm", "cg_residual", "message_gap"):
                assert np.isfinite(getattr(row, key))
            assert row.cg_iterations <= 3

    def test_world_model_moves(self):
        """Test that an outer step changes the world-model parameters."""
        trainer = SeqCommTrainer(tiny_config(iterations=1, eta_theta=1e-2))
        before = [p.data.copy() for p in trainer.world.parameters()]
        trainer.train()
        assert any(not np.array_equal(b, p.data) for b, p in zip(before, trainer.world.parameters()))

    def test_checkpoint_round_trip(self):
        """Test that a reloaded trainer evaluates identically."""
        trainer = SeqCommTrainer(tiny_config(), self.storage)
        trainer.train()
        fresh = SeqCommTrainer(tiny_config(seed=9))
        fresh.load_arrays(self.storage.load_checkpoint("latest"))
        assert fresh.evaluate(1, seed=3) == trainer.evaluate(1, seed=3)

    @pytest.mark.parametrize("ablation", ["no_comm", "no_va", "parallel_msgs", "no_gp", "no_influence"])
    def test_ablations_train(self, ablation):
        """Test one iteration of every ablation."""
        config = tiny_config(iterations=1).with_ablation(ablation)
        result = SeqCommTrainer(config).train()
        assert result.summary["ablation"] == ablation
        if ablation == "no_comm":
            assert result.summary["method"] == "omd"
            assert result.metrics[0].loss_va == 0.0

    def test_summary_window(self):
        """Test the summary keys and the early/late split."""
        result = SeqCommTrainer(tiny_config(iterations=3)).train()
        summary = result.summary
        assert LAST_WINDOW == 50
        assert summary["mean_last50_episode_reward"] == pytest.approx(
            np.mean([r.episode_reward for r in result.metrics]))
        squares = {r.iteration: r.hypergrad_norm ** 2 for r in result.metrics}
        assert summary["hypergrad_sq_norm_early"] == pytest.approx(squares[1])
        assert summary["hypergrad_sq_norm_late"] == pytest.approx((squares[2] + squares[3]) / 2.0)

    def test_windows_split_at_warmup(self):
        """Test that the warmup boundary iteration counts only toward the early window."""
        result = SeqCommTrainer(tiny_config(iterations=2, warmup_iterations=2)).train()
        squares = [r.hypergrad_norm ** 2 for r in result.metrics]
        assert result.summary["hypergrad_sq_norm_early"] == pytest.approx(np.mean(squares))
        assert result.summary["hypergrad_sq_norm_late"] is None

    def test_training_is_deterministic(self):
        """Test that two runs from the same seed produce identical metrics and parameters."""
        first, second = SeqCommTrainer(tiny_config()), SeqCommTrainer(tiny_config())
        rows = [first.train().metrics, second.train().metrics]
        strip = [[{k: v for k, v in r.to_dict().items() if k != "wall_clock"} for r in run] for run in rows]
        assert strip[0] == strip[1]
        for a, b in zip(first.world.parameters() + first.critic.parameters(),
                        second.world.parameters() + second.critic.parameters()):
            assert np.array_equal(a.data, b.data)
