"""
Tests for the tabular oracle environments.
"""
import pytest
import numpy as np
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.models.toy_env import TabularCritic, ToyEnvSpec, make_toy_env, matrix_game
from seqcomm_dfl.utils.errors import CapabilityError, UsageError


def two_state_chain():
    """One agent, two actions: action 1 moves to the rewarding state 1."""
    transitions = np.zeros((2, 2, 2))
    transitions[:, 0, 0] = 1.0
    transitions[:, 1, 1] = 1.0
    rewards = np.array([[0.0, 0.0], [1.0, 1.0]])
    return make_toy_env(ToyEnvSpec(transitions, rewards, n_agents=1, n_actions=2, horizon=10))


class TestToyDecPOMDP:
    """Test cases for indexing, stepping and the exact oracles."""

    def test_joint_index_round_trip(self):
        """Test joint indexing against the lexicographic action table."""
        env = matrix_game(np.arange(4.0))
        for j in range(4):
            assert env.joint_index(env.joint_actions(j)) == j

    def test_matrix_game_reward(self):
        """Test that the payoff vector is paid per joint action."""
        env = matrix_game(np.array([1.0, 2.0, 3.0, 4.0]))
        env.reset(0)
        assert env.step([1, 0]).reward == 3.0

    def test_value_iteration_closed_form(self):
        """Test Q* on the chain: V*(1) = 1 / (1 - γ)."""
        env = two_state_chain()
        q = env.value_iteration(0.9)
        assert q[1].max() == pytest.approx(10.0)
        assert q[0, 1] == pytest.approx(0.9 * 10.0)

    def test_finite_horizon_q(self):
        """Test a two-step finite-horizon value."""
        env = two_state_chain()
        q = env.finite_horizon_q([1, 1], horizon=2, gamma=0.5)
        assert q[1, 1] == pytest.approx(1.0 + 0.5 * 1.0)
        assert q[0, 0] == pytest.approx(0.0)

    def test_horizon_and_step_after_done(self):
        """Test episode termination."""
        env = two_state_chain()
        env.reset(0)
        for _ in range(10):
            env.step([1])
        assert env.done
        with pytest.raises(UsageError):
            env.step([1])

    def test_invalid_action(self):
        """Test that invalid actions raise."""
        env = two_state_chain()
        env.reset(0)
        with pytest.raises(UsageError):
            env.step([2])

    def test_size_guard(self):
        """Test that oversized tables raise a capability error."""
        n_joint = 10 ** 4
        spec = ToyEnvSpec(np.ones((2, n_joint, 2)) / 2, np.zeros((2, n_joint)), n_agents=4, n_actions=10)
        with pytest.raises(CapabilityError):
            make_toy_env(spec)

    def test_rows_must_be_stochastic(self):
        """Test that transition rows must sum to one."""
        spec = ToyEnvSpec(np.ones((1, 4, 1)) * 0.5, np.zeros((1, 4)), n_agents=2, n_actions=2)
        with pytest.raises(UsageError):
            make_toy_env(spec)

    def test_fork_keeps_position(self):
        """Test that a fork starts from the current state with its own noise."""
        env = two_state_chain()
        env.reset(0)
        env.step([1])
        twin = env.fork(5)
        assert twin.current == 1
        assert np.array_equal(twin.global_state(), [0.0, 1.0])


class TestTabularCritic:
    """Test cases for the tabular critic."""

    def test_default_mix_is_sum(self):
        """Test that the default mixer sums the chosen utilities."""
        critic = TabularCritic(lambda agent, obs, visible: np.array([agent, 1.0]), n_actions=2)
        assert np.array_equal(critic.agent_utility(3, None, None), [3.0, 1.0])
        assert critic.mix_values(np.array([1.0, 2.0]), None) == 3.0
