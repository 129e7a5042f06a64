"""
Tests for the replay buffer.
"""
import pytest
import numpy as np
import sys
import os

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from seqcomm_dfl.models.replay import ReplayBuffer
from seqcomm_dfl.utils.errors import UsageError

STATE, N, OBS, DM = 4, 2, 3, 2


def transition(reward):
    """A transition whose every field is stamped with ``reward``."""
    return dict(
        states=np.full(STATE, reward),
        observations=np.full((N, OBS), reward),
        actions=np.array([0, 1]),
        rewards=reward,
        next_states=np.full(STATE, reward),
        next_observations=np.full((N, OBS), reward),
        dones=0.0,
        orders=np.array([1, 0]),
        dq_hat=np.zeros(N),
        dq_mc=np.zeros(N),
        messages=np.zeros((N, DM)),
    )


class TestReplayBuffer:
    """Test cases for the ReplayBuffer class."""

    def setup_method(self):
        self.buffer = ReplayBuffer(3, STATE, N, OBS, DM)

    def test_add_and_len(self):
        """Test that adding grows the buffer."""
        assert len(self.buffer) == 0
        self.buffer.add(**transition(1.0))
        assert len(self.buffer) == 1

    def test_ring_eviction(self):
        """Test that the oldest transition is overwritten at capacity."""
        for r in range(5):
            self.buffer.add(**transition(float(r)))
        assert len(self.buffer) == 3
        assert sorted(self.buffer.all().rewards.tolist()) == [2.0, 3.0, 4.0]

    def test_missing_field(self):
        """Test that an incomplete transition is rejected."""
        data = transition(0.0)
        del data["orders"]
        with pytest.raises(UsageError):
            self.buffer.add(**data)

    def test_sample_empty(self):
        """Test that sampling an empty buffer raises."""
        with pytest.raises(UsageError):
            self.buffer.sample(2, np.random.default_rng(0))

    def test_sample_shapes(self):
        """Test batch shapes and that sampled rows stay consistent across fields."""
        for r in range(3):
            self.buffer.add(**transition(float(r)))
        batch = self.buffer.sample(8, np.random.default_rng(0))
        assert len(batch) == 8
        assert batch.observations.shape == (8, N, OBS)
        assert batch.orders.dtype == np.int64
        assert np.array_equal(batch.states[:, 0], batch.rewards)

    def test_take_copies(self):
        """Test that returned batches do not alias the storage."""
        self.buffer.add(**transition(1.0))
        batch = self.buffer.all()
        batch.rewards[0] = 99.0
        assert self.buffer.all().rewards[0] == 1.0

    def test_invalid_capacity(self):
        """Test that a zero capacity raises."""
        with pytest.raises(UsageError):
            ReplayBuffer(0, STATE, N, OBS, DM)
