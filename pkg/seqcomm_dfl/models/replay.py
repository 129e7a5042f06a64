"""
Uniform replay buffer of full transitions (s, o, M, a, r, s', o', ordering, dq_hat, dq_mc).
"""
from dataclasses import dataclass, fields

import numpy as np

from seqcomm_dfl.utils.errors import UsageError


@dataclass
class TransitionBatch:
    """
    A sampled batch; leading axis is the batch.

    Attributes:
        states: (B, state_dim)
        observations: (B, N, obs_dim)
        actions: (B, N) joint actions
        rewards: (B,)
        next_states: (B, state_dim)
        next_observations: (B, N, obs_dim)
        dones: (B,) 1.0 when the episode ended on this transition
        orders: (B, N) priority permutation used when acting
        dq_hat: (B, N) per-sender decision-impact estimate used for refinement
        dq_mc: (B, N) per-sender Monte-Carlo impact at the episode start (zero when none ran)
        messages: (B, N, d_m) messages sent when acting
    """
    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    orders: np.ndarray
    dq_hat: np.ndarray
    dq_mc: np.ndarray
    messages: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class ReplayBuffer:
    """
    Fixed-capacity ring buffer with uniform sampling.

    Args:
        capacity: Maximum transitions kept; the oldest are evicted first
        state_dim: Global state width
        n_agents: Number of agents
        obs_dim: Local observation width
        d_m: Message width
    """

    def __init__(self, capacity: int, state_dim: int, n_agents: int, obs_dim: int, d_m: int):
        if capacity < 1:
            raise UsageError("replay capacity must be at least 1")
        self.capacity = capacity
        self._size = 0
        self._next = 0
        self._store = TransitionBatch(
            states=np.zeros((capacity, state_dim)),
            observations=np.zeros((capacity, n_agents, obs_dim)),
            actions=np.zeros((capacity, n_agents), dtype=np.int64),
            rewards=np.zeros(capacity),
            next_states=np.zeros((capacity, state_dim)),
            next_observations=np.zeros((capacity, n_agents, obs_dim)),
            dones=np.zeros(capacity),
            orders=np.zeros((capacity, n_agents), dtype=np.int64),
            dq_hat=np.zeros((capacity, n_agents)),
            dq_mc=np.zeros((capacity, n_agents)),
            messages=np.zeros((capacity, n_agents, d_m)),
        )

    def __len__(self) -> int:
        return self._size

    def add(self, **transition) -> None:
        """Store one transition; keyword names follow TransitionBatch fields."""
        missing = {f.name for f in fields(TransitionBatch)} - set(transition)
        if missing:
            raise UsageError(f"transition is missing {sorted(missing)}")
        for name, value in transition.items():
            getattr(self._store, name)[self._next] = value
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample with replacement."""
        if self._size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        index = rng.integers(0, self._size, size=batch_size)
        return self.take(index)

    def take(self, index) -> TransitionBatch:
        return TransitionBatch(**{f.name: getattr(self._store, f.name)[index].copy()
                                  for f in fields(TransitionBatch)})

    def all(self) -> TransitionBatch:
        return self.take(np.arange(self._size))
