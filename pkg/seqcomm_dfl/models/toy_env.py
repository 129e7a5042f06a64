"""
Tiny tabular Dec-POMDPs with exact dynamic-programming oracles.

They share the hospital environment's stepping interface, so Monte-Carlo estimators,
sequential selection and the guidance potential can be checked against exact values.
"""
import copy
import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from seqcomm_dfl.models.hospital import StepResult
from seqcomm_dfl.utils.errors import CapabilityError, UsageError

MAX_TABLE_ENTRIES = 10_000


@dataclass
class ToyEnvSpec:
    """
    Tabular environment description.

    Attributes:
        transitions: (S, J, S) next-state probabilities, J = n_actions ** n_agents
        rewards: (S, J) shared reward
        n_agents: Number of agents
        n_actions: Actions per agent
        observations: Optional (N, S, d) observation table; one-hot state for everyone if None
        initial_state: Start state after reset
        horizon: Episode length cap
    """
    transitions: np.ndarray
    rewards: np.ndarray
    n_agents: int
    n_actions: int
    observations: Optional[np.ndarray] = None
    initial_state: int = 0
    horizon: int = 1000


class ToyDecPOMDP:
    """An enumerable Dec-POMDP built from a ToyEnvSpec."""

    def __init__(self, spec: ToyEnvSpec):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.n_actions = spec.n_actions
        self.n_states = spec.rewards.shape[0]
        self.n_joint = spec.n_actions ** spec.n_agents
        self.transitions = np.asarray(spec.transitions, dtype=np.float64)
        self.rewards = np.asarray(spec.rewards, dtype=np.float64)
        if spec.observations is None:
            eye = np.eye(self.n_states)
            self.observation_table = np.stack([eye] * self.n_agents)
        else:
            self.observation_table = np.asarray(spec.observations, dtype=np.float64)
        self.current = spec.initial_state
        self.steps = 0
        self.rng = np.random.default_rng(0)

    # ----------------------------------------------------------- indexing
    def joint_index(self, actions: Sequence[int]) -> int:
        index = 0
        for a in actions:
            if a < 0 or a >= self.n_actions:
                raise UsageError(f"invalid action {a}")
            index = index * self.n_actions + int(a)
        return index

    def joint_actions(self, index: int) -> tuple:
        return tuple(itertools.product(range(self.n_actions), repeat=self.n_agents))[index]

    # ------------------------------------------------------------- episode
    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.current = self.spec.initial_state
        self.steps = 0
        return self.observations()

    def fork(self, seed: int) -> "ToyDecPOMDP":
        twin = copy.copy(self)
        twin.rng = np.random.default_rng(seed)
        return twin

    def observations(self) -> np.ndarray:
        return self.observation_table[:, self.current, :].copy()

    def global_state(self) -> np.ndarray:
        onehot = np.zeros(self.n_states)
        onehot[self.current] = 1.0
        return onehot

    @property
    def done(self) -> bool:
        return self.steps >= self.spec.horizon

    def step(self, actions: Sequence[int]) -> StepResult:
        if self.done:
            raise UsageError("step called after the episode ended")
        j = self.joint_index(actions)
        reward = float(self.rewards[self.current, j])
        u = self.rng.random()
        cumulative = np.cumsum(self.transitions[self.current, j])
        self.current = int(min(np.searchsorted(cumulative, u, side="right"), self.n_states - 1))
        self.steps += 1
        return StepResult(reward, self.current, self.observations(), self.done, {})

    # ------------------------------------------------------------- oracles
    def value_iteration(self, gamma: float, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
        """Optimal joint-action values Q*(s, a)."""
        q = np.zeros((self.n_states, self.n_joint))
        for _ in range(max_iter):
            v = q.max(axis=1)
            updated = self.rewards + gamma * self.transitions @ v
            if np.max(np.abs(updated - q)) < tol:
                return updated
            q = updated
        return q

    def finite_horizon_q(self, policy: Sequence[int], horizon: int, gamma: float) -> np.ndarray:
        """
        Q over ``horizon`` steps where the first joint action is free and the
        stationary joint policy (state -> joint index) is followed afterwards.
        """
        v = np.zeros(self.n_states)
        q = np.zeros((self.n_states, self.n_joint))
        for _ in range(horizon):
            q = self.rewards + gamma * self.transitions @ v
            v = q[np.arange(self.n_states), np.asarray(policy)]
        return q


def make_toy_env(spec: ToyEnvSpec) -> ToyDecPOMDP:
    """Validate a spec and build the environment."""
    n_states = np.asarray(spec.rewards).shape[0]
    n_joint = spec.n_actions ** spec.n_agents
    if n_states * n_joint > MAX_TABLE_ENTRIES:
        raise CapabilityError(f"toy env with {n_states} states and {n_joint} joint actions exceeds {MAX_TABLE_ENTRIES} entries")
    transitions = np.asarray(spec.transitions, dtype=np.float64)
    if transitions.shape != (n_states, n_joint, n_states):
        raise UsageError(f"transitions must have shape {(n_states, n_joint, n_states)}, got {transitions.shape}")
    if np.asarray(spec.rewards).shape != (n_states, n_joint):
        raise UsageError("rewards must have shape (S, n_actions ** n_agents)")
    if not np.allclose(transitions.sum(axis=2), 1.0):
        raise UsageError("transition rows must sum to one")
    return ToyDecPOMDP(spec)


def matrix_game(payoff: np.ndarray, n_agents: int = 2, n_actions: int = 2) -> ToyDecPOMDP:
    """Single-state repeated game with the given (J,) payoff vector."""
    n_joint = n_actions ** n_agents
    rewards = np.asarray(payoff, dtype=np.float64).reshape(1, n_joint)
    transitions = np.ones((1, n_joint, 1))
    return make_toy_env(ToyEnvSpec(transitions, rewards, n_agents, n_actions))


class TabularCritic:
    """
    Utility/mixing oracle with the same interface as the neural critic.

    Args:
        utility_fn: (agent, observation, visible_messages) -> (n_actions,) utilities
        n_actions: Actions per agent
        mix_fn: (chosen utilities, state) -> joint value; plain sum if None
    """

    def __init__(self, utility_fn: Callable, n_actions: int, mix_fn: Optional[Callable] = None):
        self.utility_fn = utility_fn
        self.n_actions = n_actions
        self.mix_fn = mix_fn

    def agent_utility(self, agent: int, observation: np.ndarray, visible: np.ndarray) -> np.ndarray:
        return np.asarray(self.utility_fn(agent, observation, visible), dtype=np.float64)

    def mix_values(self, chosen: np.ndarray, state: np.ndarray) -> float:
        if self.mix_fn is None:
            return float(np.sum(chosen))
        return float(self.mix_fn(chosen, state))
