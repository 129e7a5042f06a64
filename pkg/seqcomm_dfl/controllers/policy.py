"""
Decentralized acting: messages, priority ordering and sequential action selection
for one environment step.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from seqcomm_dfl.controllers.comm import (
    DETERMINISTIC, STOCHASTIC, PriorityOrder, delta_q_matrix, guidance_potential,
    hybrid_delta_q, priority_order, sequential_select,
)
from seqcomm_dfl.models.config import TrainConfig
from seqcomm_dfl.models.nets import Critic, WorldModel
from seqcomm_dfl.models.tensor import no_grad


@dataclass
class Decision:
    """
    Everything decided at one step.

    Attributes:
        actions: (N,) joint action
        messages: (N, d_m) messages actually sent
        order: Acting order
        dq_hat: (N,) per-sender impact estimate used for refinement
    """
    actions: np.ndarray
    messages: np.ndarray
    order: PriorityOrder
    dq_hat: np.ndarray


class SeqCommPolicy:
    """
    Three-phase acting: message generation, ordering by guidance potential, then
    leader-follower action selection.

    Args:
        world: World model providing the message encoder and refinement net
        critic: Critic providing agent utilities and mixing
        config: Training configuration (ablation switches, temperatures)
    """

    def __init__(self, world: WorldModel, critic: Critic, config: TrainConfig):
        self.world = world
        self.critic = critic
        self.config = config
        self.n_agents = critic.n_agents
        self.d_m = critic.d_m

    def base_messages(self, observations: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.world.encode_message(observations).data.copy()

    def messages(self, observations: np.ndarray, mc: Optional[np.ndarray] = None,
                 beta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
        """Refined messages and the per-sender estimate they were refined with."""
        if not self.config.comm_enabled:
            return np.zeros((self.n_agents, self.d_m)), np.zeros(self.n_agents)
        base = self.base_messages(observations)
        critic_estimate = delta_q_matrix(self.critic, observations, base).per_sender()
        mc = np.zeros(self.n_agents) if mc is None else mc
        dq_hat = hybrid_delta_q(mc, critic_estimate, beta)
        with no_grad():
            refined = self.world.refine_message(base, dq_hat, self.config.refine_scale).data.copy()
        return refined, dq_hat

    def order(self, state: np.ndarray, observations: np.ndarray, messages: np.ndarray,
              rng: np.random.Generator, stochastic: bool) -> PriorityOrder:
        if self.config.no_gp:
            permutation = rng.permutation(self.n_agents)
            return PriorityOrder(permutation, np.zeros(self.n_agents), STOCHASTIC)
        potentials = guidance_potential(self.critic, state, observations, messages,
                                        self.config.gp_orderings, rng)
        mode = STOCHASTIC if stochastic else DETERMINISTIC
        return priority_order(potentials, mode, self.config.tau_gumbel, rng)

    def act(self, state: np.ndarray, observations: np.ndarray, rng: np.random.Generator,
            epsilon: float = 0.0, stochastic: bool = True, mc: Optional[np.ndarray] = None,
            beta: float = 1.0, override: Optional[Tuple[int, np.ndarray]] = None) -> Decision:
        """
        Decide one joint action.

        Args:
            state: Global state vector (used for mixing inside the guidance potential)
            observations: (N, obs_dim) local observations
            rng: Generator for ordering noise and exploration
            epsilon: Exploration rate
            stochastic: Gumbel-perturbed ordering when True, deterministic otherwise
            mc: Optional per-sender Monte-Carlo impact estimates
            beta: Weight of the critic estimate against ``mc``
            override: (sender, message) replacing that sender's message
        """
        messages, dq_hat = self.messages(observations, mc, beta)
        if override is not None and self.config.comm_enabled:
            sender, message = override
            messages = messages.copy()
            messages[sender] = message
        order = self.order(state, observations, messages, rng, stochastic)
        actions = sequential_select(self.critic, observations, messages, order, epsilon, rng,
                                    parallel=self.config.parallel_msgs)
        return Decision(actions, messages, order, dq_hat)

    def rollout_policy(self, epsilon: float):
        """Adapter with the (env, rng, override) signature used by Monte-Carlo estimators."""
        def policy(env, rng, override):
            decision = self.act(env.global_state(), env.observations(), rng, epsilon,
                                stochastic=True, override=override)
            return decision.actions
        return policy
