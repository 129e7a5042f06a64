"""
Value-aware communication: decision-impact (delta-Q) estimation, guidance-potential
priority ordering, leader-follower sequential action selection and the auxiliary
communication losses.
"""
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np

from seqcomm_dfl.models.tensor import Tensor, as_tensor, log_softmax, stack
from seqcomm_dfl.utils.errors import UsageError
from seqcomm_dfl.utils.logger import log_debug

PROBABILITY_FLOOR = 1e-8
STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"


# ------------------------------------------------------------------ types
@dataclass
class PriorityOrder:
    """
    Acting order of the agents.

    Attributes:
        permutation: Agent indices, leader first
        potentials: Guidance potentials the order was derived from
        mode: "stochastic" (training) or "deterministic" (evaluation)
    """
    permutation: np.ndarray
    potentials: np.ndarray
    mode: str = DETERMINISTIC

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        n = self.permutation.size
        if sorted(self.permutation.tolist()) != list(range(n)):
            raise UsageError(f"{self.permutation.tolist()} is not a permutation of 0..{n - 1}")

    @property
    def ranks(self) -> np.ndarray:
        ranks = np.empty_like(self.permutation)
        ranks[self.permutation] = np.arange(self.permutation.size)
        return ranks


def sequential_mask(permutation: Sequence[int]) -> np.ndarray:
    """mask[j, i] = 1 when sender i acts before receiver j."""
    ranks = PriorityOrder(np.asarray(permutation), np.zeros(len(permutation))).ranks
    return (ranks[None, :] < ranks[:, None]).astype(np.float64)


def parallel_mask(n_agents: int) -> np.ndarray:
    """Every agent reads every other agent."""
    return 1.0 - np.eye(n_agents)


def message_masks(orders: np.ndarray, parallel: bool = False) -> np.ndarray:
    """(B, N) stored orderings -> (B, N, N) receiver/sender masks."""
    orders = np.asarray(orders)
    if parallel:
        return np.broadcast_to(parallel_mask(orders.shape[1]), (orders.shape[0],) + (orders.shape[1],) * 2).copy()
    return np.stack([sequential_mask(order) for order in orders])


@dataclass
class MessageTensor:
    """
    Per-agent messages (N x d_m) with predecessor-masked views.

    Attributes:
        values: Row i is agent i's message
        order: Acting order the masks derive from
    """
    values: np.ndarray
    order: Optional[PriorityOrder] = None

    def masked_view(self, k: int) -> np.ndarray:
        """Messages with every row of rank >= k zeroed."""
        if self.order is None:
            raise UsageError("masked_view needs a priority order")
        keep = (self.order.ranks < k).astype(np.float64)
        return self.values * keep[:, None]


@dataclass
class DeltaQEstimate:
    """
    Decision-impact estimates ΔQ[i, j] of sender i's message on receiver j.

    Attributes:
        values: (N, N) estimates; the diagonal is unused
        estimator: "critic", "mc" or "hybrid"
        beta: Annealing weight for hybrid estimates
    """
    values: np.ndarray
    estimator: str = "critic"
    beta: Optional[float] = None

    def per_sender(self) -> np.ndarray:
        """Mean impact of each sender over the other agents."""
        n = self.values.shape[0]
        if n < 2:
            return np.zeros(n)
        off = self.values * (1.0 - np.eye(n))
        return off.sum(axis=1) / (n - 1)


# ----------------------------------------------------------- delta-Q (critic)
def slot_message(n_agents: int, d_m: int, sender: int, message: np.ndarray) -> np.ndarray:
    """Flattened message input carrying only ``sender``'s message."""
    visible = np.zeros((n_agents, d_m))
    visible[sender] = message
    return visible.reshape(-1)


def delta_q_critic(critic, receiver: int, observation: np.ndarray, sender: int,
                   message: np.ndarray, n_agents: int) -> float:
    """max_a Q_j(o_j, m_i, a) - max_a Q_j(o_j, 0, a)."""
    message = np.asarray(message, dtype=np.float64)
    with_message = critic.agent_utility(receiver, observation, slot_message(n_agents, message.size, sender, message))
    without = critic.agent_utility(receiver, observation, np.zeros(n_agents * message.size))
    return float(np.max(with_message) - np.max(without))


def delta_q_matrix(critic, observations: np.ndarray, messages: np.ndarray) -> DeltaQEstimate:
    """Critic-based ΔQ for every (sender, receiver) pair of one time step."""
    n = observations.shape[0]
    values = np.zeros((n, n))
    for i, j in itertools.permutations(range(n), 2):
        values[i, j] = delta_q_critic(critic, j, observations[j], i, messages[i], n)
    return DeltaQEstimate(values, "critic")


def message_effects(critic, observations, messages, tau: float) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Batched receiver responses to single-sender messages.

    Args:
        critic: Critic whose utilities define the receivers' values
        observations: (B, N, obs_dim)
        messages: (B, N, d_m) messages, differentiable
        tau: Softmax temperature for receiver policies

    Returns:
        delta_q (B, N, N) indexed [b, sender, receiver] with a zero diagonal,
        log-policies with a message (B, N, N, A) [b, sender, receiver, :],
        log-policies without messages (B, N, A)
    """
    messages = as_tensor(messages)
    batch, n, d_m = messages.shape
    silent = critic.utilities(observations, Tensor(np.zeros((batch, n, n * d_m))))
    best_silent = silent.max(axis=2)
    deltas, policies = [], []
    for i in range(n):
        mask = np.zeros((n, n))
        mask[:, i] = 1.0
        mask[i, i] = 0.0
        visible = (messages.reshape(batch, 1, n, d_m) * mask.reshape(1, n, n, 1)).reshape(batch, n, n * d_m)
        heard = critic.utilities(observations, visible)
        off_diagonal = np.ones(n)
        off_diagonal[i] = 0.0
        deltas.append((heard.max(axis=2) - best_silent) * off_diagonal)
        policies.append(log_softmax(heard * (1.0 / tau), axis=2))
    return stack(deltas, axis=1), stack(policies, axis=1), log_softmax(silent * (1.0 / tau), axis=2)


# --------------------------------------------------------------- delta-Q (MC)
Policy = Callable[[object, np.random.Generator, Optional[Tuple[int, np.ndarray]]], Sequence[int]]


def discounted_return(make_env: Callable[[int], object], policy: Policy, seed: int,
                      horizon: int, gamma: float, override: Optional[Tuple[int, np.ndarray]]) -> float:
    """G = sum_t gamma^t r_t over one rollout; ``override`` applies to the first step only."""
    env = make_env(seed)
    rng = np.random.default_rng(seed)
    total, discount = 0.0, 1.0
    for t in range(horizon):
        if env.done:
            break
        actions = policy(env, rng, override if t == 0 else None)
        total += discount * env.step(actions).reward
        discount *= gamma
    return total


def delta_q_mc_samples(make_env: Callable[[int], object], policy: Policy, sender: int,
                       message: np.ndarray, samples: int, horizon: int, gamma: float,
                       seed: int) -> np.ndarray:
    """
    Paired return gaps G(m_i) - G(0) with common random numbers.

    ``make_env(seed)`` must return a fresh copy of the start state whose noise is driven
    by ``seed``; both branches of a pair reuse the same seed for the environment and the
    policy.
    """
    if samples < 1:
        raise UsageError("need at least one Monte-Carlo sample")
    message = np.asarray(message, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).generate_state(samples)
    gaps = np.zeros(samples)
    for k, s in enumerate(seeds):
        s = int(s)
        informed = discounted_return(make_env, policy, s, horizon, gamma, (sender, message))
        silent = discounted_return(make_env, policy, s, horizon, gamma, (sender, np.zeros_like(message)))
        gaps[k] = informed - silent
    return gaps


def delta_q_mc(make_env, policy: Policy, sender: int, message: np.ndarray, samples: int,
               horizon: int, gamma: float, seed: int = 0) -> float:
    """Monte-Carlo decision impact of ``message``; mean of the paired gaps."""
    gaps = delta_q_mc_samples(make_env, policy, sender, message, samples, horizon, gamma, seed)
    return float(np.mean(gaps))


def hybrid_delta_q(mc, critic, beta: float):
    """
    (1 - beta) * mc + beta * critic.

    When ``critic`` is a Tensor the result is a Tensor differentiable through the
    critic term only; per-sender ``mc`` of shape (..., N) is broadcast over the
    receiver axis of a (..., N, N) critic estimate.
    """
    if not 0.0 <= beta <= 1.0:
        raise UsageError(f"beta must lie in [0, 1], got {beta}")
    mc = np.asarray(mc, dtype=np.float64)
    if isinstance(critic, Tensor):
        if mc.ndim == critic.ndim - 1:
            mc = np.broadcast_to(mc[..., None], critic.shape)
        return critic * beta + mc * (1.0 - beta)
    return (1.0 - beta) * mc + beta * np.asarray(critic, dtype=np.float64)


def beta_schedule(t: int, warmup: int) -> float:
    """min(t / warmup, 1)."""
    return 1.0 if warmup <= 0 else min(t / warmup, 1.0)


# ---------------------------------------------------------- ordering/acting
class UtilityCache:
    """Per-step memo of agent utilities keyed by (agent, readable senders)."""

    def __init__(self, critic, observations: np.ndarray, messages: np.ndarray):
        self.critic = critic
        self.observations = observations
        self.messages = np.asarray(messages, dtype=np.float64)
        self._cache: Dict[Tuple[int, FrozenSet[int]], np.ndarray] = {}

    def __call__(self, agent: int, senders: FrozenSet[int], rows: Optional[np.ndarray] = None) -> np.ndarray:
        """``rows`` may supply the already-masked (N, d_m) messages for ``senders``."""
        key = (agent, senders)
        if key not in self._cache:
            if rows is None:
                keep = np.zeros(self.messages.shape[0])
                keep[list(senders)] = 1.0
                rows = self.messages * keep[:, None]
            visible = np.asarray(rows, dtype=np.float64).reshape(-1)
            self._cache[key] = self.critic.agent_utility(agent, self.observations[agent], visible)
        return self._cache[key]


def _ordered_joint_value(cache: UtilityCache, critic, state: np.ndarray, permutation: Sequence[int]) -> float:
    n = len(permutation)
    chosen = np.zeros(n)
    for k, agent in enumerate(permutation):
        utility = cache(agent, frozenset(permutation[:k]))
        chosen[agent] = utility[int(np.argmax(utility))]
    return critic.mix_values(chosen, state)


def guidance_potential(critic, state: np.ndarray, observations: np.ndarray, messages: np.ndarray,
                       n_orderings: int = 4, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    GP_i: team value of greedy sequential play with agent i leading minus with i last.

    Follower orderings are enumerated when there are at most ``n_orderings`` of them
    and sampled otherwise.
    """
    n = observations.shape[0]
    cache = UtilityCache(critic, observations, messages)
    rng = rng or np.random.default_rng(0)
    potentials = np.zeros(n)
    for i in range(n):
        rest = [j for j in range(n) if j != i]
        if math.factorial(len(rest)) <= n_orderings:
            followers = [list(p) for p in itertools.permutations(rest)]
        else:
            followers = [list(rng.permutation(rest)) for _ in range(n_orderings)]
        lead = np.mean([_ordered_joint_value(cache, critic, state, [i] + f) for f in followers])
        last = np.mean([_ordered_joint_value(cache, critic, state, f + [i]) for f in followers])
        potentials[i] = lead - last
    return potentials


def priority_order(potentials: np.ndarray, mode: str = DETERMINISTIC, tau_gumbel: float = 0.1,
                   rng: Optional[np.random.Generator] = None) -> PriorityOrder:
    """argsort(-GP), perturbed by scaled Gumbel noise in stochastic mode; ties go to the lower index."""
    potentials = np.asarray(potentials, dtype=np.float64)
    if not np.all(np.isfinite(potentials)):
        raise UsageError("guidance potentials must be finite")
    scores = potentials
    if mode == STOCHASTIC:
        rng = rng or np.random.default_rng(0)
        scores = potentials + rng.gumbel(size=potentials.size) * tau_gumbel
    elif mode != DETERMINISTIC:
        raise UsageError(f"unknown ordering mode '{mode}'")
    permutation = np.lexsort((np.arange(potentials.size), -scores))
    return PriorityOrder(permutation, potentials, mode)


def sequential_select(critic, observations: np.ndarray, messages: np.ndarray, order: PriorityOrder,
                      epsilon: float = 0.0, rng: Optional[np.random.Generator] = None,
                      parallel: bool = False) -> np.ndarray:
    """
    Leader-follower greedy selection: the agent at rank k maximizes its utility given
    the messages of ranks < k (all other agents when ``parallel``).

    With an ``rng``, exploration draws one uniform and one random action per agent
    every call, whatever ``epsilon`` is.
    """
    n = observations.shape[0]
    n_actions = critic.n_actions
    if rng is not None:
        explore = rng.random(n)
        random_actions = rng.integers(0, n_actions, size=n)
    cache = UtilityCache(critic, observations, messages)
    sent = MessageTensor(np.asarray(messages, dtype=np.float64), order)
    actions = np.zeros(n, dtype=np.int64)
    for k, agent in enumerate(order.permutation):
        if parallel:
            utility = cache(int(agent), frozenset(j for j in range(n) if j != agent))
        else:
            utility = cache(int(agent), frozenset(order.permutation[:k].tolist()), sent.masked_view(k))
        actions[agent] = int(np.argmax(utility))
        if rng is not None and explore[agent] < epsilon:
            actions[agent] = int(random_actions[agent])
    log_debug(f"order={order.permutation.tolist()} actions={actions.tolist()}", "Comm")
    return actions


# ----------------------------------------------------------------- losses
def value_aware_loss(delta_q) -> Tensor:
    """
    -(1 / (B N (N-1))) sum_b sum_i sum_{j != i} ΔQ[b, i, j].

    Args:
        delta_q: (B, N, N) estimates indexed [b, sender, receiver]
    """
    delta_q = as_tensor(delta_q)
    batch, n = delta_q.shape[0], delta_q.shape[1]
    if n < 2:
        raise UsageError("the value-aware loss needs at least two agents")
    off = delta_q * (1.0 - np.eye(n))
    return off.sum() * (-1.0 / (batch * n * (n - 1)))


def influence_loss(with_message, without_message, log_space: bool = False) -> Tensor:
    """
    Negative mean KL(pi_j(.|m_i) || pi_j(.|0)) over sender/receiver pairs.

    Args:
        with_message: (B, N, N, A) receiver policies [b, sender, receiver, :]
        without_message: (B, N, A) receiver policies without messages
        log_space: Inputs are log-probabilities
    """
    with_message = as_tensor(with_message)
    without_message = as_tensor(without_message)
    batch, n = with_message.shape[0], with_message.shape[1]
    if n < 2:
        raise UsageError("the influence loss needs at least two agents")
    if log_space:
        p = with_message.exp().clip_min(PROBABILITY_FLOOR)
        q = without_message.exp().clip_min(PROBABILITY_FLOOR)
    else:
        p = with_message.clip_min(PROBABILITY_FLOOR)
        q = without_message.clip_min(PROBABILITY_FLOOR)
    q = q.reshape(batch, 1, n, q.shape[-1])
    kl = (p * (p.log() - q.log())).sum(axis=3)
    off = kl * (1.0 - np.eye(n))
    return off.sum() * (-1.0 / (batch * n * (n - 1)))
