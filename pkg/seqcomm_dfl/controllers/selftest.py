"""
Oracle suites run by ``--mode selftest``.

Each suite compares the engine against an independent reference (finite
differences, dense solves, closed forms, value iteration, enumeration) and reports
its worst observed error. The toy problems are built by the ``make_*`` helpers so
the pytest suites can reuse them.
"""
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from seqcomm_dfl.controllers.bilevel import (
    cg_solve, hypergradient, run_inner_loop, unrolled_hypergradient,
)
from seqcomm_dfl.controllers.comm import (
    PriorityOrder, delta_q_critic, delta_q_mc_samples, influence_loss, message_effects,
    sequential_select, value_aware_loss,
)
from seqcomm_dfl.models.config import EnvConfig, TrainConfig
from seqcomm_dfl.models.hospital import (
    HospitalEnv, N_CONDITIONS, N_VITALS, blind_penalty, drug_penalty, resource_penalty,
)
from seqcomm_dfl.models.nets import (
    Critic, Mlp, WorldModel, joint_action_table, soft_value, soft_value_from_table,
)
from seqcomm_dfl.models.replay import TransitionBatch
from seqcomm_dfl.models.tensor import (
    Tensor, logsumexp, parameter, softmax,
)
from seqcomm_dfl.models.toy_env import TabularCritic, ToyDecPOMDP, ToyEnvSpec, make_toy_env
from seqcomm_dfl.utils.errors import SeqCommError
from seqcomm_dfl.utils.gradcheck import finite_diff_check, hvp_check
from seqcomm_dfl.utils.logger import log_error, log_info

GRADIENT_TOLERANCE = 1e-4
HVP_TOLERANCE = 1e-3
CG_TOLERANCE = 1e-6
CLOSED_FORM_TOLERANCE = 1e-6
UNROLLED_TOLERANCE = 5e-2
SOFT_VALUE_TOLERANCE = 1e-10
SOFT_MAX_TOLERANCE = 1e-4
N_CHECKS = 20
N_CG_SYSTEMS = 50
N_CAUSALITY_TRIALS = 100
N_RESETS = 1000
MC_SAMPLES = 10_000
BIAS_GRID = ((5, 3), (15, 10), (50, 30))


@dataclass
class SuiteResult:
    """Outcome of one oracle suite."""
    name: str
    passed: bool
    details: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    error: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)


# ------------------------------------------------------------------ builders
def tiny_config(seed: int = 0, **overrides) -> TrainConfig:
    """A configuration small enough for tests and self-checks."""
    values = dict(
        hidden_dim=16, d_m=4, batch_size=8, buffer_capacity=200, iterations=2,
        warmup_iterations=1, k_inner=3, k_cg=3, mc_samples=2, mc_horizon=2,
        checkpoint_every=1, seed=seed,
        env=EnvConfig(n_patients=6, horizon=4),
    )
    values.update(overrides)
    return TrainConfig(**values)


def random_batch(n_agents: int, obs_dim: int, state_dim: int, n_actions: int, d_m: int,
                 batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    """Synthetic transitions with random sequential orderings."""
    return TransitionBatch(
        states=rng.normal(size=(batch_size, state_dim)),
        observations=rng.normal(size=(batch_size, n_agents, obs_dim)),
        actions=rng.integers(0, n_actions, size=(batch_size, n_agents)),
        rewards=rng.normal(size=batch_size),
        next_states=rng.normal(size=(batch_size, state_dim)),
        next_observations=rng.normal(size=(batch_size, n_agents, obs_dim)),
        dones=np.zeros(batch_size),
        orders=np.stack([rng.permutation(n_agents) for _ in range(batch_size)]),
        dq_hat=rng.normal(size=(batch_size, n_agents)),
        dq_mc=rng.normal(size=(batch_size, n_agents)),
        messages=np.zeros((batch_size, n_agents, d_m)),
    )


def make_quadratic_bilevel(seed: int = 0, n: int = 4, m: int = 3):
    """
    L_inner = 0.5 ||w - A θ||², L_true = 0.5 ||w - c||²; the exact hypergradient at
    the inner optimum is Aᵀ(Aθ − c) / (1 + λ) under damping λ.

    Returns:
        (inner, outer, w, theta, A, c)
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, m))
    c = rng.normal(size=(n, 1))
    theta = parameter(rng.normal(size=(m, 1)))
    w = parameter(A @ theta.data)

    def inner(w_list, theta_list):
        return ((w_list[0] - Tensor(A) @ theta_list[0]) ** 2).sum() * 0.5

    def outer(w_list, theta_list):
        return ((w_list[0] - c) ** 2).sum() * 0.5

    return inner, outer, w, theta, A, c


def make_neural_toy(seed: int = 0, ridge: float = 1.0):
    """
    Two-weight regression on LeakyReLU features of θ.

    Returns:
        (inner, outer, theta, lr) with lr = 1 / λ_max of the inner Hessian
    """
    rng = np.random.default_rng(seed)
    X, X_val = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    y, y_val = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
    theta = parameter(rng.normal(size=(3, 2)))

    def inner(w_list, theta_list):
        features = (Tensor(X) @ theta_list[0]).leaky_relu()
        residual = features @ w_list[0] - y
        return (residual ** 2).mean() * 0.5 + (w_list[0] ** 2).sum() * (0.5 * ridge)

    def outer(w_list, theta_list):
        features = (Tensor(X_val) @ theta_list[0]).leaky_relu()
        return ((features @ w_list[0] - y_val) ** 2).mean() * 0.5

    features = np.where(X @ theta.data > 0, X @ theta.data, 0.01 * (X @ theta.data))
    hessian = features.T @ features / X.shape[0] + ridge * np.eye(2)
    lr = 1.0 / float(np.linalg.eigvalsh(hessian).max())
    return inner, outer, theta, lr


def make_bias_problem(seed: int = 0, n: int = 20):
    """
    Quadratic bilevel problem with inner curvature spectrum in [0.2, 1]; unit-step
    gradient descent from zero and CG both converge, so the bias of the truncated
    hypergradient falls as either budget grows.

    Returns:
        (inner, outer, theta, exact) with ``exact`` the hypergradient at the inner optimum
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    S = Q @ np.diag(np.linspace(0.2, 1.0, n)) @ Q.T
    A, _ = np.linalg.qr(rng.normal(size=(n, n)))
    c = rng.normal(size=(n, 1))
    theta = parameter(rng.normal(size=(n, 1)))

    def inner(w_list, theta_list):
        gap = w_list[0] - Tensor(A) @ theta_list[0]
        return (gap.T @ (Tensor(S) @ gap)).sum() * 0.5

    def outer(w_list, theta_list):
        return ((w_list[0] - c) ** 2).sum() * 0.5

    exact = A.T @ (A @ theta.data - c)
    return inner, outer, theta, exact


def truncated_hypergradient_bias(inner, outer, theta, exact, k_inner: int, k_cg: int) -> float:
    """||hypergradient(K_inner, K_CG) − exact|| with unit steps from w = 0 and no damping."""
    w = parameter(np.zeros_like(exact))
    run_inner_loop(lambda: inner([w], [theta]), [w], k_inner, lr=1.0, clip_norm=np.inf,
                   warn_norm=np.inf)
    hyper, _ = hypergradient(inner, outer, [w], [theta], damping=0.0, k_cg=k_cg)
    return float(np.linalg.norm(hyper[0] - exact))


def make_message_toy(irrelevant: bool = False) -> ToyDecPOMDP:
    """
    Two states, two agents, two actions. Agent 0 sees the state and agent 1 sees
    nothing; reward is 1 when agent 1 matches the state plus 0.5 when agent 0 does.
    Matching keeps the state with probability 0.8, otherwise 0.3. With ``irrelevant``
    the reward is constant and transitions ignore the actions.
    """
    n_states, n_agents, n_actions = 2, 2, 2
    joint = joint_action_table(n_agents, n_actions)
    rewards = np.zeros((n_states, len(joint)))
    transitions = np.zeros((n_states, len(joint), n_states))
    for s in range(n_states):
        for j, (a0, a1) in enumerate(joint):
            if irrelevant:
                rewards[s, j] = 1.0
                transitions[s, j] = 0.5
                continue
            rewards[s, j] = float(a1 == s) + 0.5 * float(a0 == s)
            stay = 0.8 if a1 == s else 0.3
            transitions[s, j, s] = stay
            transitions[s, j, 1 - s] = 1.0 - stay
    observations = np.stack([np.eye(n_states), np.zeros((n_states, n_states))])
    spec = ToyEnvSpec(transitions, rewards, n_agents, n_actions, observations, initial_state=1)
    return make_toy_env(spec)


def message_toy_policy(env, rng, override):
    """Agent 0 plays the state; agent 1 plays message-decoded state or 0 when silent."""
    a0 = int(np.argmax(env.observations()[0]))
    a1 = 0
    if override is not None and override[0] == 0 and np.any(override[1]):
        a1 = int(np.asarray(override[1])[0] > 0.5)
    return [a0, a1]


def message_toy_gap(env: ToyDecPOMDP, horizon: int, gamma: float) -> float:
    """Exact informed-minus-silent return gap from the start state under the toy policy."""
    stationary = [env.joint_index([s, 0]) for s in range(env.n_states)]
    q = env.finite_horizon_q(stationary, horizon, gamma)
    s0 = env.spec.initial_state
    return float(q[s0, env.joint_index([s0, s0])] - q[s0, env.joint_index([s0, 0])])


def make_tabular_critic(n_agents: int, n_actions: int, d_m: int, rng: np.random.Generator) -> Tuple[TabularCritic, Dict]:
    """Random utilities indexed by which senders are readable."""
    tables: Dict[Tuple[int, Tuple[int, ...]], np.ndarray] = {}

    def utility(agent, observation, visible):
        key = tuple(int(x) for x in np.any(np.asarray(visible).reshape(n_agents, d_m) != 0, axis=1))
        if (agent, key) not in tables:
            tables[(agent, key)] = rng.normal(size=n_actions)
        return tables[(agent, key)]

    return TabularCritic(utility, n_actions), tables


def enumeration_actions(critic: TabularCritic, permutation, n_agents: int, d_m: int,
                        messages: np.ndarray) -> np.ndarray:
    """Reference leader-follower play: rank k maximizes given exactly ranks < k."""
    actions = np.zeros(n_agents, dtype=np.int64)
    for k, agent in enumerate(permutation):
        keep = np.zeros(n_agents)
        keep[list(permutation[:k])] = 1.0
        visible = (messages * keep[:, None]).reshape(-1)
        actions[agent] = int(np.argmax(critic.agent_utility(agent, np.zeros(1), visible)))
    return actions


# Hand-computed environment fixtures: (kind, arguments, expected)
PENALTY_FIXTURES = [
    ("blind", (0, 0, 0.9, 2), 0.0),
    ("blind", (0, 1, 0.5, 1), 0.75),
    ("blind", (1, 2, 0.2, 2), 0.6),
    ("blind", (2, 0, 1.0, 0), 0.0),
    ("blind", (2, 1, 1.0, 2), 3.0),
    ("drug", ([2, 2, 0], [0, 1, 2]), 1.2),
    ("drug", ([2, 2, 2], [0, 1, 2]), 2.4),
    ("drug", ([2, 1, 2], [0, 1, 2]), 0.75),
    ("drug", ([1, 1, 1], [0, 1, 2]), 0.0),
    ("drug", ([2, 2], [0, 0]), 0.0),
    ("resource", ([2, 2, 2], 2), 0.5),
    ("resource", ([2, 2], 2), 0.0),
    ("resource", ([2, 2, 2], 0), 1.5),
    ("resource", ([0, 1, 2], 1), 0.0),
    ("resource", ([2, 2, 2], 1), 1.0),
]

# (specialties, conditions, risk, actions, expected reward) on a noiseless frozen ward
REWARD_FIXTURES = [
    ([0], [0], 0.4, [2], 0.472),
    ([0], [1], 0.4, [1], -0.662),
    ([0], [1], 1.0, [2], -6.4),
    ([0, 1], [0, 1], 0.0, [2, 2], -0.256),
    ([0, 1, 2], [0, 1, 2], 0.0, [2, 2, 2], -1.484),
]


def fixture_value(kind: str, args) -> float:
    if kind == "blind":
        return blind_penalty(*args)
    if kind == "drug":
        return drug_penalty(args[0], args[1], EnvConfig().drug_interactions)
    return resource_penalty(*args)


def frozen_reward(specialties, conditions, risk, actions) -> float:
    n = len(specialties)
    env = HospitalEnv(EnvConfig(n_agents=n, n_patients=n, noise_scale=0.0))
    env.state = env.frozen_scenario(specialties, conditions, risk)
    return env.step(actions).reward


# -------------------------------------------------------------- gradient-check cases
def _case_tensor_ops(rng):
    x = parameter(rng.normal(size=(3, 4)))
    y = parameter(rng.normal(size=(4, 2)))

    def f():
        return (logsumexp(x @ y, axis=1).sum() + (x.exp() * 0.1).sum() + (y ** 2).mean()
                + softmax(x, axis=0).max(axis=1).sum() + ((x @ y).leaky_relu() ** 2).mean())
    return f, [x, y]


def _case_mlp(rng):
    net = Mlp("check", 4, 2, 8, rng)
    x, target = rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    return lambda: ((net(x) - target) ** 2).mean(), net.parameters()


def _case_world_model(rng):
    n, obs_dim, state_dim, n_actions, d_m = 2, 5, 6, 3, 2
    world = WorldModel(obs_dim, state_dim, n, n_actions, d_m, 8, rng)
    obs, state = rng.normal(size=(3, n, obs_dim)), rng.normal(size=(3, state_dim))
    dq, actions = rng.normal(size=(3, n)), rng.integers(0, n_actions, size=(3, n))

    def f():
        reward_hat, next_hat = world.world_model_step(state, actions, world.messages(obs, dq, 0.1))
        return reward_hat.sum() + (next_hat ** 2).sum() * 0.1
    return f, world.parameters()


def _case_critic(rng):
    n, obs_dim, state_dim, n_actions, d_m = 3, 4, 5, 3, 2
    critic = Critic(obs_dim, state_dim, n, n_actions, d_m, 8, rng)
    obs, state = rng.normal(size=(2, n, obs_dim)), rng.normal(size=(2, state_dim))
    visible = rng.normal(size=(2, n, n * d_m))
    actions = rng.integers(0, n_actions, size=(2, n))

    def f():
        return (soft_value(critic, state, obs, visible, 0.5).mean()
                + critic.q_values(state, obs, visible, actions).mean())
    return f, critic.parameters()


def _case_comm_losses(rng):
    n, obs_dim, state_dim, n_actions, d_m = 3, 4, 5, 3, 2
    critic = Critic(obs_dim, state_dim, n, n_actions, d_m, 8, rng)
    obs = rng.normal(size=(2, n, obs_dim))
    messages = parameter(rng.normal(size=(2, n, d_m)))

    def f():
        delta_q, heard, silent = message_effects(critic, obs, messages, 0.5)
        return value_aware_loss(delta_q) + influence_loss(heard, silent, log_space=True)
    return f, [messages]


def _case_bilevel(rng):
    from seqcomm_dfl.controllers.bilevel import CriticBilevelProblem
    from seqcomm_dfl.models.hospital import observation_dim, state_dim
    from seqcomm_dfl.models.nets import build_networks

    config = tiny_config(hidden_dim=8)
    n, n_actions = config.env.n_agents, config.env.n_actions
    world, critic, target = build_networks(observation_dim(n), state_dim(n), n, n_actions,
                                           config.d_m, config.hidden_dim, int(rng.integers(1 << 30)))
    batch = random_batch(n, observation_dim(n), state_dim(n), n_actions, config.d_m, 4, rng)
    problem = CriticBilevelProblem(world, critic, target, config, batch, batch)
    if rng.random() < 0.5:
        return lambda: problem.inner_loss(problem.w, problem.theta), problem.theta
    return lambda: problem.true_loss(problem.w, problem.theta), problem.w


CHECK_CASES: List[Tuple[str, Callable]] = [
    ("tensor_ops", _case_tensor_ops),
    ("mlp", _case_mlp),
    ("world_model", _case_world_model),
    ("critic", _case_critic),
    ("comm_losses", _case_comm_losses),
    ("bilevel", _case_bilevel),
]


# -------------------------------------------------------------------- suites
def check_gradients(n_checks: int = N_CHECKS, seed: int = 0) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    for p in range(n_checks):
        name, build = CHECK_CASES[p % len(CHECK_CASES)]
        rng = np.random.default_rng(seed + p)
        f, params = build(rng)
        error = finite_diff_check(f, params, max_coords=40, rng=rng)
        worst[name] = max(worst.get(name, 0.0), error)
    return worst


def check_hvp(n_checks: int = N_CHECKS, seed: int = 0) -> Dict[str, float]:
    builders = [CHECK_CASES[0], CHECK_CASES[1], CHECK_CASES[3]]
    worst: Dict[str, float] = {}
    for p in range(n_checks):
        name, build = builders[p % len(builders)]
        rng = np.random.default_rng(seed + p)
        f, params = build(rng)
        v = [rng.normal(size=q.shape) for q in params]
        worst[name] = max(worst.get(name, 0.0), hvp_check(f, params, v))
    return worst


def check_cg(n_systems: int = N_CG_SYSTEMS, seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_systems):
        n = int(rng.integers(2, 21))
        Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        H = Q @ np.diag(rng.uniform(1.0, 5.0, size=n)) @ Q.T
        b = rng.normal(size=n)
        damping = float(rng.uniform(0.0, 0.5))
        result = cg_solve(lambda v: H @ v, b, damping, max_iter=4 * n, tol=1e-12)
        direct = np.linalg.solve(H + damping * np.eye(n), b)
        worst = max(worst, float(np.linalg.norm(result.solution - direct) / np.linalg.norm(direct)))
    return {"relative_error": worst}


def check_hypergradient(seed: int = 0) -> Dict[str, float]:
    details = {}
    closed = 0.0
    for k in range(5):
        inner, outer, w, theta, A, c = make_quadratic_bilevel(seed + k)
        damping = 0.1 * k
        hyper, _ = hypergradient(inner, outer, [w], [theta], damping=damping, k_cg=20, tol=1e-14)
        expected = A.T @ (A @ theta.data - c) / (1.0 + damping)
        closed = max(closed, float(np.max(np.abs(hyper[0] - expected))))
    details["closed_form_error"] = closed

    inner, outer, theta, lr = make_neural_toy(seed)
    w = parameter(np.zeros((2, 1)))
    run_inner_loop(lambda: inner([w], [theta]), [w], 50, lr, clip_norm=np.inf, warn_norm=np.inf)
    implicit, _ = hypergradient(inner, outer, [w], [theta], damping=1e-6, k_cg=10)
    unrolled = unrolled_hypergradient(inner, outer, [np.zeros((2, 1))], [theta], 50, lr)
    details["unrolled_relative_error"] = float(
        np.linalg.norm(implicit[0] - unrolled[0]) / max(np.linalg.norm(unrolled[0]), 1e-12))

    inner, outer, theta, exact = make_bias_problem(seed)
    diagonal = [truncated_hypergradient_bias(inner, outer, theta, exact, ki, kc) for ki, kc in BIAS_GRID]
    along_inner = [truncated_hypergradient_bias(inner, outer, theta, exact, ki, 30) for ki, _ in BIAS_GRID]
    details["bias_diagonal_monotone"] = float(diagonal[0] > diagonal[1] > diagonal[2])
    details["bias_inner_monotone"] = float(along_inner[0] > along_inner[1] > along_inner[2])
    details["bias_final"] = diagonal[-1]
    return details


def check_environment(n_resets: int = N_RESETS) -> Dict[str, float]:
    worst = 0.0
    for kind, args, expected in PENALTY_FIXTURES:
        worst = max(worst, abs(fixture_value(kind, args) - expected))
    for specialties, conditions, risk, actions, expected in REWARD_FIXTURES:
        worst = max(worst, abs(frozen_reward(specialties, conditions, risk, actions) - expected))

    env = HospitalEnv(EnvConfig(n_patients=10))
    gated_index = N_VITALS + N_CONDITIONS + 1
    violations = 0
    for seed in range(n_resets):
        state, observations = env.reset(seed)
        for i, j in enumerate(state.assignment):
            specialty, condition = state.specialties[i], state.conditions[j]
            expected = state.risks[j, specialty] if specialty == condition else 0.0
            violations += int(observations[i, gated_index] != expected)
    blind_random = float(np.mean([blind_penalty(0, 1, 1.0, a) for a in range(3)]))
    return {"fixture_error": worst, "gating_violations": float(violations),
            "blind_penalty_uniform": blind_random}


def check_soft_value(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(5, 27)) * 3.0
    tau = 0.5
    peak = q.max(axis=1, keepdims=True)
    brute = tau * np.log(np.exp((q - peak) / tau).sum(axis=1)) + peak[:, 0]
    table_error = float(np.max(np.abs(soft_value_from_table(q, tau).data - brute)))

    n, n_actions, d_m = 3, 3, 2
    critic = Critic(4, 5, n, n_actions, d_m, 8, rng)
    state, obs = rng.normal(size=(2, 5)), rng.normal(size=(2, n, 4))
    visible = rng.normal(size=(2, n, n * d_m))
    joint_q = np.stack([
        critic.q_values(state, obs, visible, np.tile(joint, (2, 1))).data
        for joint in joint_action_table(n, n_actions)
    ], axis=1)
    peak = joint_q.max(axis=1, keepdims=True)
    brute = tau * np.log(np.exp((joint_q - peak) / tau).sum(axis=1)) + peak[:, 0]
    critic_error = float(np.max(np.abs(soft_value(critic, state, obs, visible, tau).data - brute)))
    limit_error = float(np.max(np.abs(soft_value_from_table(q, 1e-6).data - q.max(axis=1))))
    return {"table_error": table_error, "critic_error": critic_error, "zero_temperature_error": limit_error}


def check_delta_q(seed: int = 0, samples: int = MC_SAMPLES) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    critic = Critic(4, 5, 3, 3, 2, 8, rng)
    null = max(abs(delta_q_critic(critic, j, rng.normal(size=4), i, np.zeros(2), 3))
               for i in range(3) for j in range(3) if i != j)

    irrelevant = make_message_toy(irrelevant=True)
    irrelevant.reset(0)
    silent_gaps = delta_q_mc_samples(irrelevant.fork, message_toy_policy, 0, np.ones(1), 200, 5, 0.9, seed)

    env = make_message_toy()
    env.reset(0)
    gaps = delta_q_mc_samples(env.fork, message_toy_policy, 0, np.ones(1), samples, 5, 0.9, seed)
    exact = message_toy_gap(env, 5, 0.9)
    standard_error = float(np.std(gaps, ddof=1) / np.sqrt(samples))
    return {"critic_null": float(null), "irrelevant_max_gap": float(np.max(np.abs(silent_gaps))),
            "mc_error": abs(float(np.mean(gaps)) - exact), "mc_standard_error": standard_error}


def check_stackelberg(n_trials: int = N_CAUSALITY_TRIALS, seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    n, n_actions, d_m = 3, 3, 2
    critic = Critic(4, 5, n, n_actions, d_m, 8, rng)
    violations = 0
    for _ in range(n_trials):
        permutation = rng.permutation(n)
        order = PriorityOrder(permutation, np.zeros(n))
        obs, messages = rng.normal(size=(n, 4)), rng.normal(size=(n, d_m))
        actions = sequential_select(critic, obs, messages, order)
        k = int(rng.integers(0, n))
        perturbed = messages.copy()
        for agent in permutation[k + 1:]:
            perturbed[agent] += rng.normal(size=d_m) * 5.0
        again = sequential_select(critic, obs, perturbed, order)
        leaders = permutation[:k + 1]
        violations += int(not np.array_equal(actions[leaders], again[leaders]))

    mismatches = 0
    for _ in range(n_trials):
        tabular, _ = make_tabular_critic(n, n_actions, d_m, rng)
        permutation = rng.permutation(n)
        messages = rng.normal(size=(n, d_m)) + 3.0
        actions = sequential_select(tabular, np.zeros((n, 1)), messages, PriorityOrder(permutation, np.zeros(n)))
        reference = enumeration_actions(tabular, permutation, n, d_m, messages)
        mismatches += int(not np.array_equal(actions, reference))
    return {"causality_violations": float(violations), "enumeration_mismatches": float(mismatches)}


def _judge(name: str, details: Dict[str, float]) -> bool:
    if name == "gradient":
        return all(v <= GRADIENT_TOLERANCE for v in details.values())
    if name == "hvp":
        return all(v <= HVP_TOLERANCE for v in details.values())
    if name == "cg":
        return details["relative_error"] <= CG_TOLERANCE
    if name == "hypergradient":
        return (details["closed_form_error"] <= CLOSED_FORM_TOLERANCE
                and details["unrolled_relative_error"] <= UNROLLED_TOLERANCE
                and details["bias_diagonal_monotone"] == 1.0
                and details["bias_inner_monotone"] == 1.0)
    if name == "environment":
        return (details["fixture_error"] <= 1e-9 and details["gating_violations"] == 0
                and abs(details["blind_penalty_uniform"] - 1.5) <= 1e-12)
    if name == "soft_value":
        return (details["table_error"] <= SOFT_VALUE_TOLERANCE and details["critic_error"] <= SOFT_VALUE_TOLERANCE
                and details["zero_temperature_error"] <= SOFT_MAX_TOLERANCE)
    if name == "delta_q":
        return (details["critic_null"] == 0.0 and details["irrelevant_max_gap"] == 0.0
                and details["mc_error"] <= 3.0 * details["mc_standard_error"] + 1e-12)
    if name == "stackelberg":
        return details["causality_violations"] == 0 and details["enumeration_mismatches"] == 0
    raise KeyError(name)


SUITES: Dict[str, Callable[[], Dict[str, float]]] = {
    "gradient": check_gradients,
    "hvp": check_hvp,
    "cg": check_cg,
    "hypergradient": check_hypergradient,
    "environment": check_environment,
    "soft_value": check_soft_value,
    "delta_q": check_delta_q,
    "stackelberg": check_stackelberg,
}


def run_suite(name: str) -> SuiteResult:
    started = time.perf_counter()
    try:
        details = SUITES[name]()
        passed = _judge(name, details)
        result = SuiteResult(name, passed, details, time.perf_counter() - started)
    except SeqCommError as e:
        log_error(f"suite {name} raised {type(e).__name__}: {e}", "Selftest")
        result = SuiteResult(name, False, {}, time.perf_counter() - started, f"{type(e).__name__}: {e}")
    log_info(f"{name}: {'PASS' if result.passed else 'FAIL'} ({result.seconds:.1f}s) {result.details}", "Selftest")
    return result


def run_selftest() -> List[SuiteResult]:
    """Run every oracle suite in order."""
    return [run_suite(name) for name in SUITES]
