"""
Parametric function approximators: message encoder, refinement net, world model,
per-agent critics with a monotonic mixer, and the soft value over joint actions.
"""
import itertools
from contextlib import contextmanager
from typing import Dict, List, Sequence, Tuple

import numpy as np

from seqcomm_dfl.models.tensor import (
    Tensor, as_tensor, concat, logsumexp, no_grad, parameter, stack,
)
from seqcomm_dfl.utils.errors import CapabilityError, UsageError

ENUMERATION_LIMIT = 20.0
BIAS_HIDDEN = 32


def orthogonal(shape: Tuple[int, int], rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """
    Orthogonal matrix of ``shape``: orthonormal columns if rows >= cols, else rows.

    Args:
        shape: (fan_in, fan_out)
        rng: Generator used for the Gaussian draw
        gain: Scale applied after orthogonalization
    """
    rows, cols = shape
    flat = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    if rows < cols:
        q = q.T
    return gain * q


class Module:
    """
    Container of named parameter tensors and child modules.

    Parameter names are dotted paths (``critic.utility0.w1``) and double as
    checkpoint keys.
    """

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._params: Dict[str, Tensor] = {}
        self._children: List["Module"] = []

    def add_parameter(self, key: str, data: np.ndarray, trainable: bool = True) -> None:
        name = f"{self.prefix}.{key}"
        self._params[key] = parameter(data, name) if trainable else Tensor(data, name=name)

    def add_child(self, child: "Module") -> "Module":
        self._children.append(child)
        return child

    def _slots(self) -> List[Tuple[Dict[str, Tensor], str]]:
        slots = [(self._params, key) for key in self._params]
        for child in self._children:
            slots.extend(child._slots())
        return slots

    def parameters(self) -> List[Tensor]:
        return [store[key] for store, key in self._slots()]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {store[key].name: store[key] for store, key in self._slots()}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @contextmanager
    def using(self, tensors: Sequence[Tensor]):
        """Temporarily evaluate the module with ``tensors`` in place of its parameters."""
        slots = self._slots()
        if len(tensors) != len(slots):
            raise UsageError(f"expected {len(slots)} tensors, got {len(tensors)}")
        saved = [store[key] for store, key in slots]
        for (store, key), tensor in zip(slots, tensors):
            store[key] = tensor
        try:
            yield self
        finally:
            for (store, key), tensor in zip(slots, saved):
                store[key] = tensor

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values by name; every parameter must be present."""
        for name, tensor in self.named_parameters().items():
            if name not in arrays:
                raise UsageError(f"checkpoint is missing parameter '{name}'")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise UsageError(f"shape mismatch for '{name}': {value.shape} vs {tensor.shape}")
            tensor.data = value.copy()


class Mlp(Module):
    """
    Fully connected network with LeakyReLU hidden layers.

    Args:
        prefix: Name prefix for the parameters
        in_dim: Input width
        out_dim: Output width
        hidden_dim: Width of every hidden layer
        rng: Generator for orthogonal initialization
        n_hidden: Number of hidden layers
    """

    def __init__(self, prefix: str, in_dim: int, out_dim: int, hidden_dim: int,
                 rng: np.random.Generator, n_hidden: int = 2, trainable: bool = True):
        super().__init__(prefix)
        self.in_dim = in_dim
        self.out_dim = out_dim
        widths = [in_dim] + [hidden_dim] * n_hidden + [out_dim]
        self.n_layers = len(widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.add_parameter(f"w{k}", orthogonal((fan_in, fan_out), rng), trainable)
            self.add_parameter(f"b{k}", np.zeros(fan_out), trainable)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise UsageError(f"{self.prefix} expects inputs of width {self.in_dim}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h = x.reshape(-1, self.in_dim) if x.ndim != 2 else x
        for k in range(self.n_layers):
            h = h @ self._params[f"w{k}"] + self._params[f"b{k}"]
            if k < self.n_layers - 1:
                h = h.leaky_relu()
        return h.reshape(tuple(lead) + (self.out_dim,)) if x.ndim != 2 else h


def one_hot_actions(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """(..., N) integer actions -> (..., N, A) one-hot; rejects out-of-range indices."""
    actions = np.asarray(actions)
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise UsageError(f"action indices must lie in [0, {n_actions})")
    return np.eye(n_actions)[actions.astype(np.int64)]


def visible_messages(messages, mask: np.ndarray) -> Tensor:
    """
    Per-receiver view of the message tensor.

    Args:
        messages: (B, N, d_m) messages, row i sent by agent i
        mask: (B, N, N) with mask[b, j, i] = 1 when receiver j may read sender i

    Returns:
        (B, N, N * d_m) flattened visible messages per receiver
    """
    messages = as_tensor(messages)
    batch, n, d_m = messages.shape
    spread = messages.reshape(batch, 1, n, d_m) * np.asarray(mask, dtype=np.float64).reshape(batch, n, n, 1)
    return spread.reshape(batch, n, n * d_m)


class WorldModel(Module):
    """
    Outer-loop parameters: shared message encoder, refinement net and dynamics model.

    Without communication the encoder and refinement nets are absent and messages are
    constant zeros; the dynamics model keeps the same input layout.
    """

    def __init__(self, obs_dim: int, state_dim: int, n_agents: int, n_actions: int,
                 d_m: int, hidden_dim: int, rng: np.random.Generator, comm_enabled: bool = True):
        super().__init__("world")
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.d_m = d_m
        self.comm_enabled = comm_enabled
        if comm_enabled:
            self.encoder = self.add_child(Mlp("encoder", obs_dim, d_m, hidden_dim, rng))
            self.refine = self.add_child(Mlp("refine", d_m + 1, d_m, hidden_dim, rng))
        else:
            self.encoder = None
            self.refine = None
        dynamics_in = state_dim + n_agents * n_actions + n_agents * d_m
        self.dynamics = self.add_child(Mlp("dynamics", dynamics_in, 1 + state_dim, hidden_dim, rng))

    def encode_message(self, observations) -> Tensor:
        """Base messages phi(o) for (..., obs_dim) observations."""
        observations = as_tensor(observations)
        if observations.shape[-1] != self.obs_dim:
            raise UsageError(f"observation width {observations.shape[-1]} != {self.obs_dim}")
        if not self.comm_enabled:
            return Tensor(np.zeros(observations.shape[:-1] + (self.d_m,)))
        return self.encoder(observations)

    def refine_message(self, base, dq_hat, alpha: float) -> Tensor:
        """m = m_base + alpha * Refine(m_base, dq_hat)."""
        base = as_tensor(base)
        if not self.comm_enabled:
            return base
        dq_hat = as_tensor(dq_hat).reshape(base.shape[:-1] + (1,))
        return base + self.refine(concat([base, dq_hat], axis=-1)) * alpha

    def messages(self, observations, dq_hat=None, alpha: float = 0.1) -> Tensor:
        """Refined messages for (..., N, obs_dim) observations; base messages if dq_hat is None."""
        base = self.encode_message(observations)
        if dq_hat is None or not self.comm_enabled:
            return base
        return self.refine_message(base, dq_hat, alpha)

    def world_model_step(self, state, actions: np.ndarray, messages) -> Tuple[Tensor, Tensor]:
        """
        Predict reward and next state.

        Args:
            state: (B, state_dim) global states
            actions: (B, N) joint actions
            messages: (B, N, d_m) message tensors

        Returns:
            (r_hat of shape (B,), s_next_hat of shape (B, state_dim))
        """
        state = as_tensor(state)
        messages = as_tensor(messages)
        batch = state.shape[0]
        onehot = one_hot_actions(actions, self.n_actions).reshape(batch, -1)
        inputs = concat([state, Tensor(onehot), messages.reshape(batch, -1)], axis=1)
        out = self.dynamics(inputs)
        return out[:, 0], out[:, 1:]


class Critic(Module):
    """
    Per-agent utilities Q_i(o_i, visible messages, .) mixed monotonically:
    Q = sum_i |w_i| * u_i + bias(s).
    """

    def __init__(self, obs_dim: int, state_dim: int, n_agents: int, n_actions: int,
                 d_m: int, hidden_dim: int, rng: np.random.Generator,
                 prefix: str = "critic", trainable: bool = True):
        super().__init__(prefix)
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.d_m = d_m
        self.hidden_dim = hidden_dim
        self.trainable = trainable
        self.utility_nets = [
            self.add_child(Mlp(f"{prefix}.utility{i}", obs_dim + n_agents * d_m, n_actions,
                               hidden_dim, rng, trainable=trainable))
            for i in range(n_agents)
        ]
        self.add_parameter("mixer_weight", np.ones(n_agents), trainable)
        self.bias = self.add_child(Mlp(f"{prefix}.bias", state_dim, 1, BIAS_HIDDEN, rng,
                                       n_hidden=1, trainable=trainable))

    # ------------------------------------------------------------ batched
    def utilities(self, observations, visible) -> Tensor:
        """(B, N, obs_dim), (B, N, N*d_m) -> (B, N, A) per-agent utilities."""
        observations = as_tensor(observations)
        visible = as_tensor(visible)
        inputs = concat([observations, visible], axis=-1)
        return stack([net(inputs[:, i, :]) for i, net in enumerate(self.utility_nets)], axis=1)

    def mix(self, chosen, state) -> Tensor:
        """Monotone mixing of chosen utilities (B, N) or (B, J, N) into joint values."""
        chosen = as_tensor(chosen)
        weights = self._params["mixer_weight"].abs()
        bias = self.bias(state)
        bias = bias.reshape(bias.shape[0], 1) if chosen.ndim == 3 else bias.reshape(bias.shape[0])
        return (chosen * weights).sum(axis=-1) + bias

    def q_values(self, state, observations, visible, actions: np.ndarray) -> Tensor:
        """Joint Q(s, a, M) for a batch of joint actions, shape (B,)."""
        utilities = self.utilities(observations, visible)
        chosen = (utilities * one_hot_actions(actions, self.n_actions)).sum(axis=2)
        return self.mix(chosen, state)

    # --------------------------------------------------- single-sample numpy
    def agent_utility(self, agent: int, observation: np.ndarray, visible: np.ndarray) -> np.ndarray:
        with no_grad():
            inputs = np.concatenate([observation, visible]).reshape(1, -1)
            return self.utility_nets[agent](inputs).data[0].copy()

    def mix_values(self, chosen: np.ndarray, state: np.ndarray) -> float:
        with no_grad():
            return self.mix(np.asarray(chosen).reshape(1, -1), np.asarray(state).reshape(1, -1)).item()

    def copy(self, prefix: str = "target", trainable: bool = False) -> "Critic":
        """Independent critic with identical values (a target network by default)."""
        twin = Critic(self.obs_dim, self.state_dim, self.n_agents, self.n_actions, self.d_m,
                      self.hidden_dim, np.random.default_rng(0), prefix=prefix, trainable=trainable)
        for mine, theirs in zip(self.parameters(), twin.parameters()):
            theirs.data = mine.data.copy()
        return twin


def soft_value_from_table(q, tau: float) -> Tensor:
    """tau * logsumexp(Q / tau) over the last axis."""
    if tau <= 0:
        raise UsageError("soft value temperature must be positive")
    return logsumexp(as_tensor(q) * (1.0 / tau), axis=-1) * tau


def joint_action_table(n_agents: int, n_actions: int) -> np.ndarray:
    """(A^N, N) all joint actions in lexicographic order."""
    return np.array(list(itertools.product(range(n_actions), repeat=n_agents)), dtype=np.int64).reshape(-1, n_agents)


def soft_value(critic: Critic, state, observations, visible, tau: float,
               factored: bool = False) -> Tensor:
    """
    Value of the best joint action under ``critic``.

    Enumerates all |A|^N joint actions and returns tau * logsumexp(Q / tau); with
    ``factored`` it combines per-agent maxima through the monotone mixer instead.

    Raises:
        CapabilityError: when N * log|A| exceeds the enumeration guard
    """
    utilities = critic.utilities(observations, visible)
    if factored:
        return critic.mix(utilities.max(axis=2), state)
    n, a = critic.n_agents, critic.n_actions
    if n * np.log(a) > ENUMERATION_LIMIT:
        raise CapabilityError(f"cannot enumerate {a}^{n} joint actions")
    selector = one_hot_actions(joint_action_table(n, a), a)                 # (J, N, A)
    batch = utilities.shape[0]
    chosen = (utilities.reshape(batch, 1, n, a) * selector.reshape((1,) + selector.shape)).sum(axis=3)
    return soft_value_from_table(critic.mix(chosen, state), tau)


def target_ema_update(target: Module, online: Module, tau_ema: float) -> None:
    """target <- tau_ema * target + (1 - tau_ema) * online, in place."""
    if not 0.0 <= tau_ema <= 1.0:
        raise UsageError(f"tau_ema must lie in [0, 1], got {tau_ema}")
    for t, w in zip(target.parameters(), online.parameters()):
        t.data = tau_ema * t.data + (1.0 - tau_ema) * w.data


def parameter_manifest(*modules: Module) -> Dict[str, Tuple[int, ...]]:
    """Parameter name -> shape across ``modules``."""
    manifest = {}
    for module in modules:
        manifest.update({name: tuple(t.shape) for name, t in module.named_parameters().items()})
    return manifest


def build_networks(obs_dim: int, state_dim: int, n_agents: int, n_actions: int, d_m: int,
                   hidden_dim: int, seed: int, comm_enabled: bool = True) -> Tuple[WorldModel, Critic, Critic]:
    """World model, online critic and target critic from one seed."""
    world_seed, critic_seed = np.random.SeedSequence(seed).spawn(2)
    world = WorldModel(obs_dim, state_dim, n_agents, n_actions, d_m, hidden_dim,
                       np.random.default_rng(world_seed), comm_enabled)
    critic = Critic(obs_dim, state_dim, n_agents, n_actions, d_m, hidden_dim,
                    np.random.default_rng(critic_seed))
    return world, critic, critic.copy()
