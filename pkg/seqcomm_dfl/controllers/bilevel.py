"""
Decision-focused bilevel optimization.

The critic w is fitted to world-model targets in an inner loop; the world model θ
is updated with the implicit-function hypergradient of the true-environment loss,
whose inverse-curvature product is obtained by damped conjugate gradient.
"""
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from seqcomm_dfl.controllers.comm import message_masks
from seqcomm_dfl.models.config import TrainConfig
from seqcomm_dfl.models.hospital import observations_from_state
from seqcomm_dfl.models.nets import Critic, WorldModel, soft_value, visible_messages
from seqcomm_dfl.models.replay import TransitionBatch
from seqcomm_dfl.models.tensor import (
    Tensor, dot, flatten, grad, no_grad, parameter, unflatten,
)
from seqcomm_dfl.utils.errors import IllConditionedError, NumericalError, UsageError
from seqcomm_dfl.utils.logger import log_debug, log_error

LossFn = Callable[[Sequence[Tensor], Sequence[Tensor]], Tensor]
Matvec = Callable[[np.ndarray], np.ndarray]

CG_TOLERANCE = 1e-8
CG_MAX_INCREASES = 3


# ------------------------------------------------------------------ records
@dataclass
class InnerLoopResult:
    """
    Outcome of the inner critic fit.

    Attributes:
        parameters: Values of w after the last step
        final_loss: Inner loss at exit
        grad_norm: Gradient norm at exit
        entry_grad_norm: Gradient norm before the first step
        steps: Gradient steps taken
        warning: Exit norm above the IFT-validity threshold
    """
    parameters: List[np.ndarray]
    final_loss: float
    grad_norm: float
    entry_grad_norm: float
    steps: int
    warning: bool = False


@dataclass
class CGResult:
    """Approximate solution of (H + λI) v = b."""
    solution: np.ndarray
    residual: float
    iterations: int


@dataclass
class HypergradientReport:
    """Per-outer-step diagnostics of the hypergradient."""
    direct_norm: float
    indirect_norm: float
    cg_residual: float
    cg_iterations: int
    norm: float
    true_loss: float

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ helpers
def clip_by_norm(vector: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    """Rescale ``vector`` to norm at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.linalg.norm(vector))
    if not np.isfinite(norm):
        raise NumericalError("non-finite gradient")
    if norm > max_norm > 0:
        return vector * (max_norm / norm), norm
    return vector, norm


def run_inner_loop(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], k_inner: int,
                   lr: float, clip_norm: float = 1.0, warn_norm: float = 1e-2) -> InnerLoopResult:
    """
    Plain clipped gradient descent on ``loss_fn`` updating ``params`` in place.

    Raises:
        NumericalError: when the loss or a gradient becomes non-finite
    """
    params = list(params)

    def evaluate():
        loss = loss_fn()
        return loss, flatten(grad(loss, params))

    step = 0
    try:
        loss, g = evaluate()
        entry_norm = float(np.linalg.norm(g))
        for step in range(1, k_inner + 1):
            clipped, _ = clip_by_norm(g, clip_norm)
            for p, piece in zip(params, unflatten(clipped, params)):
                p.data = p.data - lr * piece
            loss, g = evaluate()
    except NumericalError as e:
        log_error(f"inner loop diverged at step {step}: {e}", "Bilevel")
        raise
    exit_norm = float(np.linalg.norm(g))
    warning = exit_norm > warn_norm
    if warning:
        log_debug(f"inner exit grad norm {exit_norm:.3e} above {warn_norm:.0e}", "Bilevel")
    return InnerLoopResult([p.data.copy() for p in params], loss.item(), exit_norm, entry_norm,
                           k_inner, warning)


def cg_solve(matvec: Matvec, b: np.ndarray, damping: float, max_iter: int,
             tol: float = CG_TOLERANCE) -> CGResult:
    """
    Conjugate gradient for (H + damping·I) v = b with H given as a matvec.

    Raises:
        IllConditionedError: residual grew on 3 consecutive iterations, or a
            non-positive curvature direction was met
    """
    if damping < 0:
        raise UsageError("damping must be non-negative")
    b = np.asarray(b, dtype=np.float64)

    def apply(v):
        return matvec(v) + damping * v

    x = np.zeros_like(b)
    if np.linalg.norm(b) < tol:
        return CGResult(x, float(np.linalg.norm(b)), 0)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    increases = 0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        ap = apply(p)
        curvature = float(p @ ap)
        if curvature <= 0.0:
            raise IllConditionedError(f"non-positive curvature {curvature:.3e} at CG iteration {iterations}")
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        increases = increases + 1 if rs_new > rs else 0
        if increases >= CG_MAX_INCREASES:
            raise IllConditionedError(f"CG residual increased {increases} times in a row (iteration {iterations})")
        if np.sqrt(rs_new) < tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.linalg.norm(apply(x) - b))
    return CGResult(x, residual, iterations)


def hessian_matvec(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> Matvec:
    """Exact Hessian-vector products of ``loss_fn`` by reverse-over-reverse."""
    params = list(params)
    first = grad(loss_fn, params, create_graph=True)

    def matvec(v: np.ndarray) -> np.ndarray:
        projected = dot(first, [Tensor(x) for x in unflatten(v, params)])
        if not projected.requires_grad:
            return np.zeros_like(v)
        return flatten(grad(projected, params))

    return matvec


def gauss_newton_matvec(outputs_fn: Callable[[], Tensor], params: Sequence[Tensor],
                        output_weight: float, ridge: float) -> Matvec:
    """
    v -> output_weight · JᵀJ v + ridge · v, J the Jacobian of ``outputs_fn`` w.r.t. ``params``.

    Jv comes from differentiating Jᵀu with respect to a dummy u.
    """
    params = list(params)
    outputs = outputs_fn()
    dummy = parameter(np.zeros(outputs.shape))
    transposed = grad((outputs * dummy).sum(), params, create_graph=True)

    def matvec(v: np.ndarray) -> np.ndarray:
        projected = dot(transposed, [Tensor(x) for x in unflatten(v, params)])
        if not projected.requires_grad:
            return ridge * v
        jv = grad(projected, [dummy])[0]
        jtjv = grad((outputs * jv.data).sum(), params)
        return output_weight * flatten(jtjv) + ridge * v

    return matvec


def hypergradient(inner_loss: LossFn, true_loss: LossFn, w: Sequence[Tensor], theta: Sequence[Tensor],
                  damping: float, k_cg: int, matvec: Optional[Matvec] = None,
                  tol: float = CG_TOLERANCE) -> Tuple[List[np.ndarray], HypergradientReport]:
    """
    dL_true/dθ = ∇_θ L_true − ∇_θ(∇_w L_inner · v*), with (H + λI) v* = ∇_w L_true.

    Args:
        inner_loss: L_inner(w, θ)
        true_loss: L_true(w, θ)
        w: Inner parameters at (approximately) the inner optimum
        theta: Outer parameters
        damping: λ added to the curvature
        k_cg: Maximum CG iterations
        matvec: Curvature operator for CG; exact Hessian of ``inner_loss`` if None
    """
    w, theta = list(w), list(theta)
    outer = true_loss(w, theta)
    grads = grad(outer, w + theta)
    b = flatten(grads[:len(w)])
    direct = [g.data for g in grads[len(w):]]
    if matvec is None:
        matvec = hessian_matvec(lambda: inner_loss(w, theta), w)
    cg = cg_solve(matvec, b, damping, k_cg, tol)

    indirect = [np.zeros_like(p.data) for p in theta]
    if np.any(cg.solution):
        first = grad(inner_loss(w, theta), w, create_graph=True)
        projected = dot(first, [Tensor(x) for x in unflatten(cg.solution, w)])
        if projected.requires_grad:
            indirect = [g.data for g in grad(projected, theta)]
    result = [d - i for d, i in zip(direct, indirect)]
    report = HypergradientReport(
        direct_norm=float(np.linalg.norm(flatten(direct))),
        indirect_norm=float(np.linalg.norm(flatten(indirect))),
        cg_residual=cg.residual,
        cg_iterations=cg.iterations,
        norm=float(np.linalg.norm(flatten(result))),
        true_loss=outer.item(),
    )
    return result, report


def unrolled_hypergradient(inner_loss: LossFn, outer_loss: LossFn, w0: Sequence[np.ndarray],
                           theta: Sequence[Tensor], k_inner: int, lr: float) -> List[np.ndarray]:
    """Differentiate ``outer_loss`` through ``k_inner`` recorded gradient steps from ``w0``."""
    theta = list(theta)
    w = [parameter(x) for x in w0]
    for _ in range(k_inner):
        step = grad(inner_loss(w, theta), w, create_graph=True)
        w = [p - g * lr for p, g in zip(w, step)]
    return [g.data for g in grad(outer_loss(w, theta), theta)]


# ------------------------------------------------------ critic/world losses
def batch_messages(world: WorldModel, batch: TransitionBatch, config: TrainConfig) -> Tensor:
    """Messages recomputed from stored observations and impact estimates."""
    return world.messages(batch.observations, batch.dq_hat, config.refine_scale)


def next_state_value(world: WorldModel, target: Critic, next_states, next_observations,
                     masks: np.ndarray, config: TrainConfig, factored: bool = False) -> Tensor:
    """V_target(s', M') with M' encoded from the next observations."""
    messages = world.encode_message(next_observations)
    visible = visible_messages(messages, masks)
    return soft_value(target, next_states, next_observations, visible, config.tau, factored)


def model_targets(world: WorldModel, target: Critic, batch: TransitionBatch, config: TrainConfig,
                  messages: Tensor, masks: np.ndarray, factored: bool = False) -> Tuple[Tensor, Tensor, Tensor]:
    """y_model = r̂ + γ V_target(ŝ', M'), returned with r̂ and ŝ'."""
    reward_hat, next_hat = world.world_model_step(batch.states, batch.actions, messages)
    next_obs_hat = observations_from_state(next_hat, world.n_agents)
    value = next_state_value(world, target, next_hat, next_obs_hat, masks, config, factored)
    return reward_hat + value * (config.gamma * (1.0 - batch.dones)), reward_hat, next_hat


def critic_l2(critic: Critic) -> Tensor:
    return dot(critic.parameters(), critic.parameters())


def model_loss(critic: Critic, world: WorldModel, target: Critic, batch: TransitionBatch,
               config: TrainConfig, factored: bool = False) -> Tensor:
    """Mean squared Bellman residual against world-model targets plus λ_reg‖w‖²."""
    if len(batch) == 0:
        raise UsageError("model loss needs a non-empty batch")
    masks = message_masks(batch.orders, config.parallel_msgs)
    messages = batch_messages(world, batch, config)
    y, _, _ = model_targets(world, target, batch, config, messages, masks, factored)
    q = critic.q_values(batch.states, batch.observations, visible_messages(messages, masks), batch.actions)
    return ((q - y) ** 2).mean() + critic_l2(critic) * config.lambda_reg


def awareness_loss(critic: Critic, world: WorldModel, batch: TransitionBatch, config: TrainConfig) -> Tensor:
    """Mean hinge max(0, ε_margin − |Q(s,a,M) − Q(s,a,0)|)."""
    masks = message_masks(batch.orders, config.parallel_msgs)
    messages = batch_messages(world, batch, config)
    return _awareness(critic, batch, visible_messages(messages, masks), config.epsilon_margin)


def _awareness(critic: Critic, batch: TransitionBatch, visible, margin: float) -> Tensor:
    informed = critic.q_values(batch.states, batch.observations, visible, batch.actions)
    silent = critic.q_values(batch.states, batch.observations, np.zeros(visible.shape), batch.actions)
    return (margin - (informed - silent).abs()).clip_min(0.0).mean()


def true_loss(critic: Critic, world: WorldModel, target: Critic, batch: TransitionBatch,
              config: TrainConfig, factored: bool = False) -> Tensor:
    """Mean squared residual against r + γ V_target(s', M'_true) on real transitions."""
    if len(batch) == 0:
        raise UsageError("true loss needs a non-empty batch")
    masks = message_masks(batch.orders, config.parallel_msgs)
    messages = batch_messages(world, batch, config)
    value = next_state_value(world, target, batch.next_states, batch.next_observations, masks, config, factored)
    y = value * (config.gamma * (1.0 - batch.dones)) + batch.rewards
    q = critic.q_values(batch.states, batch.observations, visible_messages(messages, masks), batch.actions)
    return ((q - y) ** 2).mean()


def prediction_loss(world: WorldModel, batch: TransitionBatch, config: TrainConfig) -> Tensor:
    """One-step world-model error on real rewards and next states."""
    messages = batch_messages(world, batch, config)
    reward_hat, next_hat = world.world_model_step(batch.states, batch.actions, messages)
    return ((reward_hat - batch.rewards) ** 2).mean() + ((next_hat - batch.next_states) ** 2).mean()


class CriticBilevelProblem:
    """
    The critic/world-model bilevel problem on one pair of sampled batches.

    Args:
        world: Outer model θ
        critic: Inner critic w
        target: Frozen target critic
        config: Training configuration
        model_batch: Batch D supplying (s, a, M) for model targets
        env_batch: Batch D_env of real transitions
        factored: Use the factored value instead of joint enumeration
    """

    def __init__(self, world: WorldModel, critic: Critic, target: Critic, config: TrainConfig,
                 model_batch: TransitionBatch, env_batch: TransitionBatch, factored: bool = False):
        self.world = world
        self.critic = critic
        self.target = target
        self.config = config
        self.model_batch = model_batch
        self.env_batch = env_batch
        self.factored = factored
        self._frozen = None

    @property
    def w(self) -> List[Tensor]:
        return self.critic.parameters()

    @property
    def theta(self) -> List[Tensor]:
        return self.world.parameters()

    def inner_loss(self, w: Sequence[Tensor], theta: Sequence[Tensor]) -> Tensor:
        with self.critic.using(list(w)), self.world.using(list(theta)):
            loss = model_loss(self.critic, self.world, self.target, self.model_batch, self.config, self.factored)
            if self.config.effective_lambda_aware > 0:
                loss = loss + awareness_loss(self.critic, self.world, self.model_batch, self.config) \
                    * self.config.effective_lambda_aware
        return loss

    def true_loss(self, w: Sequence[Tensor], theta: Sequence[Tensor]) -> Tensor:
        with self.critic.using(list(w)), self.world.using(list(theta)):
            return true_loss(self.critic, self.world, self.target, self.env_batch, self.config, self.factored)

    def _frozen_inputs(self):
        if self._frozen is None:
            batch = self.model_batch
            masks = message_masks(batch.orders, self.config.parallel_msgs)
            with no_grad():
                messages = batch_messages(self.world, batch, self.config)
                y, _, _ = model_targets(self.world, self.target, batch, self.config, messages, masks, self.factored)
                visible = visible_messages(messages, masks)
            self._frozen = (visible.data, y.data)
        return self._frozen

    def _frozen_q(self) -> Tensor:
        visible, _ = self._frozen_inputs()
        batch = self.model_batch
        return self.critic.q_values(batch.states, batch.observations, visible, batch.actions)

    def frozen_inner_loss(self) -> Tensor:
        """Inner loss with θ-dependent quantities precomputed; differentiable in w only."""
        visible, y = self._frozen_inputs()
        loss = ((self._frozen_q() - y) ** 2).mean() + critic_l2(self.critic) * self.config.lambda_reg
        if self.config.effective_lambda_aware > 0:
            loss = loss + _awareness(self.critic, self.model_batch, visible, self.config.epsilon_margin) \
                * self.config.effective_lambda_aware
        return loss

    def curvature(self) -> Matvec:
        """CG operator at the current w: damped Gauss-Newton or the exact inner Hessian."""
        if self.config.curvature == "exact":
            return hessian_matvec(self.frozen_inner_loss, self.w)
        batch_size = len(self.model_batch)
        return gauss_newton_matvec(self._frozen_q, self.w, 2.0 / batch_size, 2.0 * self.config.lambda_reg)

    def run_inner(self) -> InnerLoopResult:
        cfg = self.config
        return run_inner_loop(self.frozen_inner_loss, self.w, cfg.k_inner, cfg.eta_w,
                              cfg.clip_norm, cfg.inner_warn_norm)

    def hypergradient(self) -> Tuple[List[np.ndarray], HypergradientReport]:
        cfg = self.config
        return hypergradient(self.inner_loss, self.true_loss, self.w, self.theta,
                             cfg.cg_damping, cfg.k_cg, self.curvature())
