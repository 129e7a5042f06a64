"""
Training loop: collect experience, fit the critic on model targets, update the world
model with the hypergradient plus communication losses, and track metrics.
"""
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from seqcomm_dfl.controllers.bilevel import (
    CriticBilevelProblem, HypergradientReport, InnerLoopResult, awareness_loss,
    batch_messages, clip_by_norm, model_loss, prediction_loss,
)
from seqcomm_dfl.controllers.comm import (
    delta_q_mc, hybrid_delta_q, influence_loss, message_effects, message_masks, value_aware_loss,
)
from seqcomm_dfl.controllers.policy import SeqCommPolicy
from seqcomm_dfl.models.config import TrainConfig
from seqcomm_dfl.models.hospital import HospitalEnv
from seqcomm_dfl.models.nets import build_networks, target_ema_update, visible_messages
from seqcomm_dfl.models.replay import ReplayBuffer, TransitionBatch
from seqcomm_dfl.models.tensor import flatten, grad, no_grad, unflatten
from seqcomm_dfl.utils.errors import SeqCommError
from seqcomm_dfl.utils.logger import log_error, log_info, log_warning
from seqcomm_dfl.utils.storage import RunStorage

LAST_WINDOW = 50


@dataclass
class EpisodeStats:
    """Totals of one collected episode."""
    reward: float = 0.0
    severity_improvement: float = 0.0
    blind_penalty: float = 0.0
    drug_penalty: float = 0.0
    resource_penalty: float = 0.0
    overtreatment: float = 0.0
    steps: int = 0


@dataclass
class RunMetrics:
    """One row per outer iteration."""
    iteration: int
    episode_reward: float
    severity_improvement: float
    blind_penalty: float
    drug_penalty: float
    resource_penalty: float
    overtreatment: float
    loss_model: float
    loss_true: float
    loss_va: float
    loss_inf: float
    loss_aware: float
    loss_pred: float
    hypergrad_norm: float
    direct_norm: float
    indirect_norm: float
    outer_grad_norm: float
    cg_residual: float
    cg_iterations: int
    inner_grad_norm: float
    inner_warning: bool
    message_gap: float
    beta: float
    epsilon: float
    wall_clock: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class OuterStepReport:
    """Losses and norms of one world-model update."""
    hypergradient: HypergradientReport
    loss_model: float
    loss_aware: float
    loss_va: float
    loss_inf: float
    loss_pred: float
    grad_norm: float


@dataclass
class TrainResult:
    """Final networks, the metrics series and the run summary."""
    trainer: "SeqCommTrainer"
    metrics: List[RunMetrics] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)


def derived_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class SeqCommTrainer:
    """
    Orchestrates decision-focused training of the communication-augmented world model.

    Usage:
        trainer = SeqCommTrainer(TrainConfig(iterations=10), RunStorage("runs/seed_0"))
        result = trainer.train()
    """

    def __init__(self, config: TrainConfig, storage: Optional[RunStorage] = None):
        config.validate()
        self.config = config
        self.storage = storage
        self.env = HospitalEnv(config.env)
        n, a = self.env.n_agents, self.env.n_actions
        self.world, self.critic, self.target = build_networks(
            self.env.obs_dim, self.env.state_dim, n, a, config.d_m, config.hidden_dim,
            derived_seed(config.seed, 0), config.comm_enabled,
        )
        self.policy = SeqCommPolicy(self.world, self.critic, config)
        self.buffer = ReplayBuffer(config.buffer_capacity, self.env.state_dim, n, self.env.obs_dim, config.d_m)
        self.sample_rng = np.random.default_rng(derived_seed(config.seed, 1))
        self.metrics: List[RunMetrics] = []
        self._inner_warnings = 0

    @property
    def method(self) -> str:
        return "omd" if self.config.no_comm else "seqcomm_dfl"

    # ------------------------------------------------------------ experience
    def estimate_mc(self, seed: int) -> np.ndarray:
        """Per-sender Monte-Carlo impact of each agent's message at the current episode start."""
        cfg = self.config
        snapshot = self.env.fork(seed)
        base = self.policy.base_messages(self.env.observations())
        rollout = self.policy.rollout_policy(cfg.mc_epsilon)
        return np.array([
            delta_q_mc(snapshot.fork, rollout, i, base[i], cfg.mc_samples, cfg.mc_horizon,
                       cfg.gamma, derived_seed(seed, i))
            for i in range(self.env.n_agents)
        ])

    def collect_experience(self, n_episodes: int, seed: int, epsilon: float = 0.0, beta: float = 1.0,
                           stochastic: bool = True, store: bool = True) -> List[EpisodeStats]:
        """
        Run ``n_episodes`` with sequential selection, storing transitions in the buffer.

        Args:
            n_episodes: Episodes to run
            seed: Base seed; episode e uses a seed derived from (seed, e)
            epsilon: Exploration rate
            beta: Critic weight in the hybrid impact estimate; MC grounding runs when < 1
            stochastic: Gumbel-perturbed ordering
            store: Add transitions to the replay buffer
        """
        cfg = self.config
        stats = []
        for e in range(n_episodes):
            episode_seed = derived_seed(seed, e)
            self.env.reset(episode_seed)
            rng = np.random.default_rng(derived_seed(episode_seed, 1))
            mc = None
            no_mc = np.zeros(self.env.n_agents)
            if beta < 1.0 and cfg.comm_enabled:
                mc = self.estimate_mc(derived_seed(episode_seed, 2))
            episode = EpisodeStats()
            while not self.env.done:
                state = self.env.global_state()
                observations = self.env.observations()
                decision = self.policy.act(state, observations, rng, epsilon, stochastic, mc, beta)
                result = self.env.step(decision.actions)
                if store:
                    self.buffer.add(
                        states=state, observations=observations, actions=decision.actions,
                        rewards=result.reward, next_states=self.env.global_state(),
                        next_observations=result.observations, dones=float(result.done),
                        orders=decision.order.permutation, dq_hat=decision.dq_hat,
                        dq_mc=no_mc if mc is None else mc, messages=decision.messages,
                    )
                episode.reward += result.reward
                episode.blind_penalty += result.metrics["blind_penalty"]
                episode.drug_penalty += result.metrics["drug_penalty"]
                episode.resource_penalty += result.metrics["resource_penalty"]
                episode.overtreatment += result.metrics["overtreatment"]
                episode.steps += 1
            episode.severity_improvement = self.env.episode_severity_improvement()
            stats.append(episode)
        return stats

    # ------------------------------------------------------------ updates
    def make_problem(self, t: int, model_batch: TransitionBatch, env_batch: TransitionBatch) -> CriticBilevelProblem:
        cfg = self.config
        factored = cfg.factored_value_after_warmup and t >= cfg.warmup_iterations
        return CriticBilevelProblem(self.world, self.critic, self.target, cfg, model_batch, env_batch, factored)

    def outer_step(self, problem: CriticBilevelProblem, beta: float = 1.0) -> OuterStepReport:
        """
        θ ← θ − η_θ · clip(dL_true/dθ + λ_VA ∇L_VA + λ_inf ∇L_inf + α_pred ∇L_pred).

        L_VA is taken on the hybrid impact (1 − β)·ΔQ^MC + β·ΔQ^critic, with the stored
        Monte-Carlo term held constant. The inner loop must already have run on ``problem``.
        """
        cfg = self.config
        theta = self.world.parameters()
        with no_grad():
            loss_model = model_loss(self.critic, self.world, self.target, problem.model_batch, cfg, problem.factored).item()
            loss_aware = awareness_loss(self.critic, self.world, problem.model_batch, cfg).item()
        hyper, report = problem.hypergradient()
        total = flatten(hyper)

        loss_va = loss_inf = loss_pred = 0.0
        if cfg.effective_lambda_va > 0 or cfg.effective_lambda_inf > 0:
            messages = batch_messages(self.world, problem.model_batch, cfg)
            delta_q, heard, silent = message_effects(self.critic, problem.model_batch.observations, messages, cfg.tau)
            if cfg.effective_lambda_va > 0:
                va = value_aware_loss(hybrid_delta_q(problem.model_batch.dq_mc, delta_q, beta))
                total = total + cfg.effective_lambda_va * flatten(grad(va, theta))
                loss_va = va.item()
            if cfg.effective_lambda_inf > 0:
                inf = influence_loss(heard, silent, log_space=True)
                total = total + cfg.effective_lambda_inf * flatten(grad(inf, theta))
                loss_inf = inf.item()
        if cfg.alpha_pred > 0:
            pred = prediction_loss(self.world, problem.env_batch, cfg)
            total = total + cfg.alpha_pred * flatten(grad(pred, theta))
            loss_pred = pred.item()

        clipped, norm = clip_by_norm(total, cfg.clip_norm)
        for p, piece in zip(theta, unflatten(clipped, theta)):
            p.data = p.data - cfg.eta_theta * piece
        return OuterStepReport(report, loss_model, loss_aware, loss_va, loss_inf, loss_pred, norm)

    def message_gap(self, batch: TransitionBatch) -> float:
        """Mean |Q(s,a,M) − Q(s,a,0)| on ``batch``."""
        with no_grad():
            masks = message_masks(batch.orders, self.config.parallel_msgs)
            visible = visible_messages(batch_messages(self.world, batch, self.config), masks)
            informed = self.critic.q_values(batch.states, batch.observations, visible, batch.actions)
            silent = self.critic.q_values(batch.states, batch.observations, np.zeros(visible.shape), batch.actions)
            return float(np.mean(np.abs(informed.data - silent.data)))

    def train_iteration(self, t: int) -> RunMetrics:
        cfg = self.config
        started = time.perf_counter()
        beta, epsilon = cfg.beta(t), cfg.epsilon(t)
        episodes = self.collect_experience(cfg.episodes_per_iteration, derived_seed(cfg.seed, 2, t),
                                           epsilon=epsilon, beta=beta)
        model_batch = self.buffer.sample(cfg.batch_size, self.sample_rng)
        env_batch = self.buffer.sample(cfg.batch_size, self.sample_rng)

        problem = self.make_problem(t, model_batch, env_batch)
        inner: InnerLoopResult = problem.run_inner()
        if inner.warning:
            self._inner_warnings += 1
            if self._inner_warnings == 1:
                log_warning(f"inner exit grad norm {inner.grad_norm:.3e} exceeds {cfg.inner_warn_norm:.0e}; "
                            "hypergradients may be biased (reported once)", "Trainer")
        outer = self.outer_step(problem, beta)
        target_ema_update(self.target, self.critic, cfg.tau_ema)

        hyper = outer.hypergradient
        return RunMetrics(
            iteration=t + 1,
            episode_reward=float(np.mean([e.reward for e in episodes])),
            severity_improvement=float(np.mean([e.severity_improvement for e in episodes])),
            blind_penalty=float(np.mean([e.blind_penalty for e in episodes])),
            drug_penalty=float(np.mean([e.drug_penalty for e in episodes])),
            resource_penalty=float(np.mean([e.resource_penalty for e in episodes])),
            overtreatment=float(np.mean([e.overtreatment for e in episodes])),
            loss_model=outer.loss_model,
            loss_true=hyper.true_loss,
            loss_va=outer.loss_va,
            loss_inf=outer.loss_inf,
            loss_aware=outer.loss_aware,
            loss_pred=outer.loss_pred,
            hypergrad_norm=hyper.norm,
            direct_norm=hyper.direct_norm,
            indirect_norm=hyper.indirect_norm,
            outer_grad_norm=outer.grad_norm,
            cg_residual=hyper.cg_residual,
            cg_iterations=hyper.cg_iterations,
            inner_grad_norm=inner.grad_norm,
            inner_warning=inner.warning,
            message_gap=self.message_gap(env_batch),
            beta=beta,
            epsilon=epsilon,
            wall_clock=time.perf_counter() - started,
        )

    def train(self) -> TrainResult:
        """Run the configured number of outer iterations."""
        cfg = self.config
        if self.storage:
            self.storage.save_config(cfg.to_dict())
        log_info(f"training {self.method} seed={cfg.seed} iters={cfg.iterations} "
                 f"ablation={cfg.ablation_name()}", "Trainer")
        t = 0
        try:
            for t in range(cfg.iterations):
                row = self.train_iteration(t)
                self.metrics.append(row)
                if self.storage:
                    self.storage.append_metrics(row.to_dict())
                    if row.iteration % cfg.checkpoint_every == 0:
                        self.storage.save_checkpoint(f"iter_{row.iteration:05d}", self.checkpoint_arrays())
                log_info(f"iter={row.iteration} reward={row.episode_reward:.2f} "
                         f"severity={row.severity_improvement:.3f} cg_res={row.cg_residual:.1e} "
                         f"hyper={row.hypergrad_norm:.2e} beta={row.beta:.2f}", "Trainer")
        except SeqCommError as e:
            log_error(f"training aborted at iteration {t + 1}: {e}", "Trainer")
            if self.storage:
                self.storage.save_error_report(e, {"iteration": t + 1, "seed": cfg.seed})
            raise
        summary = self.summarize()
        if self.storage:
            self.storage.save_summary(summary)
            self.storage.save_checkpoint("latest", self.checkpoint_arrays())
        return TrainResult(self, self.metrics, summary)

    # ----------------------------------------------------------- reporting
    def summarize(self) -> Dict:
        cfg = self.config
        rows = self.metrics
        last = rows[-LAST_WINDOW:]
        boundary = max(cfg.warmup_iterations, 1)
        early = [r.hypergrad_norm ** 2 for r in rows if r.iteration <= boundary]
        late = [r.hypergrad_norm ** 2 for r in rows if r.iteration > boundary]
        summary = {
            "method": self.method,
            "ablation": cfg.ablation_name(),
            "seed": cfg.seed,
            "iterations": len(rows),
        }
        if not rows:
            return summary
        final = rows[-1]
        summary.update({
            "final_episode_reward": final.episode_reward,
            "mean_last50_episode_reward": float(np.mean([r.episode_reward for r in last])),
            "final_severity_improvement": final.severity_improvement,
            "mean_last50_severity_improvement": float(np.mean([r.severity_improvement for r in last])),
            "mean_last50_blind_penalty": float(np.mean([r.blind_penalty for r in last])),
            "final_loss_model": final.loss_model,
            "final_loss_true": final.loss_true,
            "final_loss_va": final.loss_va,
            "final_loss_inf": final.loss_inf,
            "final_loss_aware": final.loss_aware,
            "final_loss_pred": final.loss_pred,
            "message_gap_last": final.message_gap,
            "message_gap_heldout": self.message_gap(self.buffer.sample(cfg.batch_size, np.random.default_rng(derived_seed(cfg.seed, 3)))),
            "hypergrad_sq_norm_early": float(np.mean(early)) if early else None,
            "hypergrad_sq_norm_late": float(np.mean(late)) if late else None,
            "inner_warnings": self._inner_warnings,
        })
        return summary

    def evaluate(self, n_episodes: int, seed: int) -> Dict:
        """Greedy episodes with deterministic ordering; nothing is stored."""
        episodes = self.collect_experience(n_episodes, seed, epsilon=0.0, beta=1.0, stochastic=False, store=False)
        return {
            "episodes": n_episodes,
            "mean_episode_reward": float(np.mean([e.reward for e in episodes])),
            "mean_severity_improvement": float(np.mean([e.severity_improvement for e in episodes])),
            "mean_blind_penalty": float(np.mean([e.blind_penalty for e in episodes])),
        }

    # --------------------------------------------------------- checkpoints
    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for module in (self.world, self.critic, self.target):
            arrays.update({name: t.data for name, t in module.named_parameters().items()})
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for module in (self.world, self.critic, self.target):
            module.load_arrays(arrays)
