"""
Experiment configuration: environment block and flat training hyperparameters.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Tuple

from seqcomm_dfl.utils.errors import ConfigError

DEFAULT_DRUG_INTERACTIONS = [
    [0.0, 0.8, 0.5],
    [0.8, 0.0, 0.3],
    [0.5, 0.3, 0.0],
]

# Ablation name -> switch overrides
ABLATIONS = {
    "full": {},
    "no_va": {"no_va": True},
    "parallel_msgs": {"parallel_msgs": True},
    "no_gp": {"no_gp": True},
    "no_influence": {"no_influence": True},
    "no_comm": {"no_comm": True},
}

ABLATION_GRID = ("full", "no_va", "parallel_msgs", "no_gp", "no_influence")
COMM_DIM_SWEEP = (4, 8, 16, 32)


def _check_keys(cls, data: Dict[str, Any], block: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        defaults = {k: v for k, v in asdict(cls()).items() if k != "env"}
        listing = ", ".join(f"{k}={v!r}" for k, v in defaults.items())
        raise ConfigError(f"unknown keys in '{block}' block: {unknown}; valid keys and defaults: {listing}")


@dataclass
class EnvConfig:
    """
    Hospital environment settings.

    Attributes:
        n_patients: Patients in the ward
        n_agents: Specialist physicians (one per specialty)
        budget: High-intensity treatments allowed per step before penalty
        drug_interactions: Symmetric condition-by-condition interaction matrix
        horizon: Steps per episode
        noise_scale: Standard deviation of severity noise
        match_probability: Chance an agent is routed to a patient of its own specialty
        efficacy: Severity reduction per treatment intensity
    """
    n_patients: int = 100
    n_agents: int = 3
    n_actions: int = 3
    budget: int = 2
    drug_interactions: List[List[float]] = field(default_factory=lambda: [row[:] for row in DEFAULT_DRUG_INTERACTIONS])
    horizon: int = 50
    noise_scale: float = 0.01
    match_probability: float = 0.7
    efficacy: Tuple[float, float, float] = (0.0, 0.05, 0.12)

    def validate(self) -> None:
        if self.n_agents < 1 or self.n_agents > 3:
            raise ConfigError("n_agents must be between 1 and 3 (one agent per specialty)")
        if self.n_patients < self.n_agents:
            raise ConfigError("n_patients must be at least n_agents")
        if self.n_actions != 3:
            raise ConfigError("the hospital ward has exactly 3 treatment intensities")
        if self.budget < 0 or self.horizon < 1 or self.noise_scale < 0:
            raise ConfigError("budget, horizon and noise_scale must be non-negative (horizon >= 1)")
        if not 0.0 <= self.match_probability <= 1.0:
            raise ConfigError("match_probability must lie in [0, 1]")
        if len(self.efficacy) != 3:
            raise ConfigError("efficacy needs one value per treatment intensity")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to a JSON-ready dictionary."""
        data = asdict(self)
        data["efficacy"] = list(self.efficacy)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnvConfig":
        """Create an environment config, filling omitted keys with defaults."""
        _check_keys(cls, data, "env")
        values = dict(data)
        if "efficacy" in values:
            values["efficacy"] = tuple(float(x) for x in values["efficacy"])
        config = cls(**values)
        config.validate()
        return config


@dataclass
class TrainConfig:
    """
    Flat hyperparameter block for one training run.

    Learning rates, loss weights and solver settings default to the published table;
    the remaining fields are the engine's own scheduling and sizing choices.
    """
    eta_theta: float = 3e-5
    eta_w: float = 1e-4
    cg_damping: float = 0.1
    tau_ema: float = 0.99
    gamma: float = 0.9
    tau: float = 0.1
    k_inner: int = 15
    k_cg: int = 10
    d_m: int = 8
    lambda_va: float = 0.1
    lambda_inf: float = 0.01
    lambda_aware: float = 0.05
    epsilon_margin: float = 0.1
    lambda_reg: float = 1e-3
    clip_norm: float = 1.0
    alpha_pred: float = 5.0

    iterations: int = 500
    warmup_iterations: int = 100
    batch_size: int = 64
    buffer_capacity: int = 10000
    episodes_per_iteration: int = 1
    hidden_dim: int = 128
    refine_scale: float = 0.1
    tau_gumbel: float = 0.1
    gp_orderings: int = 4
    mc_samples: int = 8
    mc_horizon: int = 10
    mc_epsilon: float = 0.2
    epsilon_start: float = 0.3
    epsilon_end: float = 0.05
    checkpoint_every: int = 100
    curvature: str = "gauss_newton"
    factored_value_after_warmup: bool = True
    inner_warn_norm: float = 1e-2
    seed: int = 0

    no_va: bool = False
    parallel_msgs: bool = False
    no_gp: bool = False
    no_influence: bool = False
    no_comm: bool = False

    env: EnvConfig = field(default_factory=EnvConfig)

    # -------------------------------------------------------------- derived
    @property
    def comm_enabled(self) -> bool:
        return not self.no_comm

    @property
    def effective_lambda_va(self) -> float:
        return 0.0 if (self.no_va or self.no_comm) else self.lambda_va

    @property
    def effective_lambda_inf(self) -> float:
        return 0.0 if (self.no_influence or self.no_comm) else self.lambda_inf

    @property
    def effective_lambda_aware(self) -> float:
        return 0.0 if self.no_comm else self.lambda_aware

    def beta(self, t: int) -> float:
        """MC-to-critic annealing weight min(t / T_w, 1)."""
        if self.warmup_iterations <= 0:
            return 1.0
        return min(t / self.warmup_iterations, 1.0)

    def epsilon(self, t: int) -> float:
        """Exploration rate annealed linearly over the warmup."""
        frac = self.beta(t)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{name}'; choose from {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[name])

    def ablation_name(self) -> str:
        for name, overrides in ABLATIONS.items():
            if overrides and all(getattr(self, k) == v for k, v in overrides.items()):
                return name
        return "full"

    # ----------------------------------------------------------- validation
    def validate(self) -> None:
        non_negative = ("eta_theta", "eta_w", "cg_damping", "lambda_va", "lambda_inf",
                        "lambda_aware", "epsilon_margin", "lambda_reg", "alpha_pred", "refine_scale",
                        "mc_epsilon", "epsilon_start", "epsilon_end", "inner_warn_norm")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("tau", "tau_gumbel", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name in ("gamma", "tau_ema"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        for name in ("k_inner", "k_cg", "iterations", "warmup_iterations", "mc_horizon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        for name in ("d_m", "batch_size", "buffer_capacity", "hidden_dim", "gp_orderings",
                     "mc_samples", "episodes_per_iteration", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.curvature not in ("gauss_newton", "exact"):
            raise ConfigError("curvature must be 'gauss_newton' or 'exact'")
        self.env.validate()

    # -------------------------------------------------------- serialization
    def to_dict(self) -> Dict[str, Any]:
        """Convert to the experiment JSON layout {"train": ..., "env": ...}."""
        train = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "env"}
        return {"train": train, "env": self.env.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """Create a config from the experiment JSON layout, merging defaults."""
        unknown_blocks = sorted(set(data) - {"train", "env"})
        if unknown_blocks:
            raise ConfigError(f"unknown config blocks {unknown_blocks}; expected 'train' and 'env'")
        train = dict(data.get("train", {}))
        if "env" in train:
            raise ConfigError("the environment block belongs at the top level under 'env'")
        _check_keys(cls, train, "train")
        env = EnvConfig.from_dict(data.get("env", {}))
        config = cls(env=env, **train)
        config.validate()
        return config
