"""
Hospital ward Dec-POMDP.

Specialist physicians treat one focal patient each per step. Each specialist sees the
hidden risk of a patient only when the patient's condition matches its specialty, so
aggressive treatment of mismatched patients is "blind" unless a teammate warns about it.
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from seqcomm_dfl.models.config import EnvConfig
from seqcomm_dfl.utils.errors import UsageError
from seqcomm_dfl.utils.logger import log_debug

N_CONDITIONS = 3
N_VITALS = 3

BLIND_WEIGHT = 1.5
DRUG_WEIGHT = 1.5
RESOURCE_WEIGHT = 0.5
MATCH_BONUS = 0.4
SEVERITY_WEIGHT = 0.6
OVERTREATMENT_PENALTY = 3.0
OVERTREATMENT_THRESHOLD = 0.85
VITAL_SPIKE = 0.2
TERMINAL_SEVERITY = 0.05
HIGH_INTENSITY = 2


def observation_dim(n_agents: int) -> int:
    """vitals + condition one-hot + severity + gated risk + agent one-hot."""
    return N_VITALS + N_CONDITIONS + 1 + 1 + n_agents


def state_dim(n_agents: int) -> int:
    """All local observations plus the full hidden-risk vector of each focal patient."""
    return n_agents * observation_dim(n_agents) + n_agents * N_CONDITIONS


def observations_from_state(state, n_agents: int):
    """Recover the (…, N, obs_dim) observation block from global state vectors."""
    obs_dim = observation_dim(n_agents)
    lead = state.shape[:-1]
    block = state[..., :n_agents * obs_dim]
    return block.reshape(tuple(lead) + (n_agents, obs_dim))


@dataclass
class Patient:
    """
    A single patient record.

    Attributes:
        vitals: Normalized heart rate, blood pressure, oxygen saturation
        condition: Condition index (0-based)
        risk: Hidden risk per condition
        severity: Overall severity
    """
    vitals: np.ndarray
    condition: int
    risk: np.ndarray
    severity: float


@dataclass
class HospitalState:
    """
    Global ward state.

    Attributes:
        vitals: (P, 3) vitals in [0, 1]
        conditions: (P,) condition index per patient
        risks: (P, 3) hidden risks in [0, 1]
        severity: (P,) severity in [0, 1]
        specialties: (N,) specialty per agent
        assignment: (N,) focal patient per agent, injective
        budget: High-intensity budget
        step: Steps taken this episode
        rng: Generator driving noise and assignments
        start_severity: (P,) severity at reset
        treated: (P,) patients that have been focal at some step
    """
    vitals: np.ndarray
    conditions: np.ndarray
    risks: np.ndarray
    severity: np.ndarray
    specialties: np.ndarray
    assignment: np.ndarray
    budget: int
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    start_severity: Optional[np.ndarray] = None
    treated: Optional[np.ndarray] = None
    done: bool = False

    def patient(self, j: int) -> Patient:
        return Patient(self.vitals[j].copy(), int(self.conditions[j]), self.risks[j].copy(), float(self.severity[j]))

    def copy(self) -> "HospitalState":
        return copy.deepcopy(self)


@dataclass
class StepResult:
    """Outcome of one environment transition."""
    reward: float
    state: object
    observations: np.ndarray
    done: bool
    metrics: Dict[str, float] = field(default_factory=dict)


# ------------------------------------------------------------------ penalties
def blind_penalty(specialty: int, condition: int, risk: float, action: int) -> float:
    """Cost of treating a patient whose condition-specific risk the treating agent cannot see."""
    mismatch = 0.0 if specialty == condition else 1.0
    return BLIND_WEIGHT * mismatch * float(risk) * int(action)


def drug_penalty(actions: Sequence[int], conditions: Sequence[int], interactions) -> float:
    """Adverse interactions between simultaneous high-intensity treatments."""
    matrix = np.asarray(interactions, dtype=np.float64)
    if not np.allclose(matrix, matrix.T):
        raise UsageError("drug interaction matrix must be symmetric")
    total = 0.0
    n = len(actions)
    for i in range(n):
        for j in range(i + 1, n):
            if actions[i] == HIGH_INTENSITY and actions[j] == HIGH_INTENSITY:
                total += matrix[conditions[i], conditions[j]]
    return DRUG_WEIGHT * total


def resource_penalty(actions: Sequence[int], budget: int) -> float:
    """Overuse of the shared high-intensity budget."""
    used = sum(1 for a in actions if a == HIGH_INTENSITY)
    return RESOURCE_WEIGHT * max(0, used - budget)


# ---------------------------------------------------------------- environment
class HospitalEnv:
    """
    The ward simulator.

    Usage:
        env = HospitalEnv(EnvConfig())
        state, observations = env.reset(seed=3)
        result = env.step([0, 1, 2])
    """

    def __init__(self, config: Optional[EnvConfig] = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self.n_agents = self.config.n_agents
        self.n_actions = self.config.n_actions
        self.obs_dim = observation_dim(self.n_agents)
        self.state_dim = state_dim(self.n_agents)
        self.interactions = np.asarray(self.config.drug_interactions, dtype=np.float64)
        if not np.allclose(self.interactions, self.interactions.T):
            raise UsageError("drug interaction matrix must be symmetric")
        self.state: Optional[HospitalState] = None

    # -------------------------------------------------------------- episode
    def reset(self, seed: int) -> Tuple[HospitalState, np.ndarray]:
        rng = np.random.default_rng(seed)
        P = self.config.n_patients
        state = HospitalState(
            vitals=rng.uniform(0.3, 0.7, size=(P, N_VITALS)),
            conditions=rng.integers(0, N_CONDITIONS, size=P),
            risks=rng.uniform(0.0, 1.0, size=(P, N_CONDITIONS)),
            severity=rng.uniform(0.2, 0.8, size=P),
            specialties=np.arange(self.n_agents),
            assignment=np.zeros(self.n_agents, dtype=np.int64),
            budget=self.config.budget,
            rng=rng,
        )
        state.start_severity = state.severity.copy()
        state.treated = np.zeros(state.severity.size, dtype=bool)
        self._assign(state)
        self.state = state
        log_debug(f"reset seed={seed} focal={state.assignment.tolist()}", "Env")
        return state, self.observations()

    def fork(self, seed: int) -> "HospitalEnv":
        """Copy of this environment whose future noise comes from ``seed``."""
        twin = copy.copy(self)
        twin.state = self.state.copy()
        twin.state.rng = np.random.default_rng(seed)
        return twin

    def _assign(self, state: HospitalState) -> None:
        taken = set()
        for i in range(self.n_agents):
            u, r = state.rng.random(), state.rng.random()
            matching = [j for j in np.flatnonzero(state.conditions == state.specialties[i]) if j not in taken]
            others = [j for j in np.flatnonzero(state.conditions != state.specialties[i]) if j not in taken]
            if (u < self.config.match_probability and matching) or not others:
                pool = matching
                choice = max(pool, key=lambda j: (state.severity[j], -j))
            else:
                choice = others[min(int(r * len(others)), len(others) - 1)]
            state.assignment[i] = choice
            taken.add(choice)

    # --------------------------------------------------------- observations
    def observe(self, agent: int, state: Optional[HospitalState] = None) -> np.ndarray:
        state = state or self.state
        patient = state.patient(int(state.assignment[agent]))
        onehot = np.zeros(N_CONDITIONS)
        onehot[patient.condition] = 1.0
        specialty = state.specialties[agent]
        gated = patient.risk[specialty] if specialty == patient.condition else 0.0
        agent_id = np.zeros(self.n_agents)
        agent_id[agent] = 1.0
        return np.concatenate([patient.vitals, onehot, [patient.severity, gated], agent_id])

    def observations(self, state: Optional[HospitalState] = None) -> np.ndarray:
        return np.stack([self.observe(i, state) for i in range(self.n_agents)])

    def global_state(self, state: Optional[HospitalState] = None) -> np.ndarray:
        state = state or self.state
        focal_risks = state.risks[state.assignment].reshape(-1)
        return np.concatenate([self.observations(state).reshape(-1), focal_risks])

    # ------------------------------------------------------------- dynamics
    def step(self, actions: Sequence[int]) -> StepResult:
        state = self.state
        if state is None or state.done:
            raise UsageError("step called on a terminated or unreset episode")
        actions = [int(a) for a in actions]
        if len(actions) != self.n_agents or any(a < 0 or a >= self.n_actions for a in actions):
            raise UsageError(f"invalid joint action {actions}")

        noise = state.rng.normal(size=self.n_agents) * self.config.noise_scale
        efficacy = self.config.efficacy
        focal = state.assignment.copy()
        conditions = [int(state.conditions[j]) for j in focal]

        reward = 0.0
        blind_total = 0.0
        improvement = []
        overtreated = 0
        matched = 0
        for i, (j, a) in enumerate(zip(focal, actions)):
            condition = conditions[i]
            specialty = int(state.specialties[i])
            mismatch = 1.0 if specialty != condition else 0.0
            risk = state.risks[j, condition]

            before_c = state.severity[j]
            after_c = np.clip(before_c - efficacy[a] * (1.0 - risk * mismatch) + noise[i], 0.0, 1.0)
            delta_c = after_c - before_c

            vital = state.vitals[j, condition]
            drift = np.sign(0.5 - vital) * min(efficacy[a], abs(0.5 - vital))
            new_vital = np.clip(vital + drift + VITAL_SPIKE * a * risk * mismatch, 0.0, 1.0)
            delta_v = abs(vital - 0.5) - abs(new_vital - 0.5)

            state.severity[j] = after_c
            state.vitals[j, condition] = new_vital
            over = float(np.max(state.vitals[j]) > OVERTREATMENT_THRESHOLD)

            reward += delta_v + MATCH_BONUS * (1.0 - mismatch) - SEVERITY_WEIGHT * delta_c - OVERTREATMENT_PENALTY * over
            rho = blind_penalty(specialty, condition, risk, a)
            blind_total += rho
            improvement.append(before_c - after_c)
            overtreated += int(over)
            matched += int(mismatch == 0.0)

        drug = drug_penalty(actions, conditions, self.interactions)
        resource = resource_penalty(actions, state.budget)
        reward -= blind_total + drug + resource

        state.treated[focal] = True
        state.step += 1
        state.done = bool(state.step >= self.config.horizon
                          or np.all(state.severity[focal] < TERMINAL_SEVERITY))
        self._assign(state)

        metrics = {
            "severity_improvement": float(np.mean(improvement)),
            "blind_penalty": float(blind_total),
            "drug_penalty": float(drug),
            "resource_penalty": float(resource),
            "overtreatment": float(overtreated),
            "matched": float(matched),
        }
        return StepResult(float(reward), state, self.observations(), state.done, metrics)

    @property
    def done(self) -> bool:
        return self.state is None or self.state.done

    def episode_severity_improvement(self) -> float:
        """Mean severity reduction since reset over the patients treated this episode; 0 before any step."""
        state = self.state
        if not np.any(state.treated):
            return 0.0
        return float(np.mean(state.start_severity[state.treated] - state.severity[state.treated]))

    def frozen_scenario(self, specialties: List[int], conditions: List[int], risk: float) -> HospitalState:
        """Deterministic state with chosen specialty/condition pairs and a uniform hidden risk."""
        n = len(specialties)
        state = HospitalState(
            vitals=np.full((n, N_VITALS), 0.5),
            conditions=np.asarray(conditions, dtype=np.int64),
            risks=np.full((n, N_CONDITIONS), float(risk)),
            severity=np.full(n, 0.5),
            specialties=np.asarray(specialties, dtype=np.int64),
            assignment=np.arange(n),
            budget=self.config.budget,
            rng=np.random.default_rng(0),
        )
        state.start_severity = state.severity.copy()
        state.treated = np.zeros(state.severity.size, dtype=bool)
        return state
