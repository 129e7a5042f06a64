"""
Experiment runner: loads the configuration, runs seeds (optionally in worker
processes) and writes per-seed artifacts plus comparison and ablation reports.
"""
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from seqcomm_dfl.controllers.trainer import SeqCommTrainer, derived_seed
from seqcomm_dfl.models.config import ABLATION_GRID, ABLATIONS, COMM_DIM_SWEEP, EnvConfig, TrainConfig
from seqcomm_dfl.models.hospital import HospitalEnv
from seqcomm_dfl.utils.errors import ConfigError, SeqCommError, UsageError
from seqcomm_dfl.utils.logger import log_error, log_info
from seqcomm_dfl.utils.storage import RunStorage

MODES = ("train", "eval", "ablate", "compare", "selftest")
COMM_DIM = "comm_dim"
COMM_DIM_BASELINE = 8
SERIES_COLUMNS = ("iteration", "method", "seed", "episode_reward", "severity_improvement")
ABLATION_COLUMNS = ("variant", "reward_mean", "reward_std", "severity_mean", "severity_std",
                    "delta", "delta_pct", "seeds")
THREADS_VARIABLE = "SEQCOMM_THREADS"


@dataclass
class ExperimentSpec:
    """
    One invocation of the runner.

    Attributes:
        config_path: Experiment JSON; defaults everywhere if None
        mode: train, eval, ablate, compare or selftest
        seeds: Seeds to run; each gets its own run directory
        out_dir: Output root
        ablation: Ablation applied in train/eval, or "comm_dim" for the ablate sweep
        iters: Override of the outer iteration count
        eval_episodes: Greedy episodes per seed in eval mode and for the random baseline
    """
    config_path: Optional[str] = None
    mode: str = "train"
    seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    ablation: Optional[str] = None
    iters: Optional[int] = None
    eval_episodes: int = 10

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}'; choose from {list(MODES)}")
        if not self.seeds:
            raise ConfigError("the seed list must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        if self.iters is not None and self.iters < 0:
            raise ConfigError("--iters must be non-negative")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be at least 1")
        if self.ablation is not None and self.ablation not in ABLATIONS and self.ablation != COMM_DIM:
            raise ConfigError(f"unknown ablation '{self.ablation}'; choose from {sorted(ABLATIONS) + [COMM_DIM]}")
        if self.ablation == COMM_DIM and self.mode != "ablate":
            raise ConfigError("the comm_dim sweep only runs in ablate mode")


# ------------------------------------------------------------------ parsing
def parse_seeds(text: str) -> List[int]:
    """'1..10' (inclusive range), '1,2,3' or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            start, stop = (int(part) for part in text.split(".."))
            seeds = list(range(start, stop + 1))
        else:
            seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seed list '{text}'; use '1..10' or '1,2,3'")
    if not seeds:
        raise ConfigError(f"seed list '{text}' is empty")
    return seeds


def load_config(path: Optional[str]) -> TrainConfig:
    """Experiment config from JSON with defaults merged; all defaults if ``path`` is None."""
    if path is None:
        return TrainConfig()
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return TrainConfig.from_dict(data)


def worker_count() -> int:
    """Worker processes allowed by SEQCOMM_THREADS (default 1, sequential)."""
    raw = os.environ.get(THREADS_VARIABLE, "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_VARIABLE} must be an integer, got '{raw}'")
    return max(count, 1)


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


# ------------------------------------------------------------------ workers
def _train_seed(payload: Tuple[Dict, str]) -> Dict:
    """Top-level so worker processes can import it."""
    config_dict, run_dir = payload
    config = TrainConfig.from_dict(config_dict)
    result = SeqCommTrainer(config, RunStorage(run_dir)).train()
    return {
        "summary": result.summary,
        "series": [(r.iteration, r.episode_reward, r.severity_improvement) for r in result.metrics],
    }


def train_many(jobs: Sequence[Tuple[TrainConfig, Path]]) -> List[Dict]:
    """Train every (config, run_dir) job; results come back in job order."""
    payloads = [(config.to_dict(), str(run_dir)) for config, run_dir in jobs]
    workers = min(worker_count(), len(payloads))
    if workers <= 1:
        return [_train_seed(p) for p in payloads]
    log_info(f"training {len(payloads)} runs on {workers} workers", "Experiment")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_seed, payloads))


def random_policy_reward(env_config: EnvConfig, episodes: int, seed: int) -> float:
    """Mean episode reward of uniformly random joint actions."""
    env = HospitalEnv(env_config)
    rng = np.random.default_rng(derived_seed(seed, 5))
    totals = []
    for e in range(episodes):
        env.reset(derived_seed(seed, 5, e))
        total = 0.0
        while not env.done:
            total += env.step(rng.integers(0, env.n_actions, size=env.n_agents)).reward
        totals.append(total)
    return float(np.mean(totals))


# -------------------------------------------------------------------- runner
class ExperimentRunner:
    """
    Dispatches one ExperimentSpec.

    Usage:
        runner = ExperimentRunner(ExperimentSpec(mode="compare", seeds=[1, 2]))
        exit_code = runner.run()
    """

    def __init__(self, spec: ExperimentSpec):
        spec.validate()
        self.spec = spec
        self.out = Path(spec.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.storage = RunStorage(str(self.out))
        self.base = load_config(spec.config_path)
        if spec.iters is not None:
            self.base = replace(self.base, iterations=spec.iters)

    def seed_config(self, seed: int, base: Optional[TrainConfig] = None) -> TrainConfig:
        config = replace(base or self.base, seed=seed)
        config.validate()
        return config

    def run(self) -> Dict:
        handlers = {
            "train": self.train,
            "eval": self.evaluate,
            "ablate": self.ablate,
            "compare": self.compare,
            "selftest": self.selftest,
        }
        log_info(f"mode={self.spec.mode} seeds={self.spec.seeds} out={self.out}", "Experiment")
        return handlers[self.spec.mode]()

    # ------------------------------------------------------------- modes
    def train(self) -> Dict:
        base = self.base.with_ablation(self.spec.ablation) if self.spec.ablation else self.base
        jobs = [(self.seed_config(s, base), self.out / f"seed_{s}") for s in self.spec.seeds]
        results = train_many(jobs)
        rewards = [r["summary"].get("mean_last50_episode_reward", 0.0) for r in results]
        mean, std = _mean_std(rewards)
        report = {
            "method": results[0]["summary"]["method"],
            "ablation": base.ablation_name(),
            "seeds": list(self.spec.seeds),
            "reward_mean": mean,
            "reward_std": std,
            "runs": [r["summary"] for r in results],
        }
        self.storage.save_json("train.json", report)
        return report

    def evaluate(self) -> Dict:
        reports = {}
        for seed in self.spec.seeds:
            run = RunStorage(str(self.out / f"seed_{seed}"))
            if not run.config_file.exists() or not run.has_checkpoint("latest"):
                raise UsageError(f"no trained run with a latest checkpoint in {run.run_dir}")
            trainer = SeqCommTrainer(TrainConfig.from_dict(run.load_config()))
            trainer.load_arrays(run.load_checkpoint("latest"))
            result = trainer.evaluate(self.spec.eval_episodes, derived_seed(seed, 4))
            run.save_json("eval.json", result)
            reports[seed] = result
            log_info(f"seed={seed} eval_reward={result['mean_episode_reward']:.2f} "
                     f"severity={result['mean_severity_improvement']:.3f}", "Experiment")
        return {"runs": reports}

    def ablate(self) -> Dict:
        if self.spec.ablation == COMM_DIM:
            variants = [(f"d_m={d}", replace(self.base, d_m=d)) for d in COMM_DIM_SWEEP]
            reference = f"d_m={COMM_DIM_BASELINE}"
        else:
            variants = [(name, self.base.with_ablation(name)) for name in ABLATION_GRID]
            reference = "full"
        jobs, labels = [], []
        for label, config in variants:
            for seed in self.spec.seeds:
                jobs.append((self.seed_config(seed, config), self.out / label / f"seed_{seed}"))
                labels.append(label)
        results = train_many(jobs)

        grouped: Dict[str, List[Dict]] = {label: [] for label, _ in variants}
        for label, result in zip(labels, results):
            grouped[label].append(result["summary"])
        rows = []
        for label, summaries in grouped.items():
            reward_mean, reward_std = _mean_std([s.get("mean_last50_episode_reward", 0.0) for s in summaries])
            severity_mean, severity_std = _mean_std([s.get("mean_last50_severity_improvement", 0.0) for s in summaries])
            rows.append({"variant": label, "reward_mean": reward_mean, "reward_std": reward_std,
                         "severity_mean": severity_mean, "severity_std": severity_std,
                         "seeds": len(summaries)})
        base_row = next(r for r in rows if r["variant"] == reference)
        for row in rows:
            row["delta"] = row["reward_mean"] - base_row["reward_mean"]
            scale = abs(base_row["reward_mean"])
            row["delta_pct"] = 100.0 * row["delta"] / scale if scale > 0 else 0.0
        self.storage.write_csv("ablation.csv", ABLATION_COLUMNS, rows)
        report = {"reference": reference, "seeds": list(self.spec.seeds), "rows": rows}
        self.storage.save_json("ablation.json", report)
        return report

    def compare(self) -> Dict:
        methods = (("seqcomm_dfl", self.base.with_ablation("full")), ("omd", self.base.with_ablation("no_comm")))
        jobs, labels = [], []
        for method, config in methods:
            for seed in self.spec.seeds:
                jobs.append((self.seed_config(seed, config), self.out / method / f"seed_{seed}"))
                labels.append((method, seed))
        results = train_many(jobs)

        series, per_method = [], {method: [] for method, _ in methods}
        for (method, seed), result in zip(labels, results):
            per_method[method].append(result["summary"])
            series.extend({"iteration": it, "method": method, "seed": seed, "episode_reward": reward,
                           "severity_improvement": severity}
                          for it, reward, severity in result["series"])
        self.storage.write_csv("compare_series.csv", SERIES_COLUMNS, series)

        random_reward = float(np.mean([random_policy_reward(self.base.env, self.spec.eval_episodes, s)
                                       for s in self.spec.seeds]))
        report = {"seeds": list(self.spec.seeds), "random_episode_reward": random_reward, "methods": {}}
        for method, summaries in per_method.items():
            reward_mean, reward_std = _mean_std([s.get("mean_last50_episode_reward", 0.0) for s in summaries])
            severity_mean, severity_std = _mean_std([s.get("mean_last50_severity_improvement", 0.0) for s in summaries])
            blind_mean, _ = _mean_std([s.get("mean_last50_blind_penalty", 0.0) for s in summaries])
            report["methods"][method] = {
                "reward_mean": reward_mean, "reward_std": reward_std,
                "severity_mean": severity_mean, "severity_std": severity_std,
                "blind_penalty_mean": blind_mean,
                "improvement_over_random": reward_mean - random_reward,
            }
        ours, baseline = report["methods"]["seqcomm_dfl"], report["methods"]["omd"]
        gain = baseline["improvement_over_random"]
        report["improvement_ratio"] = ours["improvement_over_random"] / gain if gain > 0 else None
        report["severity_wins"] = int(sum(
            a.get("mean_last50_severity_improvement", 0.0) > b.get("mean_last50_severity_improvement", 0.0)
            for a, b in zip(per_method["seqcomm_dfl"], per_method["omd"])
        ))
        self.storage.save_json("compare.json", report)
        log_info(f"seqcomm_dfl={ours['reward_mean']:.2f}±{ours['reward_std']:.2f} "
                 f"omd={baseline['reward_mean']:.2f}±{baseline['reward_std']:.2f} "
                 f"random={random_reward:.2f}", "Experiment")
        return report

    def selftest(self) -> Dict:
        from seqcomm_dfl.controllers.selftest import run_selftest

        results = run_selftest()
        report = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
        self.storage.save_json("selftest.json", report)
        return report


def run(spec: ExperimentSpec) -> int:
    """
    Execute ``spec`` and map the outcome to an exit status.

    Returns:
        0 on success, 1 on a failed run or failed selftest, 2 on configuration errors
    """
    try:
        report = ExperimentRunner(spec).run()
    except ConfigError as e:
        log_error(f"configuration error: {e}", "Experiment")
        return 2
    except SeqCommError as e:
        log_error(f"{spec.mode} failed: {type(e).__name__}: {e}", "Experiment")
        return 1
    if spec.mode == "selftest" and not report["passed"]:
        failed = [s["name"] for s in report["suites"] if not s["passed"]]
        log_error(f"selftest failed suites: {failed}", "Experiment")
        return 1
    return 0
