"""Receding-horizon rollouts and the evaluation harness: success rates,
mode coverage from a fixed start, sample spread, wall-clock latency, and
the ablation grid runner.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ContractError, ParameterError, Rng
from .data import DemoDataset, NormStats, denormalize, make_training_windows, normalize
from .envs import EnvSpec, ExpertController, classify_mode, env_reset, env_step
from .model import EnergyPolicyModel, PolicyConfig
from .training import TrainConfig, train


@dataclass
class RolloutResult:
    success: bool
    steps_taken: int
    trajectory: np.ndarray             # (steps+1, d) positions incl. start
    mode_label: int | None
    wall_hit: bool
    planner_calls: int = 0
    executed_actions: np.ndarray | None = None


@dataclass
class LatencyReport:
    name: str
    mean_ms: float
    std_ms: float
    repetitions: int
    head_evals: int
    backbone_evals: int


# ---------------------------------------------------------------------------
# policies

class ModelPolicy:
    """Wraps a trained model: window normalization in, raw actions out."""

    def __init__(self, model: EnergyPolicyModel, norm_stats: NormStats, name: str = "model"):
        self.model = model
        self.norm_stats = norm_stats
        self.name = name
        self.obs_horizon = model.config.obs_horizon
        self.pred_horizon = model.config.pred_horizon
        self.exec_horizon = model.config.exec_horizon

    def plan(self, window: np.ndarray, rng: Rng) -> np.ndarray:
        normed = normalize(window, self.norm_stats, "obs")
        chunk = self.model.predict_chunk(normed, rng)
        return denormalize(chunk, self.norm_stats, "action")


class ExpertPolicy:
    """Scripted expert exposed through the chunk-policy interface."""

    def __init__(self, spec: EnvSpec, mode: int, jitter_scale: float = 0.0):
        self.spec = spec
        self.mode = mode
        self.jitter_scale = jitter_scale
        self.obs_horizon = 1
        self.pred_horizon = 1
        self.exec_horizon = 1
        self._controller = ExpertController(spec, mode, jitter_scale)

    def reset(self):
        self._controller.reset()

    def plan(self, window: np.ndarray, rng: Rng) -> np.ndarray:
        return self._controller.action(window[-1], rng)[None, :]


class RandomPolicy:
    """Uniform random actions inside the env bounds."""

    def __init__(self, spec: EnvSpec, pred_horizon: int = 1, exec_horizon: int = 1):
        self.spec = spec
        self.obs_horizon = 1
        self.pred_horizon = pred_horizon
        self.exec_horizon = exec_horizon

    def plan(self, window: np.ndarray, rng: Rng) -> np.ndarray:
        lo, hi = self.spec.action_bounds()
        return rng.uniform(0.0, 1.0, (self.pred_horizon, self.spec.d_action)) * (hi - lo) + lo


def _pad_window(history: list, horizon: int) -> np.ndarray:
    """Most recent ``horizon`` observations, repeating the first at the start."""
    rows = history[-horizon:]
    while len(rows) < horizon:
        rows = [history[0]] + rows
    return np.array(rows)


def rollout(policy, env_spec: EnvSpec, seed: int) -> RolloutResult:
    """Plan a chunk, execute its first ``exec_horizon`` rows, replan.

    ``seed`` drives only the policy's randomness; the environments are
    deterministic.
    """
    rng = Rng(seed)
    if hasattr(policy, "reset"):
        policy.reset()
    state, obs = env_reset(env_spec)
    history = [obs]
    trajectory = [state.position.copy()]
    executed = []
    planner_calls = 0
    while not state.done:
        window = _pad_window(history, policy.obs_horizon)
        chunk = np.atleast_2d(policy.plan(window, rng))
        planner_calls += 1
        for k in range(min(policy.exec_horizon, chunk.shape[0])):
            state, obs, done = env_step(env_spec, state, chunk[k])
            history.append(obs)
            trajectory.append(state.position.copy())
            executed.append(chunk[k])
            if done:
                break
    trajectory = np.array(trajectory)
    mode = classify_mode(env_spec, trajectory, state.success, state.wall_hit)
    return RolloutResult(success=state.success, steps_taken=state.step,
                         trajectory=trajectory, mode_label=mode,
                         wall_hit=state.wall_hit, planner_calls=planner_calls,
                         executed_actions=np.array(executed))


def evaluate_success(policy, env_spec: EnvSpec, n_episodes: int, seed: int) -> float:
    """Fraction of successful rollouts over per-episode seeds seed+i."""
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes}")
    wins = sum(rollout(policy, env_spec, seed + i).success for i in range(n_episodes))
    return wins / n_episodes


def mode_coverage(policy, env_spec: EnvSpec, n_samples: int = 50,
                  start_seed: int = 0) -> dict:
    """Rollouts from the identical initial state varying only policy noise;
    returns {mode: count} plus None for unclassified trajectories."""
    counts: dict = {m: 0 for m in env_spec.modes}
    counts[None] = 0
    for i in range(n_samples):
        res = rollout(policy, env_spec, start_seed + i)
        counts[res.mode_label] = counts.get(res.mode_label, 0) + 1
    return counts


def sample_spread(model: EnergyPolicyModel, window: np.ndarray,
                  n_samples: int, seed: int = 0) -> np.ndarray:
    """Per-dim std of the first predicted action over noise draws
    (normalized action units)."""
    if model.config.head_kind != "energy":
        raise ContractError(
            f"sample_spread requires the energy head, not {model.config.head_kind}")
    rng = Rng(seed)
    firsts = np.array([model.predict_chunk(window, rng)[0] for _ in range(n_samples)])
    return firsts.std(axis=0)


# ---------------------------------------------------------------------------
# latency

def latency_bench(entries: list, repetitions: int = 3, warmup: int = 1) -> list:
    """Wall-clock per 8 executed actions, single-threaded.

    ``entries`` is a list of (name, model, norm_stats).  Each repetition
    times a fixed number of chunk predictions on an identical observation
    window; head/backbone evaluation counts come from the model's
    instrumentation, not from timing.
    """
    if repetitions < 3:
        raise ParameterError(f"repetitions must be >= 3, got {repetitions}")
    reports = []
    for name, model, _stats in entries:
        c = model.config
        window = np.zeros((c.obs_horizon, c.d_obs))
        rng = Rng(0)
        for _ in range(warmup):
            model.predict_chunk(window, rng)
        model.reset_counters()
        model.predict_chunk(window, rng)
        head_evals = model.counters["head"]
        backbone_evals = model.counters["backbone"]

        t0 = time.perf_counter()
        model.predict_chunk(window, rng)
        est = time.perf_counter() - t0
        iters = int(min(200, max(3, 0.25 / max(est, 1e-9))))

        per_chunk = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for _ in range(iters):
                model.predict_chunk(window, rng)
            per_chunk.append((time.perf_counter() - t0) / iters)
        scale = 8.0 / c.exec_horizon  # per 8 executed actions
        ms = np.array(per_chunk) * scale * 1e3
        reports.append(LatencyReport(
            name=name, mean_ms=float(ms.mean()), std_ms=float(ms.std()),
            repetitions=repetitions, head_evals=head_evals,
            backbone_evals=backbone_evals))
    return reports


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_AXES = ("head_width", "alpha", "adaln_mode", "noise_dist")


def ablation_cells(grid: dict) -> list:
    """Cartesian product of grid axes, in deterministic order."""
    if not grid:
        raise ParameterError("empty ablation grid")
    for axis in grid:
        if axis not in ABLATION_AXES:
            raise ParameterError(
                f"unknown ablation axis '{axis}' (choose from {ABLATION_AXES})")
        if not grid[axis]:
            raise ParameterError(f"ablation axis '{axis}' has no values")
    axes = [a for a in ABLATION_AXES if a in grid]
    cells = [{}]
    for axis in axes:
        cells = [dict(cell, **{axis: v}) for cell in cells for v in grid[axis]]
    return cells


def _run_cell(args):
    (index, overrides, dataset, base_policy, base_train,
     n_eval, n_coverage, eval_seed) = args
    cfg = replace(base_policy, **overrides)
    model = EnergyPolicyModel(cfg, seed=base_train.seed)
    train(model, dataset, base_train)
    policy = ModelPolicy(model, dataset.norm_stats)
    spec = dataset.env_spec
    success = evaluate_success(policy, spec, n_eval, eval_seed)
    counts = mode_coverage(policy, spec, n_coverage, eval_seed + n_eval)
    mode_counts = [counts.get(m, 0) for m in spec.modes]
    windows, _ = make_training_windows(dataset, cfg.obs_horizon, cfg.pred_horizon)
    spread = sample_spread(model, windows[0], 32, seed=eval_seed)
    row = {"cell": index}
    for axis in ABLATION_AXES:
        row[axis] = overrides.get(axis, getattr(base_policy, axis))
    row.update({
        "success_rate": success,
        "mode_counts": mode_counts,
        "unclassified": counts.get(None, 0),
        "min_mode_frac": min(mode_counts) / max(1, n_coverage),
        "spread_max": float(spread.max()),
    })
    return row


def ablation_run(dataset: DemoDataset, base_policy: PolicyConfig,
                 base_train: TrainConfig, grid: dict,
                 n_eval: int = 40, n_coverage: int = 40,
                 eval_seed: int = 1000, n_jobs: int | None = None) -> list:
    """Train and evaluate every grid cell with a shared seed.

    ``n_jobs`` (default: the ENERGY_POLICY_THREADS env var, else 1) caps
    worker processes; results are ordered by cell index regardless of
    completion order.
    """
    cells = ablation_cells(grid)
    args = [(i, cell, dataset, base_policy, base_train, n_eval, n_coverage, eval_seed)
            for i, cell in enumerate(cells)]
    if n_jobs is None:
        n_jobs = int(os.environ.get("ENERGY_POLICY_THREADS", "1"))
    n_jobs = max(1, min(n_jobs, len(cells)))
    if n_jobs == 1:
        rows = [_run_cell(a) for a in args]
    else:
        import multiprocessing as mp
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        with mp.get_context("spawn").Pool(n_jobs) as pool:
            rows = pool.map(_run_cell, args)
    return sorted(rows, key=lambda r: r["cell"])


ABLATION_COLUMNS = ("cell", "head_width", "alpha", "adaln_mode", "noise_dist",
                    "success_rate", "mode_counts", "unclassified",
                    "min_mode_frac", "spread_max")


def ablation_table_save(rows: list, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for row in rows:
            vals = []
            for col in ABLATION_COLUMNS:
                v = row[col]
                if col == "mode_counts":
                    vals.append("|".join(str(int(x)) for x in v))
                elif isinstance(v, float):
                    vals.append(f"{v:.17g}")
                else:
                    vals.append(str(v))
            fh.write(",".join(vals) + "\n")


def ablation_table_load(path: str) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != ",".join(ABLATION_COLUMNS):
        raise ParameterError(f"{path}: not an ablation table")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = {}
        for col, raw in zip(ABLATION_COLUMNS, parts):
            if col == "mode_counts":
                row[col] = [int(x) for x in raw.split("|")]
            elif col in ("cell", "head_width", "unclassified"):
                row[col] = int(raw)
            elif col in ("alpha", "success_rate", "min_mode_frac", "spread_max"):
                row[col] = float(raw)
            else:
                row[col] = raw
        rows.append(row)
    return rows


__all__ = [
    "ABLATION_AXES", "ABLATION_COLUMNS", "ExpertPolicy", "LatencyReport",
    "ModelPolicy", "RandomPolicy", "RolloutResult", "ablation_cells",
    "ablation_run", "ablation_table_load", "ablation_table_save",
    "evaluate_success", "latency_bench", "mode_coverage", "rollout",
    "sample_spread",
]
