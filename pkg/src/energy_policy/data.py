"""Demonstration datasets: generation, min-max normalization, training
windows, and the line-delimited EPDS1 file format.

Format: one header line ``EPDS1 <json>`` carrying env name, seed, episode
count and normalization stats, then one line per episode of
space-separated values (``mode success length`` followed by the
row-major (obs, action) floats per step, printed with 17 significant
digits so every float64 round-trips exactly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterError, Rng
from .envs import ENV_NAMES, Episode, EnvSpec, make_env_spec, scripted_expert

DATASET_MAGIC = "EPDS1"


class DatasetFormatError(Exception):
    """Malformed or truncated dataset file."""


@dataclass
class NormStats:
    """Per-dimension min/max used for affine mapping onto [-1, 1]."""

    obs_min: np.ndarray
    obs_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("obs_min", "obs_max", "act_min", "act_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.array(d[k], dtype=np.float64)
                      for k in ("obs_min", "obs_max", "act_min", "act_max")})


@dataclass
class DemoDataset:
    episodes: list
    norm_stats: NormStats
    env_spec: EnvSpec
    seed: int
    mode_policy: str = "balanced"
    jitter_scale: float = 1.0

    def __len__(self):
        return len(self.episodes)

    def mode_histogram(self) -> dict:
        counts: dict = {}
        for ep in self.episodes:
            counts[ep.mode_label] = counts.get(ep.mode_label, 0) + 1
        return counts


def fit_norm_stats(episodes: list) -> NormStats:
    obs = np.concatenate([ep.observations for ep in episodes], axis=0)
    act = np.concatenate([ep.actions for ep in episodes], axis=0)
    return NormStats(obs.min(axis=0), obs.max(axis=0), act.min(axis=0), act.max(axis=0))


def normalize(value: np.ndarray, stats: NormStats, kind: str) -> np.ndarray:
    """Affine map onto [-1, 1] per dim; degenerate dims (max == min) map to 0."""
    lo, hi = _stats_pair(stats, kind)
    span = hi - lo
    safe = np.where(span > 0.0, span, 1.0)
    out = 2.0 * (np.asarray(value, dtype=np.float64) - lo) / safe - 1.0
    return np.where(span > 0.0, out, 0.0)


def denormalize(value: np.ndarray, stats: NormStats, kind: str) -> np.ndarray:
    lo, hi = _stats_pair(stats, kind)
    span = hi - lo
    mid = (hi + lo) / 2.0
    out = (np.asarray(value, dtype=np.float64) + 1.0) * span / 2.0 + lo
    return np.where(span > 0.0, out, mid)


def _stats_pair(stats: NormStats, kind: str):
    if kind == "obs":
        return stats.obs_min, stats.obs_max
    if kind == "action":
        return stats.act_min, stats.act_max
    raise ParameterError(f"kind must be obs or action, got {kind!r}")


def generate_dataset(spec: EnvSpec, n_episodes: int, seed: int,
                     mode_policy: str = "balanced",
                     jitter_scale: float = 1.0) -> DemoDataset:
    """Run the scripted expert; episode i draws from Rng(seed + i) so
    generation is order-independent and parallelizable."""
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes}")
    if mode_policy == "balanced":
        modes = [spec.modes[i % len(spec.modes)] for i in range(n_episodes)]
    elif mode_policy == "random":
        mode_rng = Rng(seed + n_episodes)
        modes = [spec.modes[int(m)] for m in
                 mode_rng.integers(0, len(spec.modes), (n_episodes,))]
    else:
        raise ParameterError(f"mode_policy must be balanced or random, got {mode_policy!r}")
    episodes = [scripted_expert(spec, modes[i], Rng(seed + i), jitter_scale)
                for i in range(n_episodes)]
    return DemoDataset(episodes=episodes, norm_stats=fit_norm_stats(episodes),
                       env_spec=spec, seed=seed, mode_policy=mode_policy,
                       jitter_scale=jitter_scale)


def make_training_windows(dataset: DemoDataset, obs_horizon: int, pred_horizon: int):
    """Normalized (window, chunk) supervision pairs, one per timestep.

    Observation history is padded at the episode start by repeating the
    first observation; the action chunk is padded at the episode end by
    repeating the last action.  Returns arrays of shape
    (N, obs_horizon, d_obs) and (N, pred_horizon, d_action).
    """
    if obs_horizon < 1 or pred_horizon < 1:
        raise ParameterError("obs_horizon and pred_horizon must be >= 1")
    if not dataset.episodes:
        raise ParameterError("empty dataset")
    windows, chunks = [], []
    for ep in dataset.episodes:
        obs = normalize(ep.observations, dataset.norm_stats, "obs")
        act = normalize(ep.actions, dataset.norm_stats, "action")
        length = obs.shape[0]
        for t in range(length):
            idx = np.clip(np.arange(t - obs_horizon + 1, t + 1), 0, length - 1)
            windows.append(obs[idx])
            cdx = np.clip(np.arange(t, t + pred_horizon), 0, length - 1)
            chunks.append(act[cdx])
    return np.array(windows), np.array(chunks)


# ---------------------------------------------------------------------------
# EPDS1 serialization

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _episode_line(ep: Episode) -> str:
    mode = -1 if ep.mode_label is None else int(ep.mode_label)
    vals = np.concatenate([ep.observations, ep.actions], axis=1).ravel()
    body = " ".join(_fmt(v) for v in vals)
    return f"{mode} {1 if ep.success else 0} {len(ep)} {body}"


def dataset_save(dataset: DemoDataset, path: str) -> None:
    header = {
        "env": dataset.env_spec.name,
        "episodes": len(dataset.episodes),
        "seed": dataset.seed,
        "mode_policy": dataset.mode_policy,
        "jitter_scale": dataset.jitter_scale,
        "norm_stats": dataset.norm_stats.to_dict(),
    }
    lines = [f"{DATASET_MAGIC} {json.dumps(header, sort_keys=True)}"]
    lines += [_episode_line(ep) for ep in dataset.episodes]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def dataset_load(path: str) -> DemoDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(DATASET_MAGIC + " "):
        raise DatasetFormatError(
            f"{path}: line 1: expected magic '{DATASET_MAGIC}'")
    try:
        header = json.loads(lines[0][len(DATASET_MAGIC) + 1:])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header ({exc})") from None
    if header["env"] not in ENV_NAMES:
        raise DatasetFormatError(f"{path}: line 1: unknown env {header['env']!r}")
    spec = make_env_spec(header["env"])
    n = int(header["episodes"])
    if len(lines) < n + 1:
        raise DatasetFormatError(
            f"{path}: truncated: header promises {n} episodes, file has {len(lines) - 1}")
    episodes = []
    width = spec.d_obs + spec.d_action
    for i in range(n):
        lineno = i + 2
        parts = lines[i + 1].split()
        try:
            mode, success, length = int(parts[0]), int(parts[1]), int(parts[2])
            vals = np.array([float(v) for v in parts[3:]], dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if vals.size != length * width:
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {length * width} values, got {vals.size}")
        table = vals.reshape(length, width)
        episodes.append(Episode(
            observations=table[:, :spec.d_obs].copy(),
            actions=table[:, spec.d_obs:].copy(),
            mode_label=None if mode < 0 else mode,
            success=bool(success)))
    return DemoDataset(
        episodes=episodes,
        norm_stats=NormStats.from_dict(header["norm_stats"]),
        env_spec=spec, seed=int(header["seed"]),
        mode_policy=header.get("mode_policy", "balanced"),
        jitter_scale=float(header.get("jitter_scale", 1.0)))


__all__ = [
    "DATASET_MAGIC", "DatasetFormatError", "DemoDataset", "NormStats",
    "dataset_load", "dataset_save", "denormalize", "fit_norm_stats",
    "generate_dataset", "make_training_windows", "normalize",
]
