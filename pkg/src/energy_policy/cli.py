"""Command-line workbench.

Subcommands cover the full pipeline: ``gen-data`` -> ``train`` -> ``eval``
/ ``coverage`` / ``bench`` / ``ablate``, plus ``inspect`` for artifacts.
Config precedence is defaults <- --config file <- explicit flags, and the
resolved configuration is echoed into every output directory as
``config.json``.  Report paths write matplotlib PNGs next to their CSV
dumps.

Exit codes: 0 success, 2 usage/config error, 3 training failure,
4 artifact corruption.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import ParameterError
from .data import DatasetFormatError, dataset_load, dataset_save, generate_dataset
from .envs import ENV_NAMES, make_env_spec
from .evaluation import (
    ModelPolicy,
    ablation_run,
    ablation_table_save,
    latency_bench,
    rollout,
)
from .model import (
    ADALN_MODES,
    HEAD_KINDS,
    NOISE_DISTS,
    NOISE_SHARING,
    EnergyPolicyModel,
    PolicyConfig,
    count_params,
)
from .training import (
    CheckpointFormatError,
    TrainConfig,
    TrainingDivergence,
    checkpoint_load,
    checkpoint_save,
    restore_model,
    save_loss_curve,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_CORRUPT = 4


class ConfigError(Exception):
    """Inconsistent or invalid resolved configuration."""


POLICY_KEYS = ("head_kind", "alpha", "noise_dist", "noise_sharing", "noise_dim",
               "adaln_mode", "head_width", "head_depth", "ddpm_steps", "d_model",
               "depth", "heads", "obs_horizon", "pred_horizon", "exec_horizon")
TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "weight_decay",
              "grad_clip_norm", "seed", "checkpoint_every")

TRAIN_DEFAULTS = {
    "head_kind": "energy", "alpha": 1.0, "noise_dist": "u05",
    "noise_sharing": "per_chunk", "noise_dim": 16, "adaln_mode": "adaln",
    "head_width": 128, "head_depth": 3, "ddpm_steps": 100,
    "d_model": 64, "depth": 2, "heads": 4,
    "obs_horizon": 2, "pred_horizon": 16, "exec_horizon": 8,
    "d_obs": None, "d_action": None,
    "epochs": 60, "batch_size": 512, "learning_rate": 2e-4,
    "weight_decay": 1e-4, "grad_clip_norm": 1.0, "seed": 0,
    "checkpoint_every": 50,
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    unknown = set(cfg) - set(TRAIN_DEFAULTS)
    if unknown:
        raise ConfigError(f"config file {path}: unknown keys {sorted(unknown)}")
    return cfg


def _resolve(args: argparse.Namespace, file_config: dict) -> dict:
    resolved = dict(TRAIN_DEFAULTS)
    resolved.update(file_config)
    for key in TRAIN_DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = v
    return resolved


def _echo_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.17g}"
        return str(v)

    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = make_env_spec(args.env)
    dataset = generate_dataset(spec, args.episodes, args.seed,
                               mode_policy=args.mode_policy,
                               jitter_scale=args.jitter_scale)
    dataset_save(dataset, args.out)
    hist = dataset.mode_histogram()
    parts = " ".join(f"mode {m}: {hist[m]}" for m in sorted(hist, key=str))
    print(f"wrote {len(dataset)} episodes to {args.out} ({parts})")
    return EXIT_OK


def _policy_config_from(resolved: dict, d_obs: int, d_action: int) -> PolicyConfig:
    if resolved["d_obs"] is not None and resolved["d_obs"] != d_obs:
        raise ConfigError(
            f"configured d_obs={resolved['d_obs']} but dataset has d_obs={d_obs}")
    if resolved["d_action"] is not None and resolved["d_action"] != d_action:
        raise ConfigError(
            f"configured d_action={resolved['d_action']} but dataset has "
            f"d_action={d_action}")
    kwargs = {k: resolved[k] for k in POLICY_KEYS}
    return PolicyConfig(d_obs=d_obs, d_action=d_action, **kwargs)


def _train_config_from(resolved: dict) -> TrainConfig:
    return TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS})


def cmd_train(args) -> int:
    resolved = _resolve(args, _load_config_file(args.config))
    dataset = dataset_load(args.data)
    spec = dataset.env_spec
    noise_flags = [f for f in ("noise_dist", "noise_sharing", "noise_dim")
                   if getattr(args, f) is not None]
    if resolved["head_kind"] == "l2" and noise_flags:
        print(f"warning: {', '.join(noise_flags)} ignored for the deterministic "
              "l2 head", file=sys.stderr)
    policy_cfg = _policy_config_from(resolved, spec.d_obs, spec.d_action)
    train_cfg = _train_config_from(resolved)
    out_dir = Path(args.out_dir)
    resolved["d_obs"], resolved["d_action"] = spec.d_obs, spec.d_action
    resolved["data"] = args.data
    resolved["env"] = spec.name
    _echo_config(out_dir, resolved)

    model = EnergyPolicyModel(policy_cfg, seed=train_cfg.seed)
    print(f"training {policy_cfg.head_kind} head on {spec.name} "
          f"({len(dataset)} episodes, {count_params(model)} params)")
    result = train(model, dataset, train_cfg,
                   log=lambda e, l: print(f"epoch {e:4d}  loss {l:.6f}")
                   if (e % max(1, train_cfg.epochs // 10) == 0) else None)
    for ckpt in result.checkpoints:
        checkpoint_save(ckpt, str(out_dir / f"checkpoint_{ckpt.epoch:05d}.epck"))
    checkpoint_save(result.checkpoints[-1], str(out_dir / "checkpoint_final.epck"))
    save_loss_curve(result.history, str(out_dir / "loss_curve.csv"))
    from .plotting import plot_loss_curve
    plot_loss_curve(result.history, str(out_dir / "loss_curve.png"))
    print(f"final loss {result.history[-1][1]:.6f}; artifacts in {out_dir}")
    return EXIT_OK


def _load_policy(ckpt_path: str, env_name: str):
    ckpt = checkpoint_load(ckpt_path)
    spec = make_env_spec(env_name)
    cfg = ckpt.policy_config
    if cfg.d_obs != spec.d_obs or cfg.d_action != spec.d_action:
        raise ConfigError(
            f"checkpoint dims (d_obs={cfg.d_obs}, d_action={cfg.d_action}) do not "
            f"match env {spec.name} (d_obs={spec.d_obs}, d_action={spec.d_action})")
    model = restore_model(ckpt)
    from .data import NormStats
    stats = NormStats.from_dict(ckpt.norm_stats)
    return ModelPolicy(model, stats, name=Path(ckpt_path).stem), spec, ckpt


def _dump_trajectories(path: Path, results: list, d_pos: int, d_action: int) -> None:
    header = (["episode", "step"] + [f"p{i}" for i in range(d_pos)]
              + [f"a{i}" for i in range(d_action)])
    rows = []
    for e, res in enumerate(results):
        acts = res.executed_actions
        for t, pos in enumerate(res.trajectory):
            act = (acts[t] if acts is not None and t < len(acts)
                   else np.full(d_action, np.nan))
            rows.append([e, t] + [float(v) for v in pos] + [float(v) for v in act])
    _write_csv(path, header, rows)


def cmd_eval(args) -> int:
    policy, spec, _ = _load_policy(args.ckpt, args.env)
    out_dir = Path(args.out)
    _echo_config(out_dir, {"command": "eval", "ckpt": args.ckpt, "env": args.env,
                           "episodes": args.episodes, "seed": args.seed})
    results = [rollout(policy, spec, args.seed + i) for i in range(args.episodes)]
    rate = sum(r.success for r in results) / len(results)
    _write_csv(out_dir / "rollouts.csv",
               ["episode", "success", "steps", "wall_hit", "mode"],
               [[i, int(r.success), r.steps_taken, int(r.wall_hit),
                 -1 if r.mode_label is None else r.mode_label]
                for i, r in enumerate(results)])
    _dump_trajectories(out_dir / "trajectories.csv", results,
                       spec.d_obs, spec.d_action)
    from .plotting import plot_trajectories
    plot_trajectories([r.trajectory for r in results],
                      [r.mode_label for r in results], spec,
                      str(out_dir / "trajectories.png"),
                      title=f"{spec.name}: success {rate:.2f}")
    print(f"success rate {rate:.3f} over {args.episodes} episodes "
          f"(artifacts in {out_dir})")
    return EXIT_OK


def cmd_coverage(args) -> int:
    policy, spec, _ = _load_policy(args.ckpt, args.env)
    out_dir = Path(args.out)
    _echo_config(out_dir, {"command": "coverage", "ckpt": args.ckpt,
                           "env": args.env, "samples": args.samples,
                           "seed": args.seed})
    results = [rollout(policy, spec, args.seed + i) for i in range(args.samples)]
    counts: dict = {m: 0 for m in spec.modes}
    counts[None] = 0
    for r in results:
        counts[r.mode_label] = counts.get(r.mode_label, 0) + 1
    _write_csv(out_dir / "coverage.csv", ["mode", "count"],
               [[("none" if m is None else m), c] for m, c in counts.items()])
    _write_csv(out_dir / "samples.csv", ["sample", "mode", "success", "steps"],
               [[i, -1 if r.mode_label is None else r.mode_label,
                 int(r.success), r.steps_taken] for i, r in enumerate(results)])
    _dump_trajectories(out_dir / "trajectories.csv", results,
                       spec.d_obs, spec.d_action)
    from .plotting import plot_coverage, plot_trajectories
    plot_coverage(counts, str(out_dir / "coverage.png"),
                  title=f"{spec.name}: {args.samples} samples, one start")
    plot_trajectories([r.trajectory for r in results],
                      [r.mode_label for r in results], spec,
                      str(out_dir / "trajectories.png"),
                      title=f"{spec.name}: {args.samples} sampled rollouts")
    parts = " ".join(f"{'none' if m is None else m}:{c}" for m, c in counts.items())
    print(f"coverage over {args.samples} samples: {parts} (artifacts in {out_dir})")
    return EXIT_OK


def cmd_bench(args) -> int:
    entries = []
    for path in args.ckpts:
        ckpt = checkpoint_load(path)
        model = restore_model(ckpt)
        entries.append((Path(path).stem, model, ckpt.norm_stats))
    reports = latency_bench(entries, repetitions=args.reps, warmup=args.warmup)
    out_dir = Path(args.out)
    _echo_config(out_dir, {"command": "bench", "ckpts": list(args.ckpts),
                           "reps": args.reps, "warmup": args.warmup})
    _write_csv(out_dir / "bench.csv",
               ["policy", "reps", "mean_ms", "std_ms", "head_evals",
                "backbone_evals"],
               [[r.name, r.repetitions, r.mean_ms, r.std_ms, r.head_evals,
                 r.backbone_evals] for r in reports])
    from .plotting import plot_latency
    plot_latency(reports, str(out_dir / "bench.png"))
    for r in reports:
        print(f"{r.name}: {r.mean_ms:.3f} +- {r.std_ms:.3f} ms per 8 actions "
              f"({r.head_evals} head evals)")
    return EXIT_OK


_AXIS_ALIASES = {"alpha": "alpha", "width": "head_width", "head_width": "head_width",
                 "adaln": "adaln_mode", "adaln_mode": "adaln_mode",
                 "noise": "noise_dist", "noise_dist": "noise_dist"}


def _parse_grid(specs: list) -> dict:
    grid: dict = {}
    for spec in specs:
        for part in spec.split(";"):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ConfigError(f"grid axis '{part}' is not of the form axis=v1,v2")
            name, _, values = part.partition("=")
            axis = _AXIS_ALIASES.get(name.strip())
            if axis is None:
                raise ConfigError(
                    f"unknown grid axis '{name.strip()}' "
                    f"(choose from {sorted(set(_AXIS_ALIASES))})")
            vals: list = []
            for raw in values.split(","):
                raw = raw.strip()
                if not raw:
                    continue
                if axis == "alpha":
                    vals.append(float(raw))
                elif axis == "head_width":
                    vals.append(int(raw))
                else:
                    vals.append(raw)
            if not vals:
                raise ConfigError(f"grid axis '{axis}' has no values")
            grid[axis] = vals
    if not grid:
        raise ConfigError("empty ablation grid; pass --grid axis=v1,v2,...")
    return grid


def cmd_ablate(args) -> int:
    grid = _parse_grid(args.grid)
    resolved = _resolve(args, _load_config_file(args.config))
    dataset = dataset_load(args.data)
    spec = dataset.env_spec
    policy_cfg = _policy_config_from(resolved, spec.d_obs, spec.d_action)
    train_cfg = _train_config_from(resolved)
    out_dir = Path(args.out_dir)
    resolved.update({"command": "ablate", "data": args.data, "grid": grid,
                     "eval_episodes": args.eval_episodes,
                     "coverage_samples": args.coverage_samples})
    _echo_config(out_dir, resolved)
    rows = ablation_run(dataset, policy_cfg, train_cfg, grid,
                        n_eval=args.eval_episodes,
                        n_coverage=args.coverage_samples,
                        eval_seed=args.eval_seed, n_jobs=args.jobs)
    ablation_table_save(rows, str(out_dir / "ablation.csv"))
    from .plotting import plot_ablation
    plot_ablation(rows, str(out_dir / "ablation.png"))
    for row in rows:
        counts = "|".join(str(c) for c in row["mode_counts"])
        print(f"cell {row['cell']:2d} alpha={row['alpha']:g} "
              f"{row['adaln_mode']}/{row['noise_dist']} w={row['head_width']}: "
              f"success {row['success_rate']:.2f} coverage {counts}")
    print(f"{len(rows)} cells -> {out_dir / 'ablation.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if (args.ckpt is None) == (args.data is None):
        raise ConfigError("pass exactly one of --ckpt or --data")
    if args.ckpt is not None:
        ckpt = checkpoint_load(args.ckpt)
        model = restore_model(ckpt)
        print(f"EPCK1 checkpoint {args.ckpt}")
        print(f"  epoch: {ckpt.epoch}")
        print(f"  parameters: {count_params(model)}")
        for key, value in sorted(ckpt.policy_config.to_dict().items()):
            print(f"  config.{key}: {value}")
        for key, value in ckpt.norm_stats.items():
            print(f"  norm.{key}: {[f'{v:.6g}' for v in value]}")
    else:
        dataset = dataset_load(args.data)
        hist = dataset.mode_histogram()
        print(f"EPDS1 dataset {args.data}")
        print(f"  env: {dataset.env_spec.name}")
        print(f"  episodes: {len(dataset)}")
        print(f"  seed: {dataset.seed}  mode_policy: {dataset.mode_policy}")
        parts = " ".join(f"{m}:{hist[m]}" for m in sorted(hist, key=str))
        print(f"  mode histogram: {parts}")
        steps = sum(len(ep) for ep in dataset.episodes)
        print(f"  total steps: {steps}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="energy-policy",
        description="Energy-score policy learning workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    p.add_argument("--env", required=True, choices=ENV_NAMES)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode-policy", dest="mode_policy", default="balanced",
                   choices=("balanced", "random"))
    p.add_argument("--jitter-scale", dest="jitter_scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--config", help="JSON config file (defaults <- file <- flags)")
    p.add_argument("--head", dest="head_kind", choices=HEAD_KINDS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--noise-dist", dest="noise_dist", choices=NOISE_DISTS)
    p.add_argument("--noise-sharing", dest="noise_sharing", choices=NOISE_SHARING)
    p.add_argument("--noise-dim", dest="noise_dim", type=int)
    p.add_argument("--adaln-mode", dest="adaln_mode", choices=ADALN_MODES)
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--head-depth", dest="head_depth", type=int)
    p.add_argument("--ddpm-steps", dest="ddpm_steps", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--obs-horizon", dest="obs_horizon", type=int)
    p.add_argument("--pred-horizon", dest="pred_horizon", type=int)
    p.add_argument("--exec-horizon", dest="exec_horizon", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-clip", dest="grad_clip_norm", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's success rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", required=True, choices=ENV_NAMES)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("coverage",
                       help="mode coverage from one fixed start, varying noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", required=True, choices=ENV_NAMES)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("bench", help="latency per 8 executed actions")
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and evaluate a config grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--grid", action="append", default=[],
                   help="axis=v1,v2,... (repeatable; axes: alpha, head_width, "
                        "adaln_mode, noise_dist)")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=40)
    p.add_argument("--coverage-samples", dest="coverage_samples", type=int, default=40)
    p.add_argument("--eval-seed", dest="eval_seed", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel cells (default: ENERGY_POLICY_THREADS or 1)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a dataset or checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DatasetFormatError, CheckpointFormatError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
