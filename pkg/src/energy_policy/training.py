"""Training loop, AdamW optimizer, and the EPCK1 checkpoint format.

Everything is deterministic under a fixed seed: the epoch shuffle and all
noise draws come from one Philox stream whose state is frozen into every
checkpoint, so resuming reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientTape, ParameterError, Rng, backward
from .data import DemoDataset, NormStats, make_training_windows
from .model import EnergyPolicyModel, PolicyConfig

CHECKPOINT_MAGIC = b"EPCK1\n"


class TrainingDivergence(Exception):
    """Raised when the loss leaves the reals; names the offending batch."""


class CheckpointFormatError(Exception):
    """Malformed, truncated, or wrong-magic checkpoint file."""


@dataclass
class TrainConfig:
    """Desk-scale defaults, tuned so an energy head commits to both modes
    of the forked task within a laptop-CPU budget; scale epochs/batch up
    for larger experiments."""

    epochs: int = 60
    batch_size: int = 512
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.95)
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if self.grad_clip_norm <= 0.0:
            raise ParameterError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}


# ---------------------------------------------------------------------------
# optimizer

def adamw_step(params: list, grads: list, moments: tuple, cfg: TrainConfig):
    """One decoupled-weight-decay adaptive update.

    ``moments`` is (m, v, t) with t the step count *before* this update;
    returns (new_params, (m, v, t+1)).  m and v are updated in place.
    """
    m, v, t = moments
    t += 1
    b1, b2 = cfg.betas
    lr, wd = cfg.learning_rate, cfg.weight_decay
    eps = 1e-8
    out = []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        mhat = mi / (1.0 - b1 ** t)
        vhat = vi / (1.0 - b2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps) - lr * wd * p)
    return out, (m, v, t)


def clip_global_norm(grads: list, max_norm: float):
    """Scale the whole gradient list so its global L2 norm is <= max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


class AdamW:
    """Stateful wrapper around ``adamw_step`` for a model's parameters."""

    def __init__(self, model: EnergyPolicyModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in model.params()]
        self.v = [np.zeros_like(p.data) for p in model.params()]
        self.t = 0

    def step(self, leaf_grads: dict):
        params = self.model.params()
        grads = [leaf_grads.get(p, np.zeros_like(p.data)) for p in params]
        grads, _ = clip_global_norm(grads, self.cfg.grad_clip_norm)
        updated, (_, _, self.t) = adamw_step(
            [p.data for p in params], grads, (self.m, self.v, self.t), self.cfg)
        for p, new in zip(params, updated):
            p.data = new


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    policy_config: PolicyConfig
    param_names: list
    param_shapes: list
    params: np.ndarray            # flat float64
    epoch: int
    rng_state: dict
    norm_stats: dict              # NormStats.to_dict() copy
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    opt_t: int = 0

    def param_offsets(self) -> list:
        offsets, off = [], 0
        for shape in self.param_shapes:
            offsets.append(off)
            off += int(np.prod(shape))
        return offsets


def make_checkpoint(model: EnergyPolicyModel, epoch: int, rng: Rng,
                    norm_stats: NormStats | dict,
                    optimizer: AdamW | None = None) -> Checkpoint:
    names = [n for n, _ in model.named_params()]
    shapes = [list(p.shape) for _, p in model.named_params()]
    flat = np.concatenate([p.data.ravel() for p in model.params()])
    stats = norm_stats.to_dict() if isinstance(norm_stats, NormStats) else dict(norm_stats)
    ckpt = Checkpoint(policy_config=model.config, param_names=names,
                      param_shapes=shapes, params=flat.copy(), epoch=epoch,
                      rng_state=rng.state, norm_stats=stats)
    if optimizer is not None:
        ckpt.opt_m = np.concatenate([m.ravel() for m in optimizer.m])
        ckpt.opt_v = np.concatenate([v.ravel() for v in optimizer.v])
        ckpt.opt_t = optimizer.t
    return ckpt


def restore_model(ckpt: Checkpoint) -> EnergyPolicyModel:
    """Rebuild the model and overwrite every parameter from the flat array."""
    model = EnergyPolicyModel(ckpt.policy_config, seed=0)
    names = [n for n, _ in model.named_params()]
    if names != list(ckpt.param_names):
        raise CheckpointFormatError("checkpoint parameter names do not match the config")
    offsets = ckpt.param_offsets()
    for (_, p), off, shape in zip(model.named_params(), offsets, ckpt.param_shapes):
        n = int(np.prod(shape))
        p.data = ckpt.params[off:off + n].reshape(shape).copy()
    return model


def checkpoint_save(ckpt: Checkpoint, path: str) -> None:
    header = {
        "policy_config": ckpt.policy_config.to_dict(),
        "param_names": ckpt.param_names,
        "param_shapes": ckpt.param_shapes,
        "param_offsets": ckpt.param_offsets(),
        "n_params": int(ckpt.params.size),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "norm_stats": ckpt.norm_stats,
        "has_moments": ckpt.opt_m is not None,
        "opt_t": ckpt.opt_t,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(ckpt.params.astype("<f8").tobytes())
        if ckpt.opt_m is not None:
            fh.write(ckpt.opt_m.astype("<f8").tobytes())
            fh.write(ckpt.opt_v.astype("<f8").tobytes())


def checkpoint_load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(
            f"{path}: expected magic {CHECKPOINT_MAGIC!r} (is this an EPCK1 checkpoint?)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointFormatError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    n = int(header["n_params"])
    need = n * 8 * (3 if header["has_moments"] else 1)
    if len(raw) - pos != need:
        raise CheckpointFormatError(
            f"{path}: payload is {len(raw) - pos} bytes, expected {need}")
    params = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy()
    pos += n * 8
    opt_m = opt_v = None
    if header["has_moments"]:
        opt_m = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy()
        pos += n * 8
        opt_v = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy()
    try:
        config = PolicyConfig.from_dict(header["policy_config"])
    except (KeyError, TypeError, ParameterError) as exc:
        raise CheckpointFormatError(f"{path}: bad policy config ({exc})") from None
    return Checkpoint(policy_config=config,
                      param_names=header["param_names"],
                      param_shapes=header["param_shapes"],
                      params=params, epoch=int(header["epoch"]),
                      rng_state=header["rng_state"],
                      norm_stats=header["norm_stats"],
                      opt_m=opt_m, opt_v=opt_v, opt_t=int(header["opt_t"]))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    history: list = field(default_factory=list)      # (epoch, mean_loss)
    checkpoints: list = field(default_factory=list)  # Checkpoint objects


def _batch_loss(model: EnergyPolicyModel, windows, chunks, rng: Rng):
    return model.training_loss(windows, chunks, rng)


def train(model: EnergyPolicyModel, dataset: DemoDataset, cfg: TrainConfig,
          resume: Checkpoint | None = None, log=None) -> TrainResult:
    """Minimize the head-appropriate imitation loss over chunked windows.

    Emits a checkpoint every ``cfg.checkpoint_every`` epochs and after the
    final epoch.  A non-finite batch loss aborts with the batch identity
    so the failure is reproducible.
    """
    c = model.config
    if dataset.env_spec.d_obs != c.d_obs or dataset.env_spec.d_action != c.d_action:
        raise ParameterError(
            f"dataset dims (d_obs={dataset.env_spec.d_obs}, "
            f"d_action={dataset.env_spec.d_action}) do not match model config "
            f"(d_obs={c.d_obs}, d_action={c.d_action})")
    windows, chunks = make_training_windows(dataset, c.obs_horizon, c.pred_horizon)
    n = windows.shape[0]

    optimizer = AdamW(model, cfg)
    rng = Rng(cfg.seed)
    start_epoch = 0
    if resume is not None:
        restored = restore_model(resume)
        for p, q in zip(model.params(), restored.params()):
            p.data = q.data
        if resume.opt_m is not None:
            offsets = resume.param_offsets()
            for i, (_, p) in enumerate(model.named_params()):
                off, size = offsets[i], p.size
                optimizer.m[i] = resume.opt_m[off:off + size].reshape(p.shape).copy()
                optimizer.v[i] = resume.opt_v[off:off + size].reshape(p.shape).copy()
            optimizer.t = resume.opt_t
        rng.set_state(resume.rng_state)
        start_epoch = resume.epoch

    result = TrainResult()
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with GradientTape() as tape:
                loss = _batch_loss(model, windows[idx], chunks[idx], rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} batch {batches} "
                    f"(train seed {cfg.seed})")
            grads = backward(tape, loss)
            optimizer.step(grads)
            total += value
            batches += 1
        mean_loss = total / batches
        result.history.append((epoch, mean_loss))
        if log is not None:
            log(epoch, mean_loss)
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            result.checkpoints.append(
                make_checkpoint(model, epoch + 1, rng, dataset.norm_stats, optimizer))
    return result


def save_loss_curve(history: list, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in history:
            fh.write(f"{epoch},{loss:.17g}\n")


__all__ = [
    "CHECKPOINT_MAGIC", "AdamW", "Checkpoint", "CheckpointFormatError",
    "TrainConfig", "TrainResult", "TrainingDivergence", "adamw_step",
    "checkpoint_load", "checkpoint_save", "clip_global_norm", "make_checkpoint",
    "restore_model", "save_loss_curve", "train",
]
