"""Action-chunking policy: observation encoder, learnable action tokens,
transformer backbone, and a noise-conditioned head that emits a whole
H x d_action chunk in one pass.

Three interchangeable heads share the backbone:

- ``energy``: residual blocks modulated by adaLN-Zero conditioning on a
  noise draw; sampling an action chunk is a single head evaluation, and
  training scores two samples from the same backbone output.
- ``l2``: the same stack without conditioning, trained with MSE; a
  deterministic baseline that collapses multimodal data to its mean.
- ``ddpm``: a denoising baseline that needs ``ddpm_steps`` head
  evaluations per chunk, used for the latency comparison.

The ``concat`` head variant replaces adaLN modulation by concatenating
the noise embedding onto each backbone vector (ablation baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    ParameterError,
    Rng,
    Tensor,
    add,
    power,
    repeat_axis,
    reshape,
    silu,
    slice_axis,
    sub,
    tmean,
)
from .layers import (
    AdaLnBlock,
    AttentionLayer,
    LayerNorm,
    LinearLayer,
    ResidualBlock,
    adaln_forward,
    attention_forward,
    concat,
    embedding_add,
    residual_block_forward,
    tile_rows,
)
from .scoring import EnergyConfig, chunk_energy_loss

NOISE_DISTS = ("u05", "u10", "gauss")
HEAD_KINDS = ("energy", "l2", "ddpm")
ADALN_MODES = ("adaln", "concat")
NOISE_SHARING = ("per_chunk", "per_timestep")


@dataclass
class PolicyConfig:
    """Architecture and objective hyperparameters (desk-scale defaults)."""

    d_obs: int
    d_action: int
    obs_horizon: int = 2
    pred_horizon: int = 16
    exec_horizon: int = 8
    d_model: int = 64
    depth: int = 2
    heads: int = 4
    head_width: int = 128
    head_depth: int = 3
    alpha: float = 1.0
    noise_dim: int = 16
    noise_dist: str = "u05"
    noise_sharing: str = "per_chunk"
    head_kind: str = "energy"
    ddpm_steps: int = 100
    adaln_mode: str = "adaln"
    loss_eps: float = 1e-8
    flatten_chunk: bool = False

    def __post_init__(self):
        if self.exec_horizon > self.pred_horizon:
            raise ParameterError(
                f"exec_horizon {self.exec_horizon} exceeds pred_horizon {self.pred_horizon}")
        if not 0.0 < self.alpha <= 2.0:
            raise ParameterError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.head_kind not in HEAD_KINDS:
            raise ParameterError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind == "energy" and self.noise_dim < 1:
            raise ParameterError("energy head requires noise_dim >= 1")
        if self.head_kind == "ddpm" and self.ddpm_steps < 1:
            raise ParameterError(f"ddpm_steps must be >= 1, got {self.ddpm_steps}")
        if self.noise_dist not in NOISE_DISTS:
            raise ParameterError(f"noise_dist must be one of {NOISE_DISTS}")
        if self.noise_sharing not in NOISE_SHARING:
            raise ParameterError(f"noise_sharing must be one of {NOISE_SHARING}")
        if self.adaln_mode not in ADALN_MODES:
            raise ParameterError(f"adaln_mode must be one of {ADALN_MODES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


class EnergyPolicyModel:
    """Transformer backbone + chunk head, parameters registered by name."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        self.energy_cfg = EnergyConfig(alpha=config.alpha, eps=config.loss_eps,
                                       flatten_chunk=config.flatten_chunk)
        c = config
        rng = Rng(seed)
        bound = 1.0 / np.sqrt(c.d_model)

        self.enc1 = LinearLayer(c.d_obs, c.d_model, rng)
        self.enc2 = LinearLayer(c.d_model, c.d_model, rng)
        self.action_tokens = Tensor(rng.uniform(-bound, bound, (c.pred_horizon, c.d_model)))
        self.position_table = Tensor(
            rng.uniform(-bound, bound, (c.obs_horizon + c.pred_horizon, c.d_model)))
        self.blocks = []
        for _ in range(c.depth):
            self.blocks.append((LayerNorm(c.d_model),
                                AttentionLayer(c.d_model, c.heads, rng),
                                ResidualBlock(c.d_model, rng)))
        self.ln_f = LayerNorm(c.d_model)

        w = c.head_width
        if c.head_kind == "energy":
            self.noise_e1 = LinearLayer(c.noise_dim, w, rng)
            self.noise_e2 = LinearLayer(w, w, rng)
            if c.adaln_mode == "adaln":
                self.proj_in = LinearLayer(c.d_model, w, rng)
                self.head_blocks = [AdaLnBlock(w, w, rng) for _ in range(c.head_depth)]
            else:
                self.proj_in = LinearLayer(c.d_model + w, w, rng)
                self.head_blocks = [ResidualBlock(w, rng) for _ in range(c.head_depth)]
        elif c.head_kind == "l2":
            self.proj_in = LinearLayer(c.d_model, w, rng)
            self.head_blocks = [ResidualBlock(w, rng) for _ in range(c.head_depth)]
        else:  # ddpm
            self.time_e1 = LinearLayer(c.noise_dim, w, rng)
            self.time_e2 = LinearLayer(w, w, rng)
            self.proj_in = LinearLayer(c.d_model + c.d_action, w, rng)
            self.head_blocks = [AdaLnBlock(w, w, rng) for _ in range(c.head_depth)]
            self.betas = np.linspace(1e-4, 0.02, c.ddpm_steps)
            alphas = 1.0 - self.betas
            self.alpha_bar = np.cumprod(alphas)
        self.proj_out = LinearLayer(w, c.d_action, rng)

        self.counters = {"backbone": 0, "head": 0}
        self._named = self._register_params()

    # -- parameter registry --------------------------------------------

    def _register_params(self):
        named = []

        def reg(prefix, layer):
            named.extend((f"{prefix}.{n}", p) for n, p in layer.named_params())

        reg("enc1", self.enc1)
        reg("enc2", self.enc2)
        named.append(("action_tokens", self.action_tokens))
        named.append(("position_table", self.position_table))
        for i, (ln_a, attn, ff) in enumerate(self.blocks):
            reg(f"block{i}.ln_attn", ln_a)
            reg(f"block{i}.attn", attn)
            reg(f"block{i}.ff", ff)
        reg("ln_f", self.ln_f)
        if self.config.head_kind == "energy":
            reg("head.noise_e1", self.noise_e1)
            reg("head.noise_e2", self.noise_e2)
        if self.config.head_kind == "ddpm":
            reg("head.time_e1", self.time_e1)
            reg("head.time_e2", self.time_e2)
        reg("head.proj_in", self.proj_in)
        for i, blk in enumerate(self.head_blocks):
            reg(f"head.block{i}", blk)
        reg("head.proj_out", self.proj_out)
        return named

    def named_params(self):
        return list(self._named)

    def params(self):
        return [p for _, p in self._named]

    def reset_counters(self):
        self.counters = {"backbone": 0, "head": 0}

    # -- forward passes -------------------------------------------------

    def _encode_obs(self, window: Tensor) -> Tensor:
        b, oh, do = window.shape
        flat = reshape(window, (b * oh, do))
        h = self.enc2(silu(self.enc1(flat)))
        return reshape(h, (b, oh, self.config.d_model))

    def backbone_forward(self, window: np.ndarray) -> Tensor:
        """Observation window(s) -> per-action-token vectors (B, H, d_model)."""
        c = self.config
        arr = np.asarray(window, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (c.obs_horizon, c.d_obs):
            raise DimensionError(
                f"window shape {arr.shape} does not match "
                f"(obs_horizon, d_obs)=({c.obs_horizon}, {c.d_obs})")
        self.counters["backbone"] += 1
        b = arr.shape[0]
        obs_tok = self._encode_obs(Tensor(arr))
        act_tok = tile_rows(self.action_tokens, b)
        tokens = concat([obs_tok, act_tok], axis=1)
        tokens = embedding_add(tokens, self.position_table)
        for ln_a, attn, ff in self.blocks:
            tokens = add(tokens, attention_forward(ln_a(tokens), attn))
            tokens = residual_block_forward(tokens, ff)
        tokens = self.ln_f(tokens)
        return slice_axis(tokens, 1, c.obs_horizon, c.obs_horizon + c.pred_horizon)

    def draw_noise(self, rng: Rng, batch: int) -> np.ndarray:
        c = self.config
        shape = ((batch, c.noise_dim) if c.noise_sharing == "per_chunk"
                 else (batch, c.pred_horizon, c.noise_dim))
        if c.noise_dist == "u05":
            return rng.uniform(-0.5, 0.5, shape)
        if c.noise_dist == "u10":
            return rng.uniform(-1.0, 1.0, shape)
        return rng.gaussian(shape)

    def _noise_embedding(self, noise: np.ndarray) -> Tensor:
        """(B, noise_dim) -> (B, w) shared embedding, or per-token
        (B, H, noise_dim) -> (B, H, w)."""
        return self.noise_e2(silu(self.noise_e1(Tensor(noise))))

    def head_sample(self, z: Tensor, noise: np.ndarray) -> Tensor:
        """One head evaluation: backbone vectors + noise -> action chunk."""
        c = self.config
        if c.head_kind != "energy":
            raise ContractError(f"head_sample requires the energy head, not {c.head_kind}")
        expected = ((c.noise_dim,) if c.noise_sharing == "per_chunk"
                    else (c.pred_horizon, c.noise_dim))
        if np.asarray(noise).shape[-len(expected):] != expected:
            raise DimensionError(
                f"noise shape {np.asarray(noise).shape} does not end with {expected}")
        self.counters["head"] += 1
        b, h, _ = z.shape
        e = self._noise_embedding(noise)
        if c.adaln_mode == "adaln":
            x = self.proj_in(z)
            for blk in self.head_blocks:
                x = adaln_forward(x, e, blk)
        else:
            if e.ndim == 2:
                w = e.shape[-1]
                e = repeat_axis(reshape(e, (b, 1, w)), h, 1)
            x = self.proj_in(concat([z, e], axis=-1))
            for blk in self.head_blocks:
                x = residual_block_forward(x, blk)
        return self.proj_out(x)

    def l2_head(self, z: Tensor) -> Tensor:
        if self.config.head_kind != "l2":
            raise ContractError(f"l2 head not available on a {self.config.head_kind} model")
        self.counters["head"] += 1
        x = self.proj_in(z)
        for blk in self.head_blocks:
            x = residual_block_forward(x, blk)
        return self.proj_out(x)

    # -- ddpm baseline ----------------------------------------------------

    def _time_embedding(self, t_idx: np.ndarray) -> Tensor:
        c = self.config
        half = c.noise_dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
        ang = t_idx[:, None].astype(np.float64) * freqs[None, :]
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        if emb.shape[1] < c.noise_dim:
            emb = np.pad(emb, ((0, 0), (0, c.noise_dim - emb.shape[1])))
        return self.time_e2(silu(self.time_e1(Tensor(emb))))

    def ddpm_eps(self, z: Tensor, noisy: np.ndarray, t_idx: np.ndarray) -> Tensor:
        if self.config.head_kind != "ddpm":
            raise ContractError(f"ddpm head not available on a {self.config.head_kind} model")
        self.counters["head"] += 1
        x = self.proj_in(concat([z, Tensor(noisy)], axis=-1))
        e = self._time_embedding(t_idx)
        for blk in self.head_blocks:
            x = adaln_forward(x, e, blk)
        return self.proj_out(x)

    def ddpm_loss(self, z: Tensor, target: np.ndarray, rng: Rng) -> Tensor:
        c = self.config
        b = z.shape[0]
        t_idx = rng.integers(0, c.ddpm_steps, (b,))
        eps = rng.gaussian(target.shape)
        ab = self.alpha_bar[t_idx][:, None, None]
        noisy = np.sqrt(ab) * target + np.sqrt(1.0 - ab) * eps
        pred = self.ddpm_eps(z, noisy, t_idx)
        return tmean(power(sub(pred, Tensor(eps)), 2.0))

    def ddpm_sample(self, z: Tensor, rng: Rng) -> Tensor:
        c = self.config
        b, h, _ = z.shape
        x = rng.gaussian((b, h, c.d_action))
        for t in range(c.ddpm_steps - 1, -1, -1):
            pred = self.ddpm_eps(z, x, np.full(b, t)).data
            a_t = 1.0 - self.betas[t]
            ab_t = self.alpha_bar[t]
            mean = (x - self.betas[t] / np.sqrt(1.0 - ab_t) * pred) / np.sqrt(a_t)
            if t > 0:
                ab_prev = self.alpha_bar[t - 1]
                var = self.betas[t] * (1.0 - ab_prev) / (1.0 - ab_t)
                x = mean + np.sqrt(var) * rng.gaussian(x.shape)
            else:
                x = mean
        return Tensor(x)

    # -- public operations ------------------------------------------------

    def forward_train(self, window: np.ndarray, rng: Rng):
        """One backbone pass, two noise draws, two head samples sharing z."""
        if self.config.head_kind != "energy":
            raise ContractError(
                f"forward_train requires the energy head, not {self.config.head_kind}")
        z = self.backbone_forward(window)
        b = z.shape[0]
        n1 = self.draw_noise(rng, b)
        n2 = self.draw_noise(rng, b)
        return self.head_sample(z, n1), self.head_sample(z, n2)

    def predict_chunk(self, window: np.ndarray, rng: Rng) -> np.ndarray:
        """Single-pass chunk prediction (normalized action space).

        energy: one backbone + one head evaluation; l2: deterministic head;
        ddpm: ``ddpm_steps`` head evaluations.
        """
        arr = np.asarray(window, dtype=np.float64)
        single = arr.ndim == 2
        z = self.backbone_forward(arr[None] if single else arr)
        b = z.shape[0]
        if self.config.head_kind == "energy":
            chunk = self.head_sample(z, self.draw_noise(rng, b))
        elif self.config.head_kind == "l2":
            chunk = self.l2_head(z)
        else:
            chunk = self.ddpm_sample(z, rng)
        out = chunk.data
        return out[0] if single else out

    def l2_head_loss(self, window: np.ndarray, target: np.ndarray) -> Tensor:
        """MSE of the deterministic head against a target chunk."""
        if self.config.head_kind != "l2":
            raise ContractError(
                f"l2_head_loss requires the l2 head, not {self.config.head_kind}")
        arr = np.asarray(target, dtype=np.float64)
        pred = self.l2_head(self.backbone_forward(window))
        if pred.shape[-2:] != arr.shape[-2:]:
            raise DimensionError(f"target shape {arr.shape} vs prediction {pred.shape}")
        if arr.ndim == 2:
            arr = arr[None]
        return tmean(power(sub(pred, Tensor(arr)), 2.0))

    def training_loss(self, windows: np.ndarray, chunks: np.ndarray, rng: Rng) -> Tensor:
        """Head-appropriate loss for one mini-batch of supervision pairs."""
        kind = self.config.head_kind
        if kind == "energy":
            c1, c2 = self.forward_train(windows, rng)
            return chunk_energy_loss(c1, c2, Tensor(chunks), self.energy_cfg)
        if kind == "l2":
            return self.l2_head_loss(windows, chunks)
        return self.ddpm_loss(self.backbone_forward(windows), chunks, rng)


def backbone_forward(model: EnergyPolicyModel, window: np.ndarray) -> Tensor:
    return model.backbone_forward(window)


def head_sample(model: EnergyPolicyModel, z: Tensor, noise: np.ndarray) -> Tensor:
    return model.head_sample(z, noise)


def forward_train(model: EnergyPolicyModel, window: np.ndarray, rng: Rng):
    return model.forward_train(window, rng)


def predict_chunk(model: EnergyPolicyModel, window: np.ndarray, rng: Rng) -> np.ndarray:
    return model.predict_chunk(window, rng)


def l2_head_loss(model: EnergyPolicyModel, window: np.ndarray, target: np.ndarray) -> Tensor:
    return model.l2_head_loss(window, target)


def count_params(obj) -> int:
    """Total scalar parameter count of a model or layer."""
    return sum(p.size for _, p in obj.named_params())


__all__ = [
    "ADALN_MODES", "HEAD_KINDS", "NOISE_DISTS", "NOISE_SHARING",
    "EnergyPolicyModel", "PolicyConfig", "backbone_forward", "count_params",
    "forward_train", "head_sample", "l2_head_loss", "predict_chunk",
]
