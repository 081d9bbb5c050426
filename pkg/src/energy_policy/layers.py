"""Neural building blocks: linear, LayerNorm, SiLU residual blocks,
adaLN-Zero modulation, multi-head attention, and embedding tables.

All layers hold their parameters as leaf ``Tensor`` objects and expose
``named_params()`` so models can register them under stable names.
Forward passes accept a trailing feature axis with any number of leading
batch axes.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    DimensionError,
    Rng,
    Tensor,
    add,
    concat,
    gated_add,
    layernorm_affine,
    linear,
    matmul,
    modulate,
    mul,
    repeat_axis,
    reshape,
    silu,
    slice_axis,
    softmax,
    transpose,
)


class LinearLayer:
    """Affine map ``x @ W.T + b`` with weight shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            w = np.zeros((out_dim, in_dim))
        else:
            bound = 1.0 / np.sqrt(in_dim)
            w = rng.uniform(-bound, bound, (out_dim, in_dim))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    """LayerNorm over the last axis with learnable gain/bias."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Tensor(np.ones(dim))
        self.bias = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm_forward(x, self.gain, self.bias, self.eps)

    def named_params(self):
        return [("gain", self.gain), ("bias", self.bias)]


def layernorm_forward(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    return layernorm_affine(x, gain, bias, eps)


class ResidualBlock:
    """LN -> linear -> SiLU -> linear -> residual add, at a fixed width."""

    def __init__(self, width: int, rng: Rng):
        self.width = width
        self.ln = LayerNorm(width)
        self.fc1 = LinearLayer(width, width, rng)
        self.fc2 = LinearLayer(width, width, rng)

    def branch(self, h: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(h)))

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block_forward(x, self)

    def named_params(self):
        out = []
        for prefix, layer in (("ln", self.ln), ("fc1", self.fc1), ("fc2", self.fc2)):
            out += [(f"{prefix}.{n}", p) for n, p in layer.named_params()]
        return out


def residual_block_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    if x.shape[-1] != block.width:
        raise DimensionError(
            f"residual block width {block.width} does not match input {x.shape}")
    return add(x, block.branch(block.ln(x)))


class AdaLnBlock:
    """Residual block whose LN output is modulated by a conditioning vector.

    The conditioning MLP emits (shift, scale, gate); its output projection
    is initialized to exactly zero, so a fresh block is the identity for
    every conditioning input (adaLN-Zero).
    """

    def __init__(self, width: int, cond_dim: int, rng: Rng):
        self.width = width
        self.inner = ResidualBlock(width, rng)
        self.cond1 = LinearLayer(cond_dim, width, rng)
        self.cond2 = LinearLayer(width, 3 * width, rng, zero_init=True)

    def modulation(self, cond: Tensor):
        h = self.cond2(silu(self.cond1(cond)))
        w = self.width
        shift = slice_axis(h, -1, 0, w)
        scale = slice_axis(h, -1, w, 2 * w)
        gate = slice_axis(h, -1, 2 * w, 3 * w)
        return shift, scale, gate

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        return adaln_forward(x, cond, self)

    def named_params(self):
        out = [(f"inner.{n}", p) for n, p in self.inner.named_params()]
        out += [(f"cond1.{n}", p) for n, p in self.cond1.named_params()]
        out += [(f"cond2.{n}", p) for n, p in self.cond2.named_params()]
        return out


def adaln_forward(x: Tensor, noise_embed: Tensor, block: AdaLnBlock) -> Tensor:
    """x + gate * branch((1 + scale) * LN(x) + shift), conditioning on
    ``noise_embed``.

    The conditioning either matches the input's leading shape (per-row
    modulation) or omits the row axis, in which case one modulation is
    shared across all rows of x.
    """
    if x.shape[-1] != block.width:
        raise DimensionError(
            f"adaLN block width {block.width} does not match input {x.shape}")
    shared = noise_embed.ndim == x.ndim - 1 and x.ndim >= 2
    if shared:
        if noise_embed.shape[:-1] != x.shape[:-2]:
            raise DimensionError(
                f"conditioning shape {noise_embed.shape} does not align with "
                f"input {x.shape}")
    elif noise_embed.shape[:-1] != x.shape[:-1]:
        raise DimensionError(
            f"conditioning shape {noise_embed.shape} does not align with input {x.shape}")
    shift, scale, gate = block.modulation(noise_embed)
    if shared:
        # size-1 row axis; modulate/gated_add broadcast it over x's rows
        def lift(t):
            return reshape(t, t.shape[:-1] + (1, t.shape[-1]))

        shift, scale, gate = lift(shift), lift(scale), lift(gate)
    h = modulate(block.inner.ln(x), scale, shift)
    return gated_add(x, gate, block.inner.branch(h))


class AttentionLayer:
    """Standard multi-head scaled dot-product attention, no mask."""

    def __init__(self, d_model: int, heads: int, rng: Rng):
        if d_model % heads != 0:
            raise DimensionError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.wq = LinearLayer(d_model, d_model, rng)
        self.wk = LinearLayer(d_model, d_model, rng)
        self.wv = LinearLayer(d_model, d_model, rng)
        self.wo = LinearLayer(d_model, d_model, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        return attention_forward(tokens, self)

    def named_params(self):
        out = []
        for prefix, layer in (("wq", self.wq), ("wk", self.wk),
                              ("wv", self.wv), ("wo", self.wo)):
            out += [(f"{prefix}.{n}", p) for n, p in layer.named_params()]
        return out


def attention_forward(tokens: Tensor, layer: AttentionLayer) -> Tensor:
    """Full bidirectional attention over all tokens.

    Accepts (n, d) or (B, n, d); softmax rows sum to 1 by construction.
    """
    squeeze = tokens.ndim == 2
    x = reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    b, n, d = x.shape
    h, hd = layer.heads, layer.head_dim

    def split(t):
        return transpose(reshape(t, (b, n, h, hd)), (0, 2, 1, 3))

    q = split(layer.wq(x))
    k = split(layer.wk(x))
    v = split(layer.wv(x))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(1.0 / np.sqrt(hd)))
    probs = softmax(scores)
    ctx = matmul(probs, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = layer.wo(ctx)
    return reshape(out, (n, d)) if squeeze else out


def embedding_add(tokens: Tensor, position_table: Tensor) -> Tensor:
    """Add a trainable position table row-for-row onto a token stack."""
    if tokens.shape[-position_table.ndim:] != position_table.shape:
        raise DimensionError(
            f"position table {position_table.shape} does not match tokens {tokens.shape}")
    return add(tokens, position_table)


def tile_rows(table: Tensor, batch: int) -> Tensor:
    """Tile an (n, d) table to (batch, n, d); gradients sum over the batch."""
    return repeat_axis(reshape(table, (1,) + table.shape), batch, 0)


def silu_mlp(x: Tensor, fc1: LinearLayer, fc2: LinearLayer) -> Tensor:
    return fc2(silu(fc1(x)))


__all__ = [
    "AdaLnBlock", "AttentionLayer", "LayerNorm", "LinearLayer", "ResidualBlock",
    "adaln_forward", "attention_forward", "embedding_add", "layernorm_forward",
    "residual_block_forward", "silu_mlp", "tile_rows", "concat",
]
