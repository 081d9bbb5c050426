"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy float64 array.  While a ``GradientTape`` is
active (as a context manager), every differentiable operation records its
backward rule on the tape; ``backward(tape, loss)`` then replays the tape
in exact reverse order and accumulates gradients for the leaf tensors.

Supported broadcasting is deliberately limited: operands must have equal
shapes, or one operand must be a scalar, or the smaller operand's shape
must equal the trailing shape of the larger one (covers bias vectors and
shared embedding tables).  Anything else raises ``DimensionError``.
"""

from __future__ import annotations

import numpy as np


class TensorError(Exception):
    """Base class for tensor-library errors."""


class DimensionError(TensorError):
    """Shapes incompatible with the requested operation."""


class ParameterError(TensorError):
    """Operation parameter outside its documented domain."""


class ContractError(TensorError):
    """API contract violated (non-scalar loss, consumed tape, ...)."""


_active_tape: "GradientTape | None" = None
_finite_checks: bool = False


def enable_finite_checks(on: bool = True) -> None:
    """Globally enable/disable NaN/Inf assertions on every op output."""
    global _finite_checks
    _finite_checks = on


class Tensor:
    """Dense multi-dimensional array of 64-bit reals (row-major)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; python scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Records operations for one backward pass.

    Nodes are stored in recording (topological) order; ``backward``
    traverses them in exact reverse.  A tape is single-use and
    single-threaded.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)
        self._consumed = False
        self.leaf_grads = {}

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a GradientTape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False


def _make(data, inputs=(), backward=None) -> Tensor:
    out = Tensor(data)
    if _finite_checks and not np.all(np.isfinite(out.data)):
        raise TensorError("non-finite value produced by a forward operation")
    if _active_tape is not None and backward is not None:
        _active_tape._nodes.append((out, inputs, backward))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Run reverse-mode accumulation; returns {leaf Tensor: gradient array}.

    The tape is consumed: a second call raises ``ContractError``.
    """
    if tape._consumed:
        raise ContractError("tape already consumed by a previous backward call")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    produced = {id(out) for out, _, _ in tape._nodes}
    for out, inputs, bw in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, bw(g)):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t

    leaf_grads = {}
    for key, g in grads.items():
        if key not in produced:
            t = holders[key]
            assert g.shape == t.data.shape
            leaf_grads[t] = g
    tape.leaf_grads = leaf_grads
    return leaf_grads


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small and small != big


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g.reshape(shape)


def _elementwise(a: Tensor, b: Tensor, fwd, bwd_a, bwd_b, name: str) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    data = fwd(a.data, b.data)

    def bw(g):
        return (_reduce_to(bwd_a(g), a.shape), _reduce_to(bwd_b(g), b.shape))

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise operations

def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _elementwise(a, b, np.multiply, lambda g: g * bd, lambda g: g * ad, "mul")


def power(t: Tensor, p: float) -> Tensor:
    """Elementwise ``t ** p`` for a fixed real exponent."""
    p = float(p)
    data = t.data ** p

    def bw(g):
        return (g * p * t.data ** (p - 1.0),)

    return _make(data, (t,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x still yields the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(t: Tensor) -> Tensor:
    """SiLU activation x * sigmoid(x)."""
    s = _sigmoid(t.data)
    data = t.data * s

    def bw(g):
        return (g * (s * (1.0 + t.data * (1.0 - s))),)

    return _make(data, (t,), bw)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a same-rank gradient over the axes where ``shape`` has extent 1."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _modulation_ok(full: tuple, small: tuple) -> bool:
    return len(full) == len(small) and all(
        s == f or s == 1 for f, s in zip(full, small))


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Fused ``x * (1 + scale) + shift``.

    ``scale`` and ``shift`` must have x's rank, with size-1 axes broadcast
    across x (e.g. one modulation row shared by every row of x).
    """
    for name, t in (("scale", scale), ("shift", shift)):
        if not _modulation_ok(x.shape, t.shape):
            raise DimensionError(f"modulate: {name} shape {t.shape} vs input {x.shape}")
    data = x.data * (1.0 + scale.data) + shift.data

    def bw(g):
        return (g * (1.0 + scale.data),
                _sum_to(g * x.data, scale.shape),
                _sum_to(g, shift.shape))

    return _make(data, (x, scale, shift), bw)


def gated_add(x: Tensor, gate: Tensor, y: Tensor) -> Tensor:
    """Fused residual ``x + gate * y`` with size-1 broadcast on the gate."""
    if x.shape != y.shape:
        raise DimensionError(f"gated_add: shapes {x.shape} vs {y.shape}")
    if not _modulation_ok(x.shape, gate.shape):
        raise DimensionError(f"gated_add: gate shape {gate.shape} vs input {x.shape}")
    data = x.data + gate.data * y.data

    def bw(g):
        return (g, _sum_to(g * y.data, gate.shape), g * gate.data)

    return _make(data, (x, gate, y), bw)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  2-D x 2-D, plus stacked variants where either
    operand carries equal leading batch axes or one operand is a plain
    2-D matrix shared across the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        # fold leading axes into one large GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ b.data.T).reshape(a.shape), a2.T @ g2)

        return _make(data, (a, b), bw)

    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        while ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return (ga, gb)

    return _make(data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused affine map ``x @ weight.T + bias`` for weight (out, in)."""
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise DimensionError(
            f"linear expects last extent {in_dim}, got input shape {x.shape}")
    x2 = x.data.reshape(-1, in_dim)
    data = x2 @ weight.data.T
    data += bias.data
    data = data.reshape(x.shape[:-1] + (out_dim,))

    def bw(g):
        g2 = g.reshape(-1, out_dim)
        return ((g2 @ weight.data).reshape(x.shape), g2.T @ x2, g2.sum(axis=0))

    return _make(data, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# reductions

def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    """Sum or mean over one axis (or all elements when axis is None)."""
    if op not in ("sum", "mean"):
        raise ParameterError(f"unknown reduction '{op}'")
    if axis is not None:
        if not -t.ndim <= axis < t.ndim:
            raise DimensionError(f"axis {axis} invalid for rank {t.ndim}")
        axis = axis % t.ndim
        n = t.shape[axis]
    else:
        n = t.size
    data = t.data.sum(axis=axis) if op == "sum" else t.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            gi = np.broadcast_to(g, t.shape).copy()
        else:
            gi = np.broadcast_to(np.expand_dims(g, axis), t.shape).copy()
        if op == "mean":
            gi = gi / n
        return (gi,)

    return _make(data, (t,), bw)


def tsum(t: Tensor, axis: int | None = None) -> Tensor:
    return reduce("sum", t, axis)


def tmean(t: Tensor, axis: int | None = None) -> Tensor:
    return reduce("mean", t, axis)


# ---------------------------------------------------------------------------
# norms

def norm_alpha(t: Tensor, alpha: float, eps: float = 1e-8) -> Tensor:
    """Stabilized Euclidean norm of the last axis, raised to ``alpha``:
    ``(sum(v^2) + eps) ** (alpha/2)``.

    Smooth everywhere when eps > 0, which keeps gradients finite at the
    origin for alpha <= 1.  Rows of higher-rank inputs are scored
    independently; a 1-D input yields a scalar.
    """
    if not 0.0 < alpha <= 2.0:
        raise ParameterError(f"alpha must lie in (0, 2], got {alpha}")
    if eps < 0.0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    s = (t.data * t.data).sum(axis=-1) + eps
    data = s ** (alpha / 2.0)

    def bw(g):
        coef = g * alpha * s ** (alpha / 2.0 - 1.0)
        return (coef[..., None] * t.data,)

    return _make(data, (t,), bw)


# ---------------------------------------------------------------------------
# normalization / attention primitives

def layernorm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    if eps <= 0.0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    d = t.shape[-1] if t.ndim else 0
    if d < 2:
        raise DimensionError(f"layernorm needs last extent >= 2, got shape {t.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (t,), bw)


def layernorm_affine(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused LayerNorm with learnable per-feature gain and bias."""
    if eps <= 0.0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    d = t.shape[-1] if t.ndim else 0
    if d < 2:
        raise DimensionError(f"layernorm needs last extent >= 2, got shape {t.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        gm = gx.mean(axis=-1, keepdims=True)
        gxx = (gx * xhat).mean(axis=-1, keepdims=True)
        return (inv * (gx - gm - xhat * gxx), dgain, dbias)

    return _make(data, (t, gain, bias), bw)


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (t,), bw)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(t: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} to {shape}")
    data = t.data.reshape(shape)

    def bw(g):
        return (g.reshape(t.shape),)

    return _make(data, (t,), bw)


def transpose(t: Tensor, axes: tuple) -> Tensor:
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"axes {axes} is not a permutation for rank {t.ndim}")
    inv = np.argsort(axes)
    data = t.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(data, (t,), bw)


def concat(tensors: list, axis: int) -> Tensor:
    if not tensors:
        raise ParameterError("concat of an empty list")
    nd = tensors[0].ndim
    axis = axis % nd
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), bw)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % t.ndim
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = t.data[idx]

    def bw(g):
        gi = np.zeros_like(t.data)
        gi[idx] = g
        return (gi,)

    return _make(data, (t,), bw)


def repeat_axis(t: Tensor, reps: int, axis: int) -> Tensor:
    """Repeat a size-1 axis ``reps`` times; backward sums it back."""
    axis = axis % t.ndim
    if t.shape[axis] != 1:
        raise DimensionError(f"repeat_axis needs a size-1 axis, got {t.shape} at axis {axis}")
    data = np.repeat(t.data, reps, axis=axis)

    def bw(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _make(data, (t,), bw)


# ---------------------------------------------------------------------------
# random sampling

class Rng:
    """Deterministic counter-based random generator (Philox).

    Identical seed + identical call sequence yields bit-identical draws.
    State round-trips through ``state``/``set_state`` as plain ints, so a
    generator can be frozen into a checkpoint and resumed exactly.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bit = np.random.Philox(self.seed)
        self._gen = np.random.Generator(self._bit)

    def uniform(self, lo: float, hi: float, shape=()) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape)

    def gaussian(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        s = self._bit.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in s["state"]["counter"]],
            "key": [int(v) for v in s["state"]["key"]],
            "buffer": [int(v) for v in s["buffer"]],
            "buffer_pos": int(s["buffer_pos"]),
            "has_uint32": int(s["has_uint32"]),
            "uinteger": int(s["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bit.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(0)
        rng.set_state(state)
        return rng


def sample(rng: Rng, dist: str, shape=(), lo: float = -0.5, hi: float = 0.5) -> Tensor:
    """Draw an i.i.d. sample tensor; never recorded on a tape."""
    if dist == "uniform":
        return Tensor(rng.uniform(lo, hi, shape))
    if dist == "gaussian":
        return Tensor(rng.gaussian(shape))
    raise ParameterError(f"unknown distribution '{dist}'")
