"""Energy score objective and oracle statistics.

The differentiable training loss for one observed action a and two
independent model samples a1, a2 is

    ||a1 - a||^alpha + ||a2 - a||^alpha - ||a1 - a2||^alpha

which is an unbiased estimate (up to the eps stabilizer) of the energy
score of the model's action distribution.  Exact enumeration and
U-statistic estimators over plain numpy arrays are provided as
independent oracles for the propriety and degeneracy checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError, DimensionError, ParameterError, Tensor, norm_alpha, reduce, reshape,
)


@dataclass
class EnergyConfig:
    """Objective hyperparameters.

    alpha in (0, 2) is required for strict propriety; alpha = 2 is accepted
    only so the degeneracy can be demonstrated.  When ``flatten_chunk`` is
    set, a whole H x d chunk is scored as one vector instead of row by row.
    """

    alpha: float = 1.0
    eps: float = 1e-8
    reduction: str = "mean"
    flatten_chunk: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise ParameterError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.eps < 0.0:
            raise ParameterError(f"eps must be >= 0, got {self.eps}")
        if self.reduction not in ("mean", "sum"):
            raise ParameterError(f"reduction must be mean or sum, got {self.reduction!r}")


@dataclass
class DiscreteDistribution:
    """Finitely supported distribution used by the enumeration oracles."""

    atoms: np.ndarray   # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.atoms.shape[0],):
            raise ContractError(
                f"{self.weights.shape[0] if self.weights.ndim else 0} weights for "
                f"{self.atoms.shape[0]} atoms")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError(f"weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.weights < 0):
            raise ContractError("negative weight")
        n = self.atoms.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                if np.array_equal(self.atoms[i], self.atoms[j]):
                    raise ContractError(f"duplicate atoms at indices {i} and {j}")


def energy_loss_pair(a1: Tensor, a2: Tensor, target: Tensor, cfg: EnergyConfig) -> Tensor:
    """Two-sample energy loss for one action (or a stack of actions).

    Inputs of shape (..., d) are scored along the last axis; the result
    has the leading shape.  Differentiable w.r.t. a1 and a2.
    """
    if not (a1.shape == a2.shape == target.shape):
        raise DimensionError(
            f"sample/target shapes differ: {a1.shape}, {a2.shape}, {target.shape}")
    t1 = norm_alpha(a1 - target, cfg.alpha, cfg.eps)
    t2 = norm_alpha(a2 - target, cfg.alpha, cfg.eps)
    t12 = norm_alpha(a1 - a2, cfg.alpha, cfg.eps)
    return t1 + t2 - t12


def chunk_energy_loss(c1: Tensor, c2: Tensor, target: Tensor, cfg: EnergyConfig) -> Tensor:
    """Energy loss of predicted chunks against a target chunk.

    Chunks are (..., H, d); each timestep row is scored separately and the
    per-row losses are reduced (mean by default) over every leading axis.
    With ``cfg.flatten_chunk`` the H x d block is scored as a single
    vector instead.
    """
    if not (c1.shape == c2.shape == target.shape):
        raise DimensionError(
            f"chunk shapes differ: {c1.shape}, {c2.shape}, {target.shape}")
    if cfg.flatten_chunk:
        n = c1.shape[-2] * c1.shape[-1]
        flat = c1.shape[:-2] + (n,)
        c1, c2, target = (reshape(t, flat) for t in (c1, c2, target))
    per_row = energy_loss_pair(c1, c2, target, cfg)
    return reduce(cfg.reduction, per_row)


def _pairwise_pow(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    # ||xi - yj||^2 = ||xi||^2 + ||yj||^2 - 2 xi.yj; clip tiny negative
    # round-off so sqrt stays real
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * (x @ y.T)
    np.maximum(sq, 0.0, out=sq)
    if alpha == 2.0:
        return sq
    dist = np.sqrt(sq)
    if alpha == 1.0:
        return dist
    return dist ** alpha


def energy_score_empirical(samples: np.ndarray, y: np.ndarray, alpha: float) -> float:
    """Plug-in score of an empirical sample against one observation:
    -(1/(n(n-1))) sum_{i != j} ||x_i - x_j||^a + (2/n) sum_i ||x_i - y||^a.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = samples.shape[0]
    if n < 2:
        raise ParameterError(f"need >= 2 samples for the pairwise term, got {n}")
    pair = _pairwise_pow(samples, samples, alpha)
    data = _pairwise_pow(samples, y[None, :], alpha)[:, 0]
    return float(-pair.sum() / (n * (n - 1)) + 2.0 * data.mean())


def closed_form_discrete_score(p: DiscreteDistribution, y: np.ndarray, alpha: float) -> float:
    """Exact energy score of a finitely supported distribution, by
    enumerating all atom pairs."""
    n = p.atoms.shape[0]
    if n * n > 10_000:
        raise ParameterError(f"{n} atoms: {n * n} pairs exceeds the enumeration bound")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    pair = _pairwise_pow(p.atoms, p.atoms, alpha)
    data = _pairwise_pow(p.atoms, y[None, :], alpha)[:, 0]
    return float(-p.weights @ pair @ p.weights + 2.0 * p.weights @ data)


def expected_discrete_score(p: DiscreteDistribution, q: DiscreteDistribution,
                            alpha: float) -> float:
    """Expected score E_{y~q}[S(p, y)] by full enumeration (p and q must
    share their atom set)."""
    if p.atoms.shape != q.atoms.shape or not np.array_equal(p.atoms, q.atoms):
        raise ContractError("expected score enumeration requires a shared atom set")
    pair = _pairwise_pow(p.atoms, p.atoms, alpha)
    return float(-p.weights @ pair @ p.weights + 2.0 * p.weights @ pair @ q.weights)


def energy_distance(p_samples: np.ndarray, q_samples: np.ndarray, alpha: float) -> float:
    """Two-sample energy distance
    2 E||X-Y||^a - E||X-X'||^a - E||Y-Y'||^a.

    All three terms are plug-in means over every ordered pair (the
    within-sample diagonals contribute zero), so identical sample
    multisets score exactly 0 and the statistic is symmetric.  Positive
    in expectation for alpha in (0, 2) whenever the distributions differ;
    at alpha = 2 it collapses to 2 * ||mean(x) - mean(y)||^2.
    """
    x = np.atleast_2d(np.asarray(p_samples, dtype=np.float64))
    y = np.atleast_2d(np.asarray(q_samples, dtype=np.float64))
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ParameterError(f"need >= 2 samples per side, got {n} and {m}")
    cross = _pairwise_pow(x, y, alpha).mean()
    xx = _pairwise_pow(x, x, alpha).mean()
    yy = _pairwise_pow(y, y, alpha).mean()
    return float(2.0 * cross - xx - yy)


__all__ = [
    "DiscreteDistribution", "EnergyConfig", "chunk_energy_loss",
    "closed_form_discrete_score", "energy_distance", "energy_loss_pair",
    "energy_score_empirical", "expected_discrete_score",
]
