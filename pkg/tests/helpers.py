"""Shared test oracles: central finite differences and gradient comparison."""

import numpy as np

from energy_policy.autodiff import GradientTape, backward


def finite_difference(f, arr: np.ndarray, h: float = 1e-5,
                      indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` in place.

    ``indices`` restricts the check to a subset of flat coordinates (for
    large parameter tensors); unchecked entries are returned as NaN.
    """
    flat = arr.ravel()
    grad = np.full(flat.shape, np.nan)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(arr.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max relative error, with an absolute floor so near-zero gradients
    are compared at ~1e-4 * floor absolute accuracy."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def grad_of(build_loss, leaves):
    """Run one taped forward/backward; returns (loss value, {leaf: grad})."""
    with GradientTape() as tape:
        loss = build_loss()
    value = loss.item()
    grads = backward(tape, loss)
    return value, {leaf: grads.get(leaf) for leaf in leaves}


def check_gradients(build_loss, leaves, h: float = 1e-5, floor: float = 1e-3,
                    max_coords: int = 40, seed: int = 0) -> float:
    """Compare taped gradients of every leaf against central differences on
    a random coordinate subset; returns the worst relative error."""
    _, grads = grad_of(build_loss, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = grads[leaf]
        assert analytic is not None, "no gradient reached a leaf"
        assert analytic.shape == leaf.data.shape
        size = leaf.data.size
        idx = (range(size) if size <= max_coords
               else rng.choice(size, size=max_coords, replace=False))
        numeric = finite_difference(lambda: build_loss().item(), leaf.data,
                                    h=h, indices=idx)
        worst = max(worst, rel_err(analytic, numeric, floor))
    return worst
