"""
Finite-difference oracles for the differentiation core.

Used by the test suites and the selftest runner, never by training.
"""
from typing import Callable, Optional, Sequence

import numpy as np

from seqcomm_dfl.models.tensor import Tensor, flatten, grad, hvp
from seqcomm_dfl.utils.errors import UsageError


def _evaluate(f: Callable[[], Tensor]) -> float:
    return f().item()


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      eps_floor: float = 1e-6, max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare grad(f) against central differences.

    Args:
        f: Zero-argument callable that reads ``params`` and returns a scalar tensor
        params: Leaf tensors perturbed in place
        eps: Central-difference step
        eps_floor: Denominator floor of the relative error
        max_coords: Check only this many randomly chosen coordinates (all if None)
        rng: Generator used to choose coordinates

    Returns:
        max |analytic - numeric| / (|analytic| + |numeric| + eps_floor)
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    analytic = flatten(grad(f, params))
    coords = [(k, idx) for k, p in enumerate(params) for idx in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    offsets = np.cumsum([0] + [p.size for p in params])

    worst = 0.0
    for k, idx in coords:
        flat = params[k].data.reshape(-1)
        original = flat[idx]
        flat[idx] = original + eps
        plus = _evaluate(f)
        flat[idx] = original - eps
        minus = _evaluate(f)
        flat[idx] = original
        numeric = (plus - minus) / (2.0 * eps)
        exact = analytic[offsets[k] + idx]
        error = abs(exact - numeric) / (abs(exact) + abs(numeric) + eps_floor)
        worst = max(worst, error)
    return worst


def hvp_check(f: Callable[[], Tensor], params: Sequence[Tensor], v: Sequence[np.ndarray],
              eps: float = 1e-5, eps_floor: float = 1e-8) -> float:
    """Relative error between hvp(f, params, v) and central differences of the gradient."""
    analytic = flatten(hvp(f, params, v))
    originals = [p.data.copy() for p in params]

    def shifted_grad(sign: float) -> np.ndarray:
        for p, base, direction in zip(params, originals, v):
            p.data[...] = base + sign * eps * np.asarray(direction)
        return flatten(grad(f, params))

    try:
        numeric = (shifted_grad(1.0) - shifted_grad(-1.0)) / (2.0 * eps)
    finally:
        for p, base in zip(params, originals):
            p.data[...] = base
    return float(np.linalg.norm(analytic - numeric)
                 / (np.linalg.norm(analytic) + np.linalg.norm(numeric) + eps_floor))
