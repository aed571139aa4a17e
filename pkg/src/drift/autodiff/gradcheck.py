"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               n_samples: int | None = 20, rng: np.random.Generator | None = None,
               floor: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates a scalar from the current values of ``params``.
    ``n_samples`` coordinates are drawn per parameter (all when ``None``).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, float(rel_error(analytic.reshape(-1)[i], numeric, floor)))
    return worst


def grad_check_module(f: Callable[[], Tensor], module, extra: Sequence[Tensor] = (), **kwargs) -> float:
    """:func:`grad_check` over every parameter of ``module`` plus ``extra`` input tensors."""
    return grad_check(f, list(module.parameters()) + list(extra), **kwargs)
