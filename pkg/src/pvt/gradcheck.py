"""Compare autodiff gradients against central finite differences."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, finite_diff_grad, zero_grads

# below this magnitude the comparison is effectively absolute (1e-4 * REL_FLOOR)
REL_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]],
                    eps: float = 1e-6) -> dict[str, float]:
    """Relative error per named parameter of ``loss_fn`` (a closure over them)."""
    params = list(params)
    zero_grads(p for _, p in params)
    backward(loss_fn())
    errors = {}
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        numeric = finite_diff_grad(lambda _x: loss_fn(), p, eps)
        errors[name] = relative_error(analytic, numeric)
    return errors
