"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-4) -> np.ndarray:
    out = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm error relative to the larger gradient's max-norm.

    The scale is floored so that gradients which vanish identically (finite
    differences then return pure round-off) are compared absolutely.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-4) -> dict[str, float]:
    """Return per-parameter relative error of backward() against finite differences.

    ``fn`` must rebuild the graph from scratch on every call. Run under
    ``precision("float64")``.
    """
    for p in params.values():
        p.grad = None
    backward(fn())
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        errors[name] = relative_error(analytic, numeric_grad(fn, p, eps))
    return errors
