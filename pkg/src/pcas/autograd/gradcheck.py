from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of a scalar ``loss_fn`` against central differences.

    ``loss_fn`` takes no arguments and must read ``params`` by closure.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    first = loss_fn()
    if first.size != 1:
        raise ValueError("loss_fn must return a scalar")
    with no_grad():
        again = loss_fn().item()
    if again != first.item():
        raise NonDeterministicError(f"loss_fn is not deterministic ({first.item()!r} vs {again!r})")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    first.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    numeric = []
    with no_grad():
        for p in params:
            fd = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            out = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                out[i] = (f_plus - f_minus) / (2.0 * eps)
            numeric.append(fd)

    per_param = [float(relative_error(a, n).max()) if a.size else 0.0 for a, n in zip(analytic, numeric)]
    return GradCheckReport(max(per_param, default=0.0), per_param, analytic, numeric)
