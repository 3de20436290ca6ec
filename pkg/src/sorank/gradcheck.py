"""Finite-difference verification of analytic gradients.

Checks run the computation in 64-bit: central differences with step 1e-5
are unreliable in float32, so callers build the checked graph with float64
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    step: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel_err.values())

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def grad_check(fn, params: dict[str, Tensor], step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``fn`` must be deterministic and rebuild its graph from the current
    parameter values on every call. Relative error is
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), reported per parameter.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradCheckReport(step=step, tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            g_fd[i] = (f_plus - f_minus) / (2.0 * step)
        g_ad = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
        report.max_rel_err[name] = float(np.max(np.abs(g_ad - g_fd) / denom))
    return report
