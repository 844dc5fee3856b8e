"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err_small: float
    ok: bool


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and numerical gradients of ``fn(*inputs)``.

    Non-scalar outputs are contracted with a fixed random projection so every
    output element contributes. Entries with ``|analytic| > atol`` are judged by
    relative error, the rest by absolute error.
    """
    out = fn(*inputs)
    proj = None
    if out.size != 1:
        proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar_value() -> float:
        y = fn(*inputs).data
        return float(y.reshape(-1)[0]) if proj is None else float((y * proj).sum())

    for t in inputs:
        t.grad = None
    if proj is None:
        out.backward()
    else:
        out.backward(proj.astype(out.dtype))

    worst_rel, worst_abs = 0.0, 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(scalar_value, t.data, h)
        big = np.abs(analytic) > atol
        if big.any():
            rel = np.abs(analytic[big] - numeric[big]) / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
            worst_rel = max(worst_rel, float(rel.max()))
        if (~big).any():
            worst_abs = max(worst_abs, float(np.abs(analytic[~big] - numeric[~big]).max()))
    return GradCheckReport(worst_rel, worst_abs, worst_rel <= rtol and worst_abs <= atol)
