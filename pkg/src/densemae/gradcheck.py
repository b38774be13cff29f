"""Finite-difference gradient checking (float64, central differences)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_gradient(f, inputs, which: int, eps: float = 1e-6) -> np.ndarray:
    """Central-difference d f / d inputs[which]. f maps the input Tensors to
    a scalar Tensor and must be deterministic. Perturbs in place and restores."""
    x = inputs[which]
    if x.dtype != np.float64:
        raise TypeError("numeric_gradient expects float64 inputs")
    grad = np.zeros_like(x.data)
    flat = x.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(*inputs).item()
        flat[i] = orig - eps
        fm = f(*inputs).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(f, inputs, eps: float = 1e-6) -> float:
    """Compare backward() gradients against finite differences.

    Returns the worst normalized error over all inputs that require grad:
    max |analytic - numeric| / max(max |numeric|, 1). The max(, 1) keeps the
    measure absolute when the true gradient is small instead of amplifying
    finite-difference noise.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("gradcheck inputs must be Tensors")
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("gradcheck needs a scalar objective")
    out.backward()

    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(f, inputs, i, eps=eps)
        scale = max(float(np.abs(numeric).max(initial=0.0)), 1.0)
        err = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
        worst = max(worst, err)
    return worst
