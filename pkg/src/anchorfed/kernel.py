"""Dense float64 numeric kernel: forward/backward primitives and a
finite-difference gradient checker.

There is no autodiff graph here. Every composite loss in the package
assembles its own backward pass out of these primitives, which keeps the
gradient code auditable and checkable against central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

# Tensors are plain float64 ndarrays, row-major.
Tensor = np.ndarray


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def affine_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[i, j] = sum_d x[i, d] * w[d, j] + b[j]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"affine expects x[B,D], w[D,H], b[H]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"affine inner axes differ: x has D={x.shape[1]}, w has D={w.shape[0]}"
        )
    if w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine output axes differ: w has H={w.shape[1]}, b has H={b.shape[0]}"
        )
    return x @ w + b


def affine_backward(x: Tensor, w: Tensor, grad_out: Tensor):
    """Chain-rule gradients of affine_forward w.r.t. (x, w, b)."""
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match output ({x.shape[0]}, {w.shape[1]})"
        )
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # Subgradient at exactly 0 is taken as 0.
    return np.where(x > 0.0, grad_out, 0.0)


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax with max-subtraction for stability."""
    if z.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"log_softmax expects [B,K] with K >= 2; got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: Tensor) -> Tensor:
    return np.exp(log_softmax(z))


def grad_check(
    f: Callable[[Tensor], float],
    x: Tensor,
    analytic_grad: Tensor,
    eps: float = 1e-5,
) -> float:
    """Max relative error between `analytic_grad` and central differences of `f`.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite probe value at coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    analytic = as_tensor(analytic_grad).reshape(-1)
    if analytic.shape != numeric.shape:
        raise DimensionError(
            f"analytic grad has {analytic.size} entries, x has {numeric.size}"
        )
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
