"""Gradient evaluation and the finite-difference oracle that checks it."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NumericalError, Tape, Tensor


def forward_backward(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate scalar ``f(params)`` and its gradient w.r.t. every entry of ``params``.

    Constants that should not be differentiated belong in ``f``'s closure.
    """
    leaves = {name: Tensor(value, requires_grad=True) for name, value in params.items()}
    with Tape() as tape:
        out = f(leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("forward_backward needs a scalar Tensor output")
    value = float(out.data.reshape(()))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite value {value} in forward pass")
    grads = tape.gradient(out, leaves)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
    return value, grads


def finite_diff_grad(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradient, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    base_a, base_b = float(f(work)), float(f(work))
    if base_a != base_b:
        raise ValueError("f is not deterministic: two baseline evaluations differ")
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(work))
            flat[i] = orig - eps
            lo = float(f(work))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def finite_diff_sample(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    coords: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central differences at selected flat indices only; ``coords[name]`` lists them."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    if float(f(work)) != float(f(work)):
        raise ValueError("f is not deterministic: two baseline evaluations differ")
    out = {}
    for name, idx in coords.items():
        flat = work[name].reshape(-1)
        vals = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(work))
            flat[i] = orig - eps
            lo = float(f(work))
            flat[i] = orig
            vals[j] = (hi - lo) / (2.0 * eps)
        out[name] = vals
    return out


def directional_derivative(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    direction: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> float:
    """``(f(p + eps*d) - f(p - eps*d)) / (2*eps)``, moving every coordinate at once."""
    plus = {k: np.asarray(v, dtype=np.float64) + eps * direction.get(k, 0.0) for k, v in params.items()}
    minus = {k: np.asarray(v, dtype=np.float64) - eps * direction.get(k, 0.0) for k, v in params.items()}
    return (float(f(plus)) - float(f(minus))) / (2.0 * eps)


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Norm-wise relative error between two gradient dictionaries."""
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(a)])
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), 1e-300)
    return float(np.linalg.norm(va - vb) / denom)
