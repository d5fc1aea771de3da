"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonDeterministicError(RuntimeError):
    pass


def _scalarize(out: Tensor, proj: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return T.reshape(out, ())
    return T.sum(T.mul(out, Tensor(proj)))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               params: Sequence[Tensor] = (), max_coords: int | None = None, seed: int = 0) -> float:
    """Max over checked coordinates of |analytic - numeric| / max(1, |numeric|).

    Non-scalar outputs are reduced with a fixed random projection so that every
    output element contributes. ``max_coords`` samples at most that many
    coordinates per tensor.
    """
    leaves = list(inputs) + list(params)
    for t in leaves:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
    for t in inputs:
        t.requires_grad = True
    rng = np.random.default_rng(seed)

    first = fn(*inputs)
    proj = rng.standard_normal(first.shape) if first.size > 1 else None
    with T.no_grad():
        again = fn(*inputs)
    if not np.array_equal(first.data, again.data):
        raise NonDeterministicError("function output differs between two identical forward passes")

    for t in leaves:
        t.grad = None
    T.backward(_scalarize(first, proj), params=leaves)

    def value() -> float:
        with T.no_grad():
            return float(_scalarize(fn(*inputs), proj).data)

    worst = 0.0
    for t in leaves:
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
