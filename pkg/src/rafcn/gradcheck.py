"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_all


def _scalarize(out: Tensor, probe: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out
    return sum_all(mul(out, Tensor(probe)))


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the input tensor(s) to a tensor. Non-scalar outputs are reduced
    with a fixed random projection so every output coordinate contributes.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    base = [t.data.copy() for t in inputs]

    def evaluate(arrays, track):
        ts = [Tensor(a, requires_grad=track) for a in arrays]
        return ts, f(*ts)

    ts, out = evaluate(base, True)
    probe = None
    if out.data.size != 1:
        probe = np.random.default_rng(seed).standard_normal(out.shape)
    _scalarize(out, probe).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = _scalarize(evaluate(base, False)[1], probe).item()
            flat[idx] = orig - eps
            down = _scalarize(evaluate(base, False)[1], probe).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
