"""Learnable parameters, seeded initializers, and the AdamW update."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A named leaf tensor that always requires grad and carries Adam moments."""

    __slots__ = ("name", "exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int | None = None) -> np.ndarray:
    """He-uniform init for ReLU nets: U(-b, b) with b = sqrt(6 / fan_in)."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def conv_params(rng: np.random.Generator, name: str, out_c: int, in_c: int, k: int,
                bias: bool = True) -> dict:
    params = {f"{name}.weight": Parameter(kaiming_uniform(rng, (out_c, in_c, k, k)), f"{name}.weight")}
    if bias:
        params[f"{name}.bias"] = Parameter(np.zeros(out_c), f"{name}.bias")
    return params


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update with decoupled weight decay and bias correction.

    Gradients are left in place so callers can inspect them afterwards.
    """
    params = list(params)
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    for p in params:
        g = p.grad.astype(np.float64)
        value = p.data.astype(np.float64)
        value -= lr * weight_decay * value
        p.step += 1
        m = beta1 * p.exp_avg.astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * p.exp_avg_sq.astype(np.float64) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** p.step)
        v_hat = v / (1.0 - beta2 ** p.step)
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.exp_avg = m.astype(p.dtype)
        p.exp_avg_sq = v.astype(p.dtype)
        p.data = value.astype(p.dtype)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
