"""Central finite-difference checks for taped ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _readout(out: Tensor, weights: np.ndarray | None):
    from . import ops
    if out.size == 1:
        return out if out.shape == () else ops.sum(out)
    return ops.sum(ops.multiply(out, weights))


def numerical_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                        step: float = 1e-3, weights: np.ndarray | None = None,
                        wrt: Sequence[int] | None = None) -> list:
    """d(readout)/d(input) by central differences, evaluated in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt

    def evaluate() -> float:
        out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
        return float(_readout(out, weights).data)

    grads = []
    for i in wrt:
        target = arrays[i]
        g = np.zeros_like(target)
        flat, gflat = target.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate()
            flat[j] = orig - step
            down = evaluate()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                       weights: np.ndarray | None = None,
                       wrt: Sequence[int] | None = None) -> list:
    wrt = list(range(len(arrays)) if wrt is None else wrt)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in wrt))
               for i, a in enumerate(arrays)]
    backward(_readout(fn(*tensors), weights))
    return [tensors[i].grad if tensors[i].grad is not None else np.zeros(tensors[i].shape)
            for i in wrt]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-3,
              seed: int = 0, wrt: Sequence[int] | None = None) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    A non-scalar output is reduced against fixed random weights so every
    output element contributes a distinct sensitivity.
    """
    probe = Tensor(np.asarray(fn(*[Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]).data))
    weights = None
    if probe.size != 1:
        weights = np.random.default_rng(seed).standard_normal(probe.shape)
    analytic = analytic_gradients(fn, arrays, weights, wrt)
    numeric = numerical_gradients(fn, arrays, step, weights, wrt)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
