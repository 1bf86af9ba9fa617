from __future__ import annotations

import numpy as np

from ..autodiff import ShapeError, Tensor, as_tensor, ops
from ..autodiff.tensor import make_result
from .structures import AffinityField


def neighbor_offsets(kernel: int) -> list[tuple[int, int]]:
    """(dy, dx) offsets of a k x k window in row-major order, center excluded."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    r = kernel // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


def kernel_from_channels(channels: int) -> int:
    k = int(round(np.sqrt(channels + 1)))
    if k * k - 1 != channels or k < 3 or k % 2 == 0:
        raise ShapeError(f"{channels} affinity channels do not correspond to an odd k x k window")
    return k


def _l1_normalize(raw: Tensor) -> Tensor:
    r = raw.data.astype(np.float64)
    total = np.abs(r).sum(axis=1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    live = total > 0
    out = np.where(live, r / safe, 0.0)

    def grad(g):
        dot = (g * r).sum(axis=1, keepdims=True)
        gr = g / safe - np.sign(r) * dot / (safe * safe)
        return (np.where(live, gr, 0.0),)

    return make_result("l1_normalize", out, (raw,), grad, dtype=np.float64)


def normalize_affinities(raw, kernel: int | None = None) -> AffinityField:
    """Scale raw neighbor weights to unit l1 mass; the center takes the remainder.

    An all-zero raw vector yields zero neighbors and center 1, so that pixel
    is left untouched by propagation. Outputs are 64-bit.
    """
    raw = as_tensor(raw)
    if raw.ndim != 4:
        raise ShapeError(f"raw affinities must be (n, k*k-1, h, w), got {raw.shape}")
    k = kernel_from_channels(raw.shape[1])
    if kernel is not None and kernel != k:
        raise ShapeError(f"{raw.shape[1]} channels imply kernel {k}, not {kernel}")
    neighbors = _l1_normalize(raw)
    center = 1.0 - ops.sum_channel(neighbors)
    return AffinityField(kernel=k, neighbors=neighbors, center=center, raw=raw)


def check_normalized(field: AffinityField, tol: float = 1e-9) -> None:
    nbr = field.neighbors.data.astype(np.float64)
    total = field.center.data.astype(np.float64)[:, 0] + nbr.sum(axis=1)
    if np.abs(total - 1.0).max(initial=0.0) > tol:
        raise ValueError(f"affinity for k={field.kernel} is not normalized: center + neighbors != 1")
    if np.abs(nbr).sum(axis=1).max(initial=0.0) > 1.0 + tol:
        raise ValueError(f"affinity for k={field.kernel} violates the l1 bound")
