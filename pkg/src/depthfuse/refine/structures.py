from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..autodiff import Tensor


@dataclass(frozen=True)
class RefinementSchedule:
    """Kernel sizes, iteration count, and the steps whose states get mixed."""

    kernels: tuple = (3, 5, 7)
    total_steps: int = 6
    snapshots: Optional[tuple] = None

    def __post_init__(self):
        kernels = tuple(int(k) for k in self.kernels)
        if not kernels:
            raise ValueError("schedule needs at least one kernel size")
        for k in kernels:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 3, got {k}")
        if len(set(kernels)) != len(kernels):
            raise ValueError(f"duplicate kernel sizes in {kernels}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        T = int(self.total_steps)
        snaps = (0, T // 2, T) if self.snapshots is None else tuple(int(t) for t in self.snapshots)
        snaps = tuple(sorted(set(snaps)))
        if not snaps or snaps[0] < 0 or snaps[-1] > T:
            raise ValueError(f"snapshot steps {snaps} must lie in [0, {T}]")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "total_steps", T)
        object.__setattr__(self, "snapshots", snaps)


@dataclass
class SparseDepth:
    """Raw sensor depth (meters, 0 where invalid) and its validity mask."""

    depth: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float32)
        if depth.ndim == 2:
            depth = depth[None, None]
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise ValueError(f"sparse depth must be (n, 1, h, w), got {depth.shape}")
        if self.mask is None:
            mask = depth > 0
        else:
            mask = np.asarray(self.mask, dtype=bool).reshape(depth.shape)
        if not np.all(np.isfinite(depth[mask])) or np.any(depth[mask] <= 0):
            raise ValueError("valid sensor depths must be finite and strictly positive")
        self.depth = np.where(mask, depth, np.float32(0.0)).astype(np.float32)
        self.mask = mask

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    def __getitem__(self, item) -> "SparseDepth":
        return SparseDepth(self.depth[item], self.mask[item])


@dataclass
class AffinityField:
    """Normalized neighbor weights for one kernel size, plus the center weight."""

    kernel: int
    neighbors: Tensor
    center: Tensor
    raw: Optional[Tensor] = None
