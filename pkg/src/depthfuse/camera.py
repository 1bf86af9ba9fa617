from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; pixel (u, v) has its center at (u, v)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self, height: int | None = None, width: int | None = None) -> "CameraIntrinsics":
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if width is not None and not 0 <= self.cx <= width - 1:
            raise ValueError(f"principal point cx={self.cx} outside image width {width}")
        if height is not None and not 0 <= self.cy <= height - 1:
            raise ValueError(f"principal point cy={self.cy} outside image height {height}")
        return self

    @classmethod
    def default_for(cls, height: int, width: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(fx=float(f), fy=float(f), cx=width / 2.0, cy=height / 2.0)

    def ray_slopes(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (x/z, y/z) of the viewing ray, each shaped (h, w)."""
        u = (np.arange(width, dtype=np.float64) - self.cx) / self.fx
        v = (np.arange(height, dtype=np.float64) - self.cy) / self.fy
        return np.broadcast_to(u[None, :], (height, width)), np.broadcast_to(v[:, None], (height, width))
