"""Sensor-style depth corruption keyed on surface material."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..refine.structures import SparseDepth
from .scene import MATERIAL_CODE, RenderResult


@dataclass(frozen=True)
class CorruptionConfig:
    transparent_drop: float = 0.85    # otherwise the sensor sees through to the background
    reflective_drop: float = 0.5      # otherwise multiplicative uniform noise
    reflective_noise: float = 0.05
    opaque_dropout: float = 0.01
    opaque_noise: float = 0.003       # std of multiplicative Gaussian noise
    noise: bool = True

    def __post_init__(self):
        for name in ("transparent_drop", "reflective_drop", "opaque_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")


def corrupt_depth(gt: np.ndarray, render: RenderResult, seed: int,
                  config: CorruptionConfig | None = None) -> SparseDepth:
    """Simulate a depth sensor failing on transparent and reflective surfaces.

    ``gt`` is never modified. Every random draw covers the full frame in a
    fixed order, so the outcome depends only on ``seed`` and the inputs.
    """
    config = config or CorruptionConfig()
    gt = np.asarray(gt, dtype=np.float64)
    material = np.asarray(render.material)
    if material.shape != gt.shape or render.background_depth.shape != gt.shape:
        raise ValueError("material masks do not align with the ground-truth depth")
    rng = np.random.default_rng(seed)
    u_drop = rng.random(gt.shape)
    u_noise = rng.uniform(-1.0, 1.0, size=gt.shape)
    g_noise = rng.standard_normal(gt.shape)

    raw = gt.copy()
    valid = gt > 0

    transparent = material == MATERIAL_CODE["transparent"]
    t_drop = transparent & (u_drop < config.transparent_drop)
    raw = np.where(transparent & ~t_drop, render.background_depth, raw)
    valid &= ~t_drop

    reflective = material == MATERIAL_CODE["reflective"]
    r_drop = reflective & (u_drop < config.reflective_drop)
    if config.noise:
        raw = np.where(reflective & ~r_drop, raw * (1.0 + config.reflective_noise * u_noise), raw)
    valid &= ~r_drop

    opaque = material == MATERIAL_CODE["opaque"]
    o_drop = opaque & (u_drop < config.opaque_dropout)
    if config.noise:
        raw = np.where(opaque & ~o_drop, raw * (1.0 + config.opaque_noise * g_noise), raw)
    valid &= ~o_drop

    valid &= raw > 0
    raw = np.where(valid, raw, 0.0)
    return SparseDepth(raw.astype(np.float32)[None, None], valid[None, None])
