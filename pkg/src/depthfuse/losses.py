"""Coarse-to-fine supervision: depth, gradient and surface-normal terms.

Each stage loss is ``w_n * normal + w_d * depth + w_g * gradient``; the total
is ``w_coarse * coarse_stage + w_refined * refined_stage``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, ops
from .camera import CameraIntrinsics
from .metrics import VALID_RANGE, evaluation_mask

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL = np.stack([SOBEL_X, SOBEL_X.T])[:, None]  # (2, 1, 3, 3): d/dx, d/dy

_NORMAL_EPS = 1e-12


class EmptyMaskWarning(RuntimeWarning):
    """A loss term had no valid pixels to average over and returned 0."""


@dataclass(frozen=True)
class LossConfig:
    w_coarse: float = 0.5
    w_refined: float = 1.0
    w_n: float = 0.3
    w_d: float = 1.0
    w_g: float = 0.5
    valid_range: tuple = VALID_RANGE
    use_valid_range: bool = True

    def __post_init__(self):
        weights = (self.w_coarse, self.w_refined, self.w_n, self.w_d, self.w_g)
        if any(w < 0 for w in weights):
            raise ValueError(f"loss weights must be non-negative, got {weights}")
        if not (self.w_coarse > 0 or self.w_refined > 0):
            raise ValueError("at least one of w_coarse, w_refined must be positive")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ValueError(f"valid range {self.valid_range} is empty")

    def mask_for(self, gt: np.ndarray) -> np.ndarray:
        return evaluation_mask(gt, self.valid_range if self.use_valid_range else None)


@dataclass
class LossBreakdown:
    total: Tensor
    coarse_total: float
    refined_total: float
    coarse_terms: dict = field(default_factory=dict)
    refined_terms: dict = field(default_factory=dict)
    empty_mask: bool = False

    def as_dict(self) -> dict:
        out = {"total": float(self.total.data), "coarse_total": self.coarse_total,
               "refined_total": self.refined_total}
        out.update({f"coarse_{k}": v for k, v in self.coarse_terms.items()})
        out.update({f"refined_{k}": v for k, v in self.refined_terms.items()})
        return out


def _as_planes(gt, like: Tensor) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != like.shape:
        raise ValueError(f"ground truth shape {gt.shape} != prediction shape {like.shape}")
    return gt


def _empty(what: str) -> None:
    warnings.warn(f"{what}: no valid pixels, returning 0", EmptyMaskWarning, stacklevel=3)


def depth_loss(pred: Tensor, gt, mask) -> Tensor:
    """Mean absolute depth error over masked pixels."""
    gt = _as_planes(gt, pred)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if not mask.any():
        _empty("depth_loss")
    return ops.masked_mean(ops.absolute(ops.subtract(pred, gt)), mask)


def _sobel_np(depth: np.ndarray) -> np.ndarray:
    win = sliding_window_view(depth[:, 0], (3, 3), axis=(1, 2))
    return np.stack([np.einsum("nhwab,ab->nhw", win, SOBEL_X),
                     np.einsum("nhwab,ab->nhw", win, SOBEL_X.T)], axis=1)


def interior_mask(mask: np.ndarray) -> np.ndarray:
    """(n, 1, h, w) mask -> (n, 1, h-2, w-2): pixels whose 3x3 support is all valid."""
    win = sliding_window_view(np.asarray(mask, dtype=bool)[:, 0], (3, 3), axis=(1, 2))
    return win.all(axis=(3, 4))[:, None]


def gradient_loss(pred: Tensor, gt, mask) -> Tensor:
    """L1 distance between Sobel x/y responses of prediction and ground truth."""
    gt = _as_planes(gt, pred)
    inner = np.broadcast_to(interior_mask(np.broadcast_to(mask, pred.shape)),
                            (pred.shape[0], 2, pred.shape[2] - 2, pred.shape[3] - 2))
    if not inner.any():
        _empty("gradient_loss")
    kernel = Tensor(SOBEL, dtype=np.float64)
    response = ops.conv2d(pred, kernel)
    return ops.masked_mean(ops.absolute(ops.subtract(response, _sobel_np(gt))), inner)


def _central_x(p):
    return p[:, :, 1:-1, 2:] - p[:, :, 1:-1, :-2]


def _central_y(p):
    return p[:, :, 2:, 1:-1] - p[:, :, :-2, 1:-1]


def _cross(a, b):
    ax, ay, az = a
    bx, by, bz = b
    return (ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx)


def surface_normals(depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unnormalized (n, 3, h-2, w-2) normals from back-projected depth."""
    depth = np.asarray(depth, dtype=np.float64)
    sx, sy = intrinsics.ray_slopes(depth.shape[2], depth.shape[3])
    pts = (depth * sx, depth * sy, depth)
    n = _cross([_central_x(p) for p in pts], [_central_y(p) for p in pts])
    return np.concatenate(n, axis=1)


def normal_loss(pred: Tensor, gt, intrinsics: CameraIntrinsics, mask) -> Tensor:
    """Mean (1 - cosine) between predicted and ground-truth surface normals."""
    gt = _as_planes(gt, pred)
    n, _, h, w = pred.shape
    intrinsics.validate(h, w)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    center = mask[:, :, 1:-1, 1:-1]
    support = (center & mask[:, :, 1:-1, 2:] & mask[:, :, 1:-1, :-2]
               & mask[:, :, 2:, 1:-1] & mask[:, :, :-2, 1:-1])

    g = surface_normals(gt, intrinsics)
    g_len = np.sqrt((g * g).sum(axis=1, keepdims=True))
    p_np = surface_normals(pred.data, intrinsics)
    p_len = np.sqrt((p_np * p_np).sum(axis=1, keepdims=True))
    valid = support & (g_len > _NORMAL_EPS) & (p_len > _NORMAL_EPS)
    if not valid.any():
        _empty("normal_loss")
    g_unit = g / np.where(g_len > _NORMAL_EPS, g_len, 1.0)

    sx, sy = intrinsics.ray_slopes(h, w)
    pts = (ops.multiply(pred, sx), ops.multiply(pred, sy), pred)
    nx, ny, nz = _cross([_central_x(p) for p in pts], [_central_y(p) for p in pts])
    length = ops.sqrt(ops.add(ops.add(ops.add(ops.square(nx), ops.square(ny)), ops.square(nz)), 1e-30))
    dot = ops.add(ops.add(ops.multiply(nx, g_unit[:, 0:1]), ops.multiply(ny, g_unit[:, 1:2])),
                  ops.multiply(nz, g_unit[:, 2:3]))
    cosine = ops.divide(dot, length)
    return ops.masked_mean(1.0 - cosine, valid)


def stage_loss(pred: Tensor, gt, intrinsics: CameraIntrinsics, mask, config: LossConfig):
    d = depth_loss(pred, gt, mask)
    g = gradient_loss(pred, gt, mask)
    nrm = normal_loss(pred, gt, intrinsics, mask)
    total = ops.add(ops.add(ops.scale(nrm, config.w_n), ops.scale(d, config.w_d)), ops.scale(g, config.w_g))
    terms = {"depth": float(d.data), "grad": float(g.data), "normal": float(nrm.data)}
    return total, terms


def total_loss(coarse: Tensor, refined: Optional[Tensor], gt, intrinsics: CameraIntrinsics,
               config: LossConfig | None = None, mask=None) -> LossBreakdown:
    config = config or LossConfig()
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = config.mask_for(gt)
    empty = not np.any(mask)
    coarse_stage, coarse_terms = stage_loss(coarse, gt, intrinsics, mask, config)
    total = ops.scale(coarse_stage, config.w_coarse)
    refined_total, refined_terms = 0.0, {}
    if refined is not None:
        if refined.shape != coarse.shape:
            raise ValueError(f"refined shape {refined.shape} != coarse shape {coarse.shape}")
        refined_stage, refined_terms = stage_loss(refined, gt, intrinsics, mask, config)
        total = ops.add(total, ops.scale(refined_stage, config.w_refined))
        refined_total = float(refined_stage.data)
    return LossBreakdown(total=total, coarse_total=float(coarse_stage.data), refined_total=refined_total,
                         coarse_terms=coarse_terms, refined_terms=refined_terms, empty_mask=empty)
