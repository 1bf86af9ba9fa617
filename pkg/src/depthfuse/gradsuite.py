"""Finite-difference gradient suite over every differentiable op and block.

Inputs are seeded and kept away from kinks (ReLU at 0, |x| at 0, the l1
normalizer at 0) so central differences with step 1e-3 stay meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.gradcheck import gradcheck
from .camera import CameraIntrinsics
from .cmfm import CmfmParams, FeaturePair, cmfm_forward
from .losses import LossConfig, depth_loss, gradient_loss, normal_loss, total_loss
from .refine import RefinementSchedule, SparseDepth, normalize_affinities, refine

OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-3
STEP = 1e-3


@dataclass
class GradCase:
    name: str
    kind: str                 # "op" or "block"
    fn: Callable
    arrays: list
    wrt: list | None = None

    @property
    def tolerance(self) -> float:
        return OP_TOLERANCE if self.kind == "op" else BLOCK_TOLERANCE


@dataclass
class GradResult:
    name: str
    kind: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


class _TensorBlock:
    """Fusion-block stand-in whose weights are suite inputs."""

    def __init__(self, channels: int, prefix: str, names: list, tensors):
        self.channels = channels
        self.prefix = prefix
        self._weights = dict(zip(names, tensors))

    def __getitem__(self, short: str):
        return self._weights[f"{self.prefix}.{short}"]


def _op_cases(rng) -> list:
    x4 = lambda *s: rng.standard_normal(s)  # noqa: E731
    cases = [
        GradCase("add", "op", ops.add, [x4(2, 3, 4, 4), x4(2, 3, 4, 4)]),
        GradCase("subtract", "op", ops.subtract, [x4(2, 3, 4, 4), x4(2, 3, 4, 4)]),
        GradCase("multiply", "op", ops.multiply, [x4(2, 3, 4, 4), x4(2, 3, 4, 4)]),
        GradCase("divide", "op", ops.divide, [x4(2, 3, 4, 4), _away_from_zero(rng, (2, 3, 4, 4), 0.5, 2.0)]),
        GradCase("scale", "op", lambda a: ops.scale(a, -1.7), [x4(2, 3, 4, 4)]),
        GradCase("relu", "op", ops.relu, [_away_from_zero(rng, (2, 3, 4, 4), 0.05, 2.0)]),
        GradCase("sigmoid", "op", ops.sigmoid, [3 * x4(2, 3, 4, 4)]),
        GradCase("softplus", "op", ops.softplus, [3 * x4(2, 3, 4, 4)]),
        GradCase("absolute", "op", ops.absolute, [_away_from_zero(rng, (2, 3, 4, 4), 0.05, 2.0)]),
        GradCase("square", "op", ops.square, [x4(2, 3, 4, 4)]),
        GradCase("sqrt", "op", ops.sqrt, [rng.uniform(0.2, 3.0, size=(2, 3, 4, 4))]),
        GradCase("cast", "op", lambda a: ops.cast(a, np.float64), [x4(2, 3, 4, 4)]),
        GradCase("sum", "op", ops.sum, [x4(2, 3, 4, 4)]),
        GradCase("mean", "op", ops.mean, [x4(2, 3, 4, 4)]),
        GradCase("sum_channel", "op", ops.sum_channel, [x4(2, 3, 4, 4)]),
        GradCase("masked_mean", "op", lambda a: ops.masked_mean(a, np.arange(96).reshape(2, 3, 4, 4) % 3 == 0),
                 [x4(2, 3, 4, 4)]),
        GradCase("index", "op", lambda a: ops.index(a, (slice(None), slice(1, 3), [0, 2, 2], slice(None))),
                 [x4(2, 3, 4, 4)]),
        GradCase("concat_channel", "op", lambda a, b: ops.concat_channel([a, b, a]),
                 [x4(2, 3, 4, 4), x4(2, 2, 4, 4)]),
        GradCase("softmax_channel", "op", ops.softmax_channel, [2 * x4(2, 5, 4, 4)]),
        GradCase("layer_norm_channel", "op", ops.layer_norm_channel,
                 [x4(2, 4, 3, 3), rng.uniform(0.5, 1.5, 4), x4(4)]),
        GradCase("conv2d", "op", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
                 [x4(2, 3, 5, 5), x4(4, 3, 3, 3), x4(4)]),
        GradCase("conv2d_stride2", "op", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
                 [x4(2, 3, 6, 6), x4(4, 3, 3, 3), x4(4)]),
        GradCase("conv2d_1x1", "op", lambda x, w: ops.conv2d(x, w), [x4(2, 3, 4, 4), x4(5, 3, 1, 1)]),
        GradCase("depthwise_conv2d", "op", lambda x, w, b: ops.depthwise_conv2d(x, w, padding=1, bias=b),
                 [x4(2, 3, 5, 5), x4(3, 1, 3, 3), x4(3)]),
        GradCase("bilinear_upsample_x2", "op", ops.bilinear_upsample_x2, [x4(2, 2, 3, 4)]),
        GradCase("avgpool_x2", "op", ops.avgpool_x2, [x4(2, 2, 4, 6)]),
    ]
    # l1 affinity normalization, checked through both outputs
    raw = _away_from_zero(rng, (1, 8, 4, 4))
    cases.append(GradCase("normalize_affinities", "op",
                          lambda r: ops.add(normalize_affinities(r).neighbors,
                                            ops.concat_channel([normalize_affinities(r).center] * 8)),
                          [raw]))
    return cases


def _cmfm_case(rng) -> GradCase:
    c = 3
    block = CmfmParams(c, rng, prefix="blk")
    names = ["blk.proj_rgb.weight", "blk.rgb_k5.weight", "blk.depth_merge.weight", "blk.ffn_dw.weight",
             "blk.ffn_project.weight", "blk.norm.gamma", "blk.norm.beta"]
    fixed = {n: Tensor(p.data, dtype=np.float64) for n, p in block.params.items() if n not in names}
    arrays = [rng.standard_normal((1, c, 5, 5)), rng.standard_normal((1, c, 5, 5))]
    arrays += [block.params[n].data.astype(np.float64) for n in names]

    def fn(f_rgb, f_depth, *weights):
        proxy = _TensorBlock(c, "blk", names, weights)
        proxy._weights.update(fixed)
        return cmfm_forward(FeaturePair(f_rgb, f_depth), proxy).f_fuse

    return GradCase("cmfm_block", "block", fn, arrays)


def _refine_case(rng) -> GradCase:
    n, h, w = 1, 6, 7
    schedule = RefinementSchedule(kernels=(3, 5), total_steps=4)
    valid = rng.random((n, 1, h, w)) < 0.5
    sparse = SparseDepth(np.where(valid, rng.uniform(0.5, 1.5, (n, 1, h, w)), 0.0), valid)
    arrays = [rng.uniform(0.5, 1.5, (n, 1, h, w)), _away_from_zero(rng, (n, 8, h, w)),
              _away_from_zero(rng, (n, 24, h, w)), rng.standard_normal((n, 2, h, w)),
              rng.standard_normal((n, 3, h, w)), rng.standard_normal((n, 2, h, w))]

    def fn(coarse, raw3, raw5, conf, alpha, beta):
        fields = {3: normalize_affinities(raw3), 5: normalize_affinities(raw5)}
        return refine(coarse, sparse, fields, ops.sigmoid(conf), ops.softmax_channel(alpha),
                      ops.softmax_channel(beta), schedule)

    return GradCase("refine_block", "block", fn, arrays)


def _loss_cases(rng) -> list:
    h, w = 8, 9
    intr = CameraIntrinsics(10.0, 10.0, w / 2, h / 2)
    yy, xx = np.mgrid[0:h, 0:w]
    gt = (1.0 + 0.03 * xx + 0.02 * yy)[None, None].astype(np.float64)
    # residual ramps keep every L1 term away from its kink
    pred = gt + 0.05 * xx + 0.04 * yy + 0.01 + 1e-3 * rng.standard_normal(gt.shape)
    mask = np.ones_like(gt, dtype=bool)
    mask[..., 0, 0] = False
    return [
        GradCase("depth_loss", "block", lambda p: depth_loss(p, gt, mask), [pred]),
        GradCase("gradient_loss", "block", lambda p: gradient_loss(p, gt, mask), [pred]),
        GradCase("normal_loss", "block", lambda p: normal_loss(p, gt, intr, mask), [pred]),
        GradCase("total_loss", "block",
                 lambda c, r: total_loss(c, r, gt, intr, LossConfig(), mask).total,
                 [pred, pred + 0.02]),
    ]


def build_cases(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return _op_cases(rng) + [_cmfm_case(rng), _refine_case(rng)] + _loss_cases(rng)


def run_suite(seed: int = 0, step: float = STEP, only=None) -> list:
    results = []
    for case in build_cases(seed):
        if only and case.name not in only:
            continue
        t0 = time.perf_counter()
        err = gradcheck(case.fn, case.arrays, step=step, seed=seed, wrt=case.wrt)
        results.append(GradResult(case.name, case.kind, err, case.tolerance, time.perf_counter() - t0))
    return results
