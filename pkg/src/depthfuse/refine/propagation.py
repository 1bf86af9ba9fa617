"""Confidence-gated multi-kernel spatial propagation.

For each kernel size the coarse map is embedded with the sensor depth, then
stepped ``T`` times (propagate, then re-embed). Selected intermediate states
of every branch are blended per pixel with step weights ``alpha`` and kernel
weights ``beta``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..autodiff import ShapeError, Tensor, as_tensor, check_finite_enabled
from ..autodiff.tensor import make_result
from .affinity import check_normalized, kernel_from_channels
from .engine import PropagationEngine, branch_backward, embed
from .structures import AffinityField, RefinementSchedule, SparseDepth

_default_engine: PropagationEngine | None = None


def default_engine() -> PropagationEngine:
    global _default_engine
    if _default_engine is None:
        _default_engine = PropagationEngine(threads=1)
    return _default_engine


def _plane(array) -> np.ndarray:
    """(n, 1, h, w) -> (n, h, w) float64."""
    array = np.asarray(array, dtype=np.float64)
    return array[:, 0] if array.ndim == 4 else array


def propagate_step(depth, neighbors, center, kernel: int | None = None,
                   engine: PropagationEngine | None = None) -> np.ndarray:
    """One affinity-weighted update of an (n, 1, h, w) depth map, no embedding."""
    depth = _plane(depth)
    nbr = np.asarray(neighbors.data if isinstance(neighbors, Tensor) else neighbors, dtype=np.float64)
    ctr = _plane(center.data if isinstance(center, Tensor) else center)
    k = kernel_from_channels(nbr.shape[1]) if kernel is None else kernel
    if nbr.shape[1] != k * k - 1:
        raise ShapeError(f"kernel {k} needs {k * k - 1} neighbor channels, got {nbr.shape[1]}")
    if check_finite_enabled():
        total = ctr + nbr.sum(axis=1)
        if np.abs(total - 1.0).max(initial=0.0) > 1e-9:
            raise ValueError("propagate_step: affinity is not normalized")
    engine = engine or default_engine()
    zeros = np.zeros_like(depth)
    never = np.zeros(depth.shape, dtype=bool)
    out = np.empty_like(depth)
    for b in range(depth.shape[0]):
        out[b], _ = engine.step(np.ascontiguousarray(depth[b]), np.ascontiguousarray(nbr[b]),
                                np.ascontiguousarray(ctr[b]), zeros[b], zeros[b], never[b], k)
    return out[:, None]


def embed_sparse(depth, sparse: SparseDepth, phi) -> np.ndarray:
    """Pull valid sensor pixels toward the measurement by their confidence."""
    phi = _plane(phi.data if isinstance(phi, Tensor) else phi)
    if np.any(phi < 0) or np.any(phi > 1):
        raise ValueError("confidence must lie in [0, 1]")
    return embed(_plane(depth), phi, _plane(sparse.depth), sparse.mask[:, 0])[:, None]


def _branch(coarse: Tensor, field: AffinityField, phi: Tensor, sparse: SparseDepth,
            schedule: RefinementSchedule, engine: PropagationEngine) -> Tensor:
    """Taped op: snapshots (n, |T|, h, w) of one kernel branch."""
    k = field.kernel
    c = _plane(coarse.data)
    nbr = field.neighbors.data.astype(np.float64)
    ctr = _plane(field.center.data)
    ph = _plane(phi.data)
    sp = _plane(sparse.depth)
    valid = sparse.mask[:, 0]
    states, props = engine.run_branch(c, nbr, ctr, ph, sp, valid, k, schedule.total_steps)
    snaps = list(schedule.snapshots)
    out = states[:, snaps]

    def grad(g):
        state_grads = np.zeros_like(states)
        state_grads[:, snaps] = g
        gc, gn, gctr, gphi = branch_backward(c, states, props, nbr, ctr, ph, sp, valid, k, state_grads)
        return gc[:, None], gn, gctr[:, None], gphi[:, None]

    return make_result(f"propagate_k{k}", out, (coarse, field.neighbors, field.center, phi), grad)


def combine_snapshots(branches: Sequence[Tensor], alpha: Tensor, beta: Tensor) -> Tensor:
    """Sum over kernels k and steps t of beta_k * alpha_t * snapshot_{k,t}."""
    n, T, h, w = branches[0].shape
    if alpha.shape != (n, T, h, w) or beta.shape != (n, len(branches), h, w):
        raise ShapeError(
            f"combine_snapshots: alpha {alpha.shape} / beta {beta.shape} inconsistent with "
            f"{len(branches)} branches of shape {branches[0].shape}")
    a = alpha.data.astype(np.float64)
    bt = beta.data.astype(np.float64)
    stacks = [s.data.astype(np.float64) for s in branches]
    per_kernel = [(a * s).sum(axis=1) for s in stacks]
    out = sum(bt[:, i] * per_kernel[i] for i in range(len(stacks)))[:, None]

    def grad(g):
        g2 = g[:, 0]
        g_snap = [(g2 * bt[:, i])[:, None] * a for i in range(len(stacks))]
        g_alpha = sum((g2 * bt[:, i])[:, None] * stacks[i] for i in range(len(stacks)))
        g_beta = np.stack([g2 * pk for pk in per_kernel], axis=1)
        return (*g_snap, g_alpha, g_beta)

    return make_result("combine_snapshots", out, (*branches, alpha, beta), grad)


def refine(coarse, sparse: SparseDepth, affinities: Mapping[int, AffinityField] | Sequence[AffinityField],
           confidence, alpha, beta, schedule: RefinementSchedule | None = None,
           engine: PropagationEngine | None = None, return_snapshots: bool = False):
    """Refine a coarse (n, 1, h, w) depth map.

    ``confidence`` and ``beta`` carry one channel per kernel size in schedule
    order, ``alpha`` one channel per snapshot step. With ``return_snapshots``
    the per-kernel snapshot tensors are returned alongside the result.
    """
    schedule = schedule or RefinementSchedule()
    engine = engine or default_engine()
    coarse = as_tensor(coarse)
    confidence, alpha, beta = as_tensor(confidence), as_tensor(alpha), as_tensor(beta)
    if not isinstance(affinities, Mapping):
        affinities = {f.kernel: f for f in affinities}
    n, _, h, w = coarse.shape
    if coarse.shape[1] != 1 or sparse.shape != coarse.shape:
        raise ShapeError(f"coarse {coarse.shape} and sparse {sparse.shape} must both be (n, 1, h, w)")
    if set(affinities) != set(schedule.kernels):
        raise ValueError(f"affinity kernels {sorted(affinities)} != schedule kernels {list(schedule.kernels)}")
    K, T = len(schedule.kernels), len(schedule.snapshots)
    if confidence.shape != (n, K, h, w) or beta.shape != (n, K, h, w) or alpha.shape != (n, T, h, w):
        raise ValueError(
            f"heads inconsistent with schedule: confidence {confidence.shape}, beta {beta.shape} "
            f"(want {(n, K, h, w)}), alpha {alpha.shape} (want {(n, T, h, w)})")
    if h < max(schedule.kernels) // 2 + 1 or w < max(schedule.kernels) // 2 + 1:
        raise ValueError(f"image {h}x{w} too small for kernels {schedule.kernels}")
    if np.any(confidence.data < 0) or np.any(confidence.data > 1):
        raise ValueError("confidence must lie in [0, 1]")

    branches = []
    for i, k in enumerate(schedule.kernels):
        field = affinities[k]
        if field.neighbors.shape != (n, k * k - 1, h, w):
            raise ShapeError(f"affinity for k={k} has shape {field.neighbors.shape}")
        if check_finite_enabled():
            check_normalized(field)
        branches.append(_branch(coarse, field, confidence[:, i:i + 1], sparse, schedule, engine))
    refined = combine_snapshots(branches, alpha, beta)
    if return_snapshots:
        return refined, branches
    return refined
