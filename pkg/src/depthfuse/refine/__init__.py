"""Iterative spatial-propagation refinement of coarse depth."""

from .affinity import check_normalized, kernel_from_channels, neighbor_offsets, normalize_affinities
from .bench import BenchReport, bench_refine
from .engine import PropagationEngine
from .propagation import combine_snapshots, embed_sparse, propagate_step, refine
from .structures import AffinityField, RefinementSchedule, SparseDepth

__all__ = [
    "AffinityField", "BenchReport", "PropagationEngine", "RefinementSchedule", "SparseDepth",
    "bench_refine", "check_normalized", "combine_snapshots", "embed_sparse", "kernel_from_channels",
    "neighbor_offsets", "normalize_affinities", "propagate_step", "refine",
]
