"""Depth-completion evaluation metrics with valid-range masking."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

VALID_RANGE = (0.3, 1.5)
THRESHOLDS = (1.05, 1.10, 1.25)
METRIC_KEYS = ("rmse", "rel", "mae", "delta_105", "delta_110", "delta_125")


@dataclass
class MetricReport:
    """Errors over masked pixels; every metric is None when no pixel was valid."""

    rmse: Optional[float]
    rel: Optional[float]
    mae: Optional[float]
    delta_105: Optional[float]
    delta_110: Optional[float]
    delta_125: Optional[float]
    pixel_count: int

    @property
    def valid(self) -> bool:
        return self.pixel_count > 0

    @property
    def status(self) -> str:
        return "ok" if self.valid else "no valid pixels"

    @classmethod
    def empty(cls) -> "MetricReport":
        return cls(None, None, None, None, None, None, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        return d


def evaluation_mask(gt: np.ndarray, valid_range: tuple | None = VALID_RANGE) -> np.ndarray:
    """Pixels with a real ground-truth depth, optionally inside ``valid_range``."""
    gt = np.asarray(gt)
    mask = np.isfinite(gt) & (gt > 0)
    if valid_range is not None:
        lo, hi = valid_range
        if not lo < hi:
            raise ValueError(f"valid range {valid_range} is empty")
        mask &= (gt >= lo) & (gt <= hi)
    return mask


def compute_metrics(pred: np.ndarray, gt: np.ndarray, eval_mask: np.ndarray) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    mask = np.broadcast_to(np.asarray(eval_mask, dtype=bool), gt.shape) & (gt > 0)
    count = int(mask.sum())
    if count == 0:
        return MetricReport.empty()
    d, ds = pred[mask], gt[mask]
    err = d - ds
    abs_err = np.abs(err)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(d / ds, np.where(d > 0, ds / d, np.inf))
    ratio = np.where(d > 0, ratio, np.inf)
    deltas = [100.0 * float(np.mean(ratio < t)) for t in THRESHOLDS]
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err * err))),
        rel=float(np.mean(abs_err / ds)),
        mae=float(np.mean(abs_err)),
        delta_105=deltas[0], delta_110=deltas[1], delta_125=deltas[2],
        pixel_count=count,
    )


def mean_report(reports: Iterable[MetricReport]) -> MetricReport:
    """Average per-frame metrics, skipping frames that had no valid pixels."""
    reports = [r for r in reports if r.valid]
    if not reports:
        return MetricReport.empty()
    values = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_KEYS}
    return MetricReport(**values, pixel_count=sum(r.pixel_count for r in reports))
