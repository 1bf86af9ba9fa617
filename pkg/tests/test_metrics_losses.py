import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthfuse.autodiff import Tensor
from depthfuse.autodiff.gradcheck import gradcheck
from depthfuse.camera import CameraIntrinsics
from depthfuse.gradsuite import build_cases
from depthfuse.losses import (
    EmptyMaskWarning,
    LossConfig,
    depth_loss,
    gradient_loss,
    normal_loss,
    stage_loss,
    total_loss,
)
from depthfuse.metrics import MetricReport, compute_metrics, evaluation_mask, mean_report

from oracles import metrics_naive

INTR = CameraIntrinsics(12.0, 12.0, 5.0, 4.0)


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _scene(rng, h=9, w=11):
    yy, xx = np.mgrid[0:h, 0:w]
    gt = (0.9 + 0.02 * xx + 0.015 * yy + 0.01 * np.sin(xx + yy))[None, None]
    return gt, np.ones_like(gt, dtype=bool)


# -- metrics --------------------------------------------------------------------

def test_metrics_hand_case():
    r = compute_metrics(np.array([1.0, 2.0]), np.array([1.0, 4.0]), np.array([True, True]))
    assert r.mae == 1.0
    assert r.rmse == pytest.approx(math.sqrt(2), abs=1e-12)
    assert r.rel == 0.25


def test_metrics_identity_and_ratio_case(rng):
    gt = rng.uniform(0.3, 1.5, (16, 16))
    r = compute_metrics(gt, gt, np.ones_like(gt, bool))
    assert r.rmse == r.rel == r.mae == 0.0 and r.delta_105 == 100.0
    r = compute_metrics(1.04 * gt, gt, np.ones_like(gt, bool))
    assert r.delta_105 == 100.0
    assert r.rel == pytest.approx(0.04, abs=1e-12)


def test_empty_mask_is_explicit_not_nan():
    r = compute_metrics(np.ones(4), np.ones(4), np.zeros(4, bool))
    assert r == MetricReport.empty()
    assert r.status == "no valid pixels" and r.to_dict()["rmse"] is None


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.2, 2.0, (16, 16))
    pred = gt * rng.uniform(0.7, 1.3, gt.shape)
    pred[rng.random(gt.shape) < 0.05] = 0.0
    mask = rng.random(gt.shape) < 0.8
    got = compute_metrics(pred, gt, mask).to_dict()
    want = metrics_naive(pred, gt, mask)
    for k, v in want.items():
        assert got[k] == pytest.approx(v, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_delta_monotone_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.1, 3.0, (6, 7))
    pred = gt * np.exp(rng.normal(0, 0.2, gt.shape))
    r = compute_metrics(pred, gt, rng.random(gt.shape) < 0.9)
    if r.valid:
        assert 0 <= r.delta_105 <= r.delta_110 <= r.delta_125 <= 100
        assert min(r.rmse, r.rel, r.mae) >= 0


def test_masked_out_pixels_never_change_metrics(rng):
    gt = rng.uniform(0.3, 1.5, (8, 8))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    mask = rng.random(gt.shape) < 0.5
    other = pred.copy()
    other[~mask] = 99.0
    assert compute_metrics(pred, gt, mask) == compute_metrics(other, gt, mask)


def test_evaluation_mask_range():
    gt = np.array([0.0, 0.2, 0.3, 1.0, 1.5, 1.6])
    assert list(evaluation_mask(gt)) == [False, False, True, True, True, False]
    assert list(evaluation_mask(gt, None)) == [False, True, True, True, True, True]


def test_mean_report_skips_empty_frames():
    a = compute_metrics(np.array([1.0]), np.array([2.0]), np.array([True]))
    m = mean_report([a, MetricReport.empty()])
    assert m.rmse == a.rmse and m.pixel_count == 1


# -- losses ---------------------------------------------------------------------

def test_depth_loss_cases(rng):
    gt, mask = _scene(rng)
    assert depth_loss(_t(gt), gt, mask).item() == 0.0
    assert depth_loss(_t(gt + 0.1), gt, mask).item() == pytest.approx(0.1, abs=1e-12)


def test_gradient_loss_ignores_constant_offset(rng):
    gt, mask = _scene(rng)
    assert gradient_loss(_t(gt), gt, mask).item() == pytest.approx(0.0, abs=1e-12)
    assert gradient_loss(_t(gt + 0.3), gt, mask).item() == pytest.approx(0.0, abs=1e-12)
    assert gradient_loss(_t(gt * 1.2), gt, mask).item() > 0


def test_normal_loss_planes_at_any_distance():
    h, w = 9, 11
    gt = np.full((1, 1, h, w), 1.0)
    mask = np.ones_like(gt, bool)
    assert normal_loss(_t(gt), gt, INTR, mask).item() == pytest.approx(0.0, abs=1e-12)
    assert normal_loss(_t(2.5 * gt), gt, INTR, mask).item() == pytest.approx(0.0, abs=1e-12)


def test_empty_masks_warn_and_give_zero(rng):
    gt, _ = _scene(rng)
    empty = np.zeros_like(gt, bool)
    with pytest.warns(EmptyMaskWarning):
        assert depth_loss(_t(gt + 1), gt, empty).item() == 0.0
    with pytest.warns(EmptyMaskWarning):
        assert gradient_loss(_t(gt + 1), gt, empty).item() == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        out = total_loss(_t(gt), _t(gt), gt, INTR, mask=empty)
    assert out.empty_mask and out.total.item() == 0.0


@pytest.mark.parametrize("name,tol", [("depth_loss", 1e-4), ("gradient_loss", 1e-4), ("normal_loss", 1e-3),
                                      ("total_loss", 1e-3)])
def test_loss_gradients(name, tol):
    case = next(c for c in build_cases(1) if c.name == name)
    assert gradcheck(case.fn, case.arrays, step=1e-3) < tol


def test_total_loss_recombines_stage_losses(rng):
    gt, mask = _scene(rng)
    coarse = gt + rng.normal(0, 0.05, gt.shape)
    refined = gt + rng.normal(0, 0.02, gt.shape)
    cfg = LossConfig(w_coarse=0.7, w_refined=1.3, w_n=0.2, w_d=0.9, w_g=0.4)
    out = total_loss(_t(coarse), _t(refined), gt, INTR, cfg, mask)
    sc, _ = stage_loss(_t(coarse), gt, INTR, mask, cfg)
    sr, _ = stage_loss(_t(refined), gt, INTR, mask, cfg)
    assert out.total.item() == pytest.approx(0.7 * sc.item() + 1.3 * sr.item(), abs=1e-6)
    d = out.as_dict()
    manual = cfg.w_n * d["refined_normal"] + cfg.w_d * d["refined_depth"] + cfg.w_g * d["refined_grad"]
    assert d["refined_total"] == pytest.approx(manual, abs=1e-12)


def test_total_loss_zero_and_linearity(rng):
    gt, mask = _scene(rng)
    assert total_loss(_t(gt), _t(gt), gt, INTR, mask=mask).total.item() == pytest.approx(0.0, abs=1e-12)
    coarse = gt + 0.05
    cfg = LossConfig(w_refined=0.0)
    out = total_loss(_t(coarse), _t(gt + 0.2), gt, INTR, cfg, mask)
    assert out.total.item() == cfg.w_coarse * out.coarse_total


def test_losses_ignore_masked_out_pixels(rng):
    gt, mask = _scene(rng)
    mask = mask.copy()
    mask[..., :, 6:] = False
    pred = gt + rng.normal(0, 0.05, gt.shape)
    other = pred.copy()
    other[~mask] += 3.0
    a = total_loss(_t(pred), None, gt, INTR, mask=mask).as_dict()
    b = total_loss(_t(other), None, gt, INTR, mask=mask).as_dict()
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(w_coarse=0.0, w_refined=0.0)
    with pytest.raises(ValueError):
        LossConfig(valid_range=(1.0, 0.5))
    with pytest.raises(ValueError):
        LossConfig(w_g=-1.0)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0).validate()
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 50.0, 2.0).validate(10, 10)
