from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aamgan.metrics import (DEFAULT_CED_THRESHOLDS, MetricsReport, ced_curve, convergence_flag, evaluate_shape,
                            landmark_accuracy, mean_error, normalized_mse)

coords = arrays(np.float64, (6, 2), elements=st.floats(-100, 100))


def _naive_mean_error(pred, gt, iod):
    total = 0.0
    for (a, b), (c, d) in zip(pred.tolist(), gt.tolist()):
        total += math.sqrt((a - c) ** 2 + (b - d) ** 2)
    return total / len(gt) / iod


@settings(max_examples=60, deadline=None)
@given(coords, coords, st.floats(1.0, 50.0))
def test_errors_match_naive_loops(pred, gt, iod):
    assert mean_error(pred, gt, iod) == pytest.approx(_naive_mean_error(pred, gt, iod), rel=1e-12, abs=1e-15)
    naive = sum((a - c) ** 2 + (b - d) ** 2 for (a, b), (c, d) in zip(pred.tolist(), gt.tolist()))
    assert normalized_mse(pred, gt, iod) == pytest.approx(naive / len(gt) / iod ** 2, rel=1e-12, abs=1e-15)
    close = sum(math.hypot(a - c, b - d) < 10 for (a, b), (c, d) in zip(pred.tolist(), gt.tolist()))
    assert landmark_accuracy(pred, gt, 10.0) == close / len(gt)


def test_convergence_threshold_is_strict():
    gt = np.zeros((4, 2))
    pred = gt + [0.5, 0.0]  # error 0.5 px, iod 10 -> 0.05 exactly
    assert not convergence_flag(pred, gt, 10.0)
    assert convergence_flag(pred * 0.999, gt, 10.0)


def test_ced_counts_and_monotone():
    errs = [0.01, 0.02, 0.05, 0.2]
    curve = ced_curve(errs, [0.0, 0.02, 0.05, 0.06, 1.0])
    assert [f for _, f in curve] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert ced_curve([], [0.1]) == [(0.1, 0.0)]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 0.3), min_size=1, max_size=40))
def test_ced_at_threshold_equals_convergence_rate(errs):
    curve = dict(ced_curve(errs, DEFAULT_CED_THRESHOLDS))
    rate = np.mean([e < 0.05 for e in errs])
    assert curve[0.05] == pytest.approx(rate)
    fr = [f for _, f in ced_curve(errs, DEFAULT_CED_THRESHOLDS)]
    assert all(a <= b for a, b in zip(fr, fr[1:]))


def test_report_aggregates():
    gt = np.zeros((3, 2))
    res = [evaluate_shape("a", gt + [1.0, 0.0], gt, 10.0, 3, 0.5),
           evaluate_shape("b", gt + [6.0, 8.0], gt, 10.0, 5, 1.5)]
    rep = MetricsReport.from_results("gd", res)
    assert rep.convergence_rate == 0.0
    assert rep.normalized_mse == pytest.approx((0.01 + 1.0) / 2)
    assert rep.landmark_accuracy == 0.5 and rep.landmark_accuracy_5px == 0.5  # 10 px is not < 10 px
    assert rep.mean_time_s == 1.0
    res.append(evaluate_shape("c", gt, gt, 10.0))
    assert MetricsReport.from_results("gd", res).convergence_rate == pytest.approx(1 / 3)
    empty = MetricsReport.from_results("x", [])
    assert empty.convergence_rate == 0.0 and math.isnan(empty.normalized_mse)


def test_metric_errors():
    with pytest.raises(ValueError):
        mean_error(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
    with pytest.raises(ValueError):
        landmark_accuracy(np.zeros((3, 2)), np.zeros((3, 2)), 0)
    with pytest.raises(Exception):
        mean_error(np.zeros((4, 2)), np.zeros((3, 2)), 1.0)
