"""Landmark error metrics normalised by inter-ocular distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_shape

CONVERGENCE_THRESHOLD = 0.05
PIXEL_TOLERANCES = (10.0, 5.0)


def _pair(pred, gt):
    gt = check_shape(gt, name="gt")
    pred = check_shape(pred, gt.shape[0], "pred")
    return pred, gt


def _check_iod(iod):
    if not iod > 0:
        raise ValueError("inter-ocular distance must be > 0")
    return float(iod)


def normalized_mse(pred, gt, iod: float) -> float:
    """Mean squared landmark error divided by ``iod**2``."""
    pred, gt = _pair(pred, gt)
    iod = _check_iod(iod)
    return float(((pred - gt) ** 2).sum(axis=1).mean() / iod ** 2)


def mean_error(pred, gt, iod: float) -> float:
    """Mean point-to-point Euclidean error in units of ``iod``."""
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=1).mean() / _check_iod(iod))


def convergence_flag(pred, gt, iod: float, threshold: float = CONVERGENCE_THRESHOLD) -> bool:
    return mean_error(pred, gt, iod) < threshold


def landmark_accuracy(pred, gt, pixel_tol: float = 10.0) -> float:
    """Fraction of landmarks closer than ``pixel_tol`` pixels."""
    if not pixel_tol > 0:
        raise ValueError("pixel_tol must be > 0")
    pred, gt = _pair(pred, gt)
    return float((np.linalg.norm(pred - gt, axis=1) < pixel_tol).mean())


def ced_curve(errors, thresholds) -> list[tuple[float, float]]:
    """Fraction of images whose normalised error is below each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return [(float(t), 0.0) for t in thresholds]
    return [(float(t), float((e < t).mean())) for t in thresholds]


DEFAULT_CED_THRESHOLDS = tuple(np.round(np.arange(0.0, 0.1501, 0.005), 3))


@dataclass
class ImageResult:
    image_id: str
    nmse: float
    mean_error: float
    converged: bool
    accuracy: dict
    iterations: int
    time_s: float
    shape: np.ndarray = field(repr=False, default=None)


@dataclass
class MetricsReport:
    method: str
    normalized_mse: float
    convergence_rate: float
    landmark_accuracy: float
    landmark_accuracy_5px: float
    mean_time_s: float
    per_image: list
    ced: list

    @classmethod
    def from_results(cls, method: str, results: list, thresholds=DEFAULT_CED_THRESHOLDS):
        if not results:
            return cls(method, float("nan"), 0.0, 0.0, 0.0, 0.0, [], ced_curve([], thresholds))
        return cls(
            method,
            float(np.mean([r.nmse for r in results])),
            float(np.mean([r.converged for r in results])),
            float(np.mean([r.accuracy[10.0] for r in results])),
            float(np.mean([r.accuracy[5.0] for r in results])),
            float(np.mean([r.time_s for r in results])),
            list(results),
            ced_curve([r.mean_error for r in results], thresholds),
        )


def evaluate_shape(image_id, pred, gt, iod, iterations=0, time_s=0.0) -> ImageResult:
    err = mean_error(pred, gt, iod)
    return ImageResult(image_id, normalized_mse(pred, gt, iod), err,
                       bool(err < CONVERGENCE_THRESHOLD),
                       {t: landmark_accuracy(pred, gt, t) for t in PIXEL_TOLERANCES},
                       int(iterations), float(time_s), np.asarray(pred, dtype=np.float64).copy())
