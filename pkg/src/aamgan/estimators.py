"""scikit-learn style wrapper around model building and fitting."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_shape
from .fitting import FitConfig, gradient_descent_fit, project_out_fit, simultaneous_fit
from .gan_fitting import GanFitConfig, gan_fit, train_prior
from .models import build_aam
from .nets import TrainConfig

METHODS = ("cgd", "sic", "gd", "gan")


class AAMFitter(BaseEstimator):
    """Learns an AAM (and for ``method="gan"`` its appearance prior) from
    annotated images; ``predict`` refines initial shapes on new images.

    >>> est = AAMFitter(method="cgd").fit(images, shapes)   # doctest: +SKIP
    >>> fitted = est.predict(test_images, init_shapes)      # doctest: +SKIP
    """

    def __init__(self, method: str = "cgd", frame_size: int = 64, shape_variance: float = 0.98,
                 appearance_variance: float = 0.95, max_iters: int = 50, gamma: float = 0.1,
                 epochs: int = 30, seed: int = 0):
        self.method = method
        self.frame_size = frame_size
        self.shape_variance = shape_variance
        self.appearance_variance = appearance_variance
        self.max_iters = max_iters
        self.gamma = gamma
        self.epochs = epochs
        self.seed = seed

    def _check_params(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    def fit(self, X, y):
        """``X``: sequence of grayscale images; ``y``: matching ``(v, 2)`` landmark arrays."""
        self._check_params()
        images = [check_image(im) for im in X]
        shapes = [check_shape(s) for s in y]
        if len(images) != len(shapes):
            raise ValueError(f"{len(images)} images but {len(shapes)} shapes")
        self.aam_ = build_aam(images, shapes, frame_size=self.frame_size,
                              shape_variance=self.shape_variance,
                              appearance_variance=self.appearance_variance)
        self.prior_ = None
        if self.method == "gan":
            self.prior_ = train_prior(images, shapes, self.aam_,
                                      TrainConfig(epochs=self.epochs, seed=self.seed))
        self.n_landmarks_ = shapes[0].shape[0]
        return self

    def fit_one(self, image, init_shape):
        """Full :class:`FitReport` for one image."""
        check_is_fitted(self, "aam_")
        aam = self.aam_
        p0 = aam.pdm.project(check_shape(init_shape, self.n_landmarks_, "init_shape"))
        img = check_image(image)
        if self.method == "cgd":
            return project_out_fit(img, p0, aam, FitConfig(max_iters=self.max_iters))
        if self.method == "sic":
            return simultaneous_fit(img, p0, None, aam, FitConfig(max_iters=self.max_iters))
        if self.method == "gd":
            cfg = FitConfig(solver="gradient_descent", max_iters=self.max_iters, metric="gauss_newton")
            return gradient_descent_fit(img, p0, None, aam, cfg)
        cfg = GanFitConfig(gamma=self.gamma, max_iters=self.max_iters, metric="gauss_newton")
        return gan_fit(img, p0, aam, self.prior_, cfg)

    def predict(self, X, init_shapes):
        """Fitted ``(n, v, 2)`` landmarks for each image, starting from ``init_shapes``."""
        if len(X) != len(init_shapes):
            raise ValueError(f"{len(X)} images but {len(init_shapes)} initial shapes")
        return np.stack([self.fit_one(im, s).shape_final for im, s in zip(X, init_shapes)])

    def score(self, X, y, init_shapes):
        """Convergence rate (mean error below 5% of the inter-ocular distance)."""
        from .metrics import convergence_flag
        from .synth import interocular_distance
        pred = self.predict(X, init_shapes)
        return float(np.mean([convergence_flag(p, g, interocular_distance(g)) for p, g in zip(pred, y)]))
