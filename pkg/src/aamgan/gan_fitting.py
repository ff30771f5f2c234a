"""Fitting with a learned shape-conditioned appearance prior.

The prior is a generator that maps a soft mask of the current (pose-free)
shape to a reference-frame texture, plus a patch discriminator that scores how
realistic that texture looks.  The fitted objective is::

    F(p) = || y(I[p]) - G(mask(p)) ||^2 - gamma * log(clamp(mean sigmoid D(G(mask(p)))))

where ``y`` maps a sampled texture into network units.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._validation import check_image, check_vector
from .exceptions import MissingPriorError, NumericalError
from .fitting import FitConfig, FitReport, _model_texture, _rows, descend, optimal_appearance
from .geometry import is_degenerate, steepest_descent_images
from .models import AAM
from .nets import Discriminator, Generator, TrainConfig, train_gan
from .raster import soft_rasterize


@dataclass
class GanFitConfig:
    gamma: float = 0.1
    step: float = 1.0
    max_iters: int = 40
    tol: float = 1e-4
    sigma: float | None = None  # None: the sharpness the prior was trained with
    eps: float = 1e-6
    backtracking: bool = True
    max_halvings: int = 8
    metric: str = "jacobi"
    recovery: str = "project"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")
        if self.recovery not in ("project", "generator"):
            raise ValueError("recovery must be 'project' or 'generator'")

    def descent_config(self) -> FitConfig:
        return FitConfig(max_iters=self.max_iters, tol=self.tol, solver="gradient_descent",
                         step=self.step, backtracking=self.backtracking,
                         max_halvings=self.max_halvings, metric=self.metric)


@dataclass
class GanPrior:
    """Trained networks plus the affine map ``y = kappa * t + beta`` from model
    texture units to the networks' [-1, 1] range."""
    generator: Generator
    discriminator: Discriminator
    kappa: float
    beta: float = 0.0
    sigma: float = 1.0
    history: dict = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return bool(self.generator.trained and self.discriminator.trained)

    @property
    def resolution(self) -> int:
        return self.generator.resolution


def _require(prior, aam: AAM):
    if prior is None or not isinstance(prior, GanPrior) or not prior.trained:
        raise MissingPriorError("GAN-based fitting needs trained generator and discriminator")
    fr = aam.frame
    if fr.width != prior.resolution or fr.height != prior.resolution:
        raise MissingPriorError(
            f"networks work at {prior.resolution}x{prior.resolution}, model frame is {fr.width}x{fr.height}")


def net_scaling(aam: AAM, textures) -> tuple[float, float]:
    """Choose ``(kappa, beta)`` so training textures fill [-1, 1]."""
    if not aam.appearance.normalize:
        return 1.0 / 127.5, -1.0
    q = float(np.quantile(np.abs(np.concatenate([np.ravel(t) for t in textures])), 0.995))
    return 1.0 / max(q, 1e-12), 0.0


def texture_to_raster(aam: AAM, values) -> np.ndarray:
    """Scatter frame-pixel values into an ``(R, R)`` raster, zero elsewhere."""
    fr = aam.frame
    out = np.zeros(fr.height * fr.width)
    out[fr.pixel_index] = values
    return out.reshape(fr.height, fr.width)


def shape_mask(aam: AAM, p, sigma: float = 1.0) -> np.ndarray:
    return soft_rasterize(aam.pdm.nonrigid(p), aam.tri, aam.frame.width, sigma).data[0]


def build_training_pairs(images, shapes, aam: AAM, sigma: float = 1.0, scaling=None):
    """Masks and net-unit reference textures for generator training.

    Returns ``(masks, targets, (kappa, beta))`` with arrays of shape ``(N, R, R)``.
    """
    ps = [aam.pdm.project(s) for s in shapes]
    tex = []
    for img, p in zip(images, ps):
        t, outside = aam.sample(check_image(img), p, return_outside=True)
        tm, _ = aam.appearance.photometric(t)
        tm[outside] = aam.appearance.mean_texture[outside]
        tex.append(tm)
    kappa, beta = scaling if scaling is not None else net_scaling(aam, tex)
    masks = np.stack([shape_mask(aam, p, sigma) for p in ps])
    targets = np.stack([texture_to_raster(aam, np.clip(kappa * t + beta, -1.0, 1.0)) for t in tex])
    return masks, targets, (kappa, beta)


def train_prior(images, shapes, aam: AAM, config: TrainConfig | None = None,
                sigma: float = 1.0, scaling=None, callback=None) -> GanPrior:
    masks, targets, (kappa, beta) = build_training_pairs(images, shapes, aam, sigma, scaling)
    G, D, hist = train_gan(masks, targets, config, callback=callback)
    return GanPrior(G, D, kappa, beta, sigma, hist.as_dict())


# objective -----------------------------------------------------------------------

@dataclass
class ObjectiveValue:
    total: float
    reconstruction: float
    adversarial: float
    grad: np.ndarray
    jacobian: np.ndarray
    out_of_bounds: int


def _evaluate(img, p, aam: AAM, prior: GanPrior, gamma: float, eps: float, sigma: float,
              with_grad: bool = True, adversarial: bool = True) -> ObjectiveValue:
    am = aam.appearance
    sigma = prior.sigma if sigma is None else sigma
    tm, gain, vsel, n_out = _model_texture(img, p, aam)
    y = prior.kappa * tm + prior.beta
    idx = aam.frame.pixel_index if vsel is None else aam.frame.pixel_index[vsel]

    shape = ad.Tensor(aam.pdm.nonrigid(p), requires_grad=with_grad)
    mask = soft_rasterize(shape, aam.tri, prior.resolution, sigma)
    out = prior.generator(mask)
    g = ad.take(out, idx)
    recon = ad.sum(ad.square(ad.sub(y, g)))
    total = recon
    adv_val = 0.0
    if adversarial and gamma > 0:
        prob = ad.mean(ad.sigmoid(prior.discriminator(out)))
        adv = ad.mul(ad.log(ad.clamp(prob, eps, 1.0 - eps)), -gamma)
        adv_val = adv.item()
        total = ad.add(recon, adv)
    grad = J = None
    if with_grad:
        total.backward()
        n_sim = aam.pdm.n_similarity
        S = aam.pdm.basis
        grad = np.zeros(aam.n_parameters)
        grad[n_sim:] = S[:, n_sim:].T @ shape.grad.reshape(-1)
        # image path: d/dp of ||y - g||^2 through the sampled texture
        sd = _rows(steepest_descent_images(img, aam.pdm, p, aam.tri, aam.frame, aam.dw_dp), vsel)
        r = y - g.data
        u = am.photometric_vjp(tm, gain, 2.0 * prior.kappa * r, vsel)
        grad += sd.T @ u
        J = prior.kappa * am.photometric_jacobian(tm, gain, sd, vsel)
    return ObjectiveValue(recon.item() + adv_val, recon.item(), adv_val, grad, J, n_out)


def composite_objective(image, p, aam: AAM, prior: GanPrior, config: GanFitConfig | None = None):
    """``(F(p), grad_p F)`` for the reconstruction plus adversarial objective."""
    config = config or GanFitConfig()
    _require(prior, aam)
    img = check_image(image)
    p = check_vector(p, aam.n_parameters, "p")
    v = _evaluate(img, p, aam, prior, config.gamma, config.eps, config.sigma)
    return v.total, v.grad


def objective_terms(image, p, aam: AAM, prior: GanPrior, config: GanFitConfig | None = None):
    """``(reconstruction, adversarial)`` terms of the objective, without gradients."""
    config = config or GanFitConfig()
    _require(prior, aam)
    v = _evaluate(check_image(image), check_vector(p, aam.n_parameters, "p"), aam, prior,
                  config.gamma, config.eps, config.sigma, with_grad=False)
    return v.reconstruction, v.adversarial


def reconstruction_objective(image, p, aam: AAM, prior: GanPrior, sigma: float | None = None):
    """``(||y(I[p]) - G(mask(p))||^2, gradient)``; never touches the discriminator."""
    _require(prior, aam)
    v = _evaluate(check_image(image), check_vector(p, aam.n_parameters, "p"), aam, prior,
                  0.0, 1e-6, sigma, adversarial=False)
    return v.total, v.grad


def _fit(img, p0, aam, prior, config: GanFitConfig, adversarial: bool) -> FitReport:
    start = time.perf_counter()

    def objective(q):
        try:
            v = _evaluate(img, q, aam, prior, config.gamma, config.eps, config.sigma,
                          adversarial=adversarial)
        except NumericalError:
            return np.inf, None, None, np.inf, np.inf, aam.frame.n_pixels
        return v.total, v.grad, v.jacobian, v.reconstruction, v.adversarial, v.out_of_bounds

    q, trace, norms, converged, diverged, extras = descend(objective, p0, config.descent_config())
    shape = aam.pdm.instance(q)
    try:
        c = recover_appearance(img, q, aam, prior, "project")
    except NumericalError:
        c = np.zeros(aam.appearance.n_components)
    rep = FitReport(q, c, shape, trace, len(trace) - 1, converged, int(extras[-1][2]),
                    time.perf_counter() - start, norms, diverged, is_degenerate(shape, aam.tri))
    rep.traces = {"reconstruction": [e[0] for e in extras], "adversarial": [e[1] for e in extras]}
    if config.recovery == "generator":
        rep.traces["generator_texture"] = recover_appearance(img, q, aam, prior, "generator")
    return rep


def gan_fit(image, p_init, aam: AAM, prior: GanPrior, config: GanFitConfig | None = None) -> FitReport:
    """Preconditioned gradient descent with step halving on the composite objective."""
    config = config or GanFitConfig()
    _require(prior, aam)
    img = check_image(image)
    p0 = check_vector(p_init, aam.n_parameters, "p_init")
    return _fit(img, p0, aam, prior, config, adversarial=True)


def reconstruction_fit(image, p_init, aam: AAM, prior: GanPrior,
                       config: GanFitConfig | None = None) -> FitReport:
    """The same descent on the reconstruction term alone (discriminator unused)."""
    config = config or GanFitConfig()
    _require(prior, aam)
    img = check_image(image)
    p0 = check_vector(p_init, aam.n_parameters, "p_init")
    return _fit(img, p0, aam, prior, config, adversarial=False)


def recover_appearance(image, p_final, aam: AAM, prior: GanPrior | None = None, mode: str = "project"):
    """Appearance at a fitted shape.

    ``project`` returns least-squares appearance parameters ``c``;
    ``generator`` returns the generator's ``(1, R, R)`` output at ``p_final``.
    """
    if mode == "project":
        return optimal_appearance(image, check_vector(p_final, aam.n_parameters, "p_final"), aam)
    if mode == "generator":
        _require(prior, aam)
        mask = soft_rasterize(aam.pdm.nonrigid(p_final), aam.tri, prior.resolution, prior.sigma)
        return prior.generator(mask).data[0].copy()
    raise ValueError("mode must be 'project' or 'generator'")
