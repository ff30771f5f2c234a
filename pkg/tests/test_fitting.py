from __future__ import annotations

import numpy as np
import pytest

from aamgan.exceptions import DimensionError
from aamgan.fitting import (FitConfig, composed_update, descend, gradient_descent_fit, optimal_appearance,
                            project_out_fit, pyramid_fit, regularized_cost, sic_increment, simultaneous_fit,
                            ssd_cost, ssd_gradient)
from aamgan.geometry import compose_shapes
from aamgan.metrics import convergence_flag
from aamgan.models import build_aam_pyramid
from aamgan.synth import interocular_distance, perturb_init

from conftest import random_params, rendered

GD = FitConfig(solver="gradient_descent", metric="gauss_newton")


def _problem(aam, rng, noise=0.02, seed=0):
    p, c = random_params(aam, rng)
    img = rendered(aam, p, c)
    s = aam.pdm.instance(p)
    p0 = aam.pdm.project(perturb_init(s, noise, seed=seed, mean_shape=s))
    return img, p, c, p0


# fixed point -------------------------------------------------------------------------

@pytest.mark.parametrize("fit", ["po", "sic", "gd"])
def test_fixed_point_at_ground_truth(aam, rng, fit):
    for _ in range(4):
        p, c = random_params(aam, rng)
        img = rendered(aam, p, c)
        if fit == "po":
            rep = project_out_fit(img, p, aam)
        elif fit == "sic":
            rep = simultaneous_fit(img, p, None, aam)
        else:
            rep = gradient_descent_fit(img, p, None, aam, GD)
        assert rep.iterations <= 2 and rep.converged
        assert np.linalg.norm(rep.p_final - p) <= 1e-6


def test_costs_vanish_on_rendered_image(aam, rng):
    p, c = random_params(aam, rng)
    img = rendered(aam, p, c)
    # integer quantisation leaves a small floor
    assert ssd_cost(img, p, c, aam) < 1e-3 * ssd_cost(img, p, np.zeros_like(c), aam) + 1e-4
    np.testing.assert_allclose(optimal_appearance(img, p, aam), c, atol=5e-3)


# recovery -------------------------------------------------------------------------------

def test_project_out_recovers_from_small_noise(aam, rng):
    ok = 0
    for i in range(10):
        img, p, _, p0 = _problem(aam, rng, seed=i)
        rep = project_out_fit(img, p0, aam)
        s = aam.pdm.instance(p)
        ok += convergence_flag(rep.shape_final, s, interocular_distance(s))
    assert ok >= 9


@pytest.mark.parametrize("composition", ["forward", "asymmetric", "bidirectional"])
def test_other_compositions_reduce_cost(aam, rng, composition):
    img, p, _, p0 = _problem(aam, rng, seed=3)
    rep = simultaneous_fit(img, p0, None, aam, FitConfig(composition=composition))
    assert rep.cost_trace[-1] < 1e-2 * rep.cost_trace[0]
    assert np.linalg.norm(rep.p_final - p) < np.linalg.norm(p0 - p)


def test_po_and_sic_agree_in_span(aam, rng):
    for i in range(5):
        img, _, _, p0 = _problem(aam, rng, seed=10 + i)
        a = project_out_fit(img, p0, aam)
        b = simultaneous_fit(img, p0, None, aam)
        assert abs(a.cost_trace[-1] - b.cost_trace[-1]) <= 1e-6 * a.cost_trace[0]


def test_schur_matches_direct(aam, rng):
    for i in range(5):
        img, _, c, p0 = _problem(aam, rng, seed=20 + i)
        c0 = c + 0.01 * rng.normal(size=c.shape)
        dp1, dc1 = sic_increment(img, p0, c0, aam, sic_solver="direct")
        dp2, dc2 = sic_increment(img, p0, c0, aam, sic_solver="schur")
        z1, z2 = np.concatenate([dp1, dc1]), np.concatenate([dp2, dc2])
        assert np.linalg.norm(z1 - z2) <= 1e-8 * np.linalg.norm(z1)


# composition special cases ------------------------------------------------------------

def test_asymmetric_endpoints_bit_identical(aam, rng):
    p, _ = random_params(aam, rng)
    d1, d2 = rng.normal(size=p.shape) * 0.1, rng.normal(size=p.shape) * 0.1
    fwd = composed_update(aam, p, d1, None, "forward")
    inv = composed_update(aam, p, None, d2, "inverse")
    assert composed_update(aam, p, d1, d2, "asymmetric", 1.0).tobytes() == fwd.tobytes()
    assert composed_update(aam, p, d1, d2, "asymmetric", 0.0).tobytes() == inv.tobytes()
    bi = composed_update(aam, p, d1, d2, "bidirectional")
    np.testing.assert_array_equal(bi, compose_shapes(aam.pdm, aam.tri, fwd, d2, "inverse"))


@pytest.mark.parametrize("alpha, composition", [(1.0, "forward"), (0.0, "inverse")])
def test_asymmetric_fit_endpoints_bit_identical(aam, rng, alpha, composition):
    img, _, _, p0 = _problem(aam, rng, seed=4)
    a = simultaneous_fit(img, p0, None, aam, FitConfig(composition="asymmetric", alpha=alpha, max_iters=5))
    b = simultaneous_fit(img, p0, None, aam, FitConfig(composition=composition, max_iters=5))
    assert a.p_final.tobytes() == b.p_final.tobytes()
    assert a.cost_trace == b.cost_trace


# gradient descent ---------------------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 2.0])
def test_ssd_gradient_matches_finite_differences(aam, rng, lam):
    img, p, c, p0 = _problem(aam, rng, seed=5)
    c = c + 0.01 * rng.normal(size=c.shape)
    gp, gc = ssd_gradient(img, p0, c, aam, lam)
    cost = (lambda a, b: regularized_cost(img, a, b, aam, lam)) if lam else \
        (lambda a, b: ssd_cost(img, a, b, aam))
    h = 1e-5
    for _ in range(5):
        dp, dc = rng.normal(size=p.shape), rng.normal(size=c.shape)
        fd = (cost(p0 + h * dp, c + h * dc) - cost(p0 - h * dp, c - h * dc)) / (2 * h)
        assert gp @ dp + gc @ dc == pytest.approx(fd, rel=1e-3)


@pytest.mark.parametrize("metric", ["identity", "jacobi", "gauss_newton"])
def test_backtracking_keeps_cost_monotone(aam, rng, metric):
    img, _, _, p0 = _problem(aam, rng, noise=0.05, seed=6)
    rep = gradient_descent_fit(img, p0, None, aam, FitConfig(solver="gradient_descent", metric=metric,
                                                               max_iters=15))
    assert np.all(np.diff(rep.cost_trace) <= 0)
    assert rep.iterations == len(rep.cost_trace) - 1


def test_descend_on_quadratic():
    A = np.diag([1.0, 10.0, 100.0])

    def objective(q):
        return float(q @ A @ q), 2 * A @ q, np.sqrt(A)

    q, trace, norms, conv, div, _ = descend(objective, np.ones(3), FitConfig(solver="gradient_descent",
                                                                              metric="gauss_newton"))
    assert conv and not div
    np.testing.assert_allclose(q, 0.0, atol=1e-8)
    assert len(trace) <= 3


def test_gd_without_backtracking_can_diverge(aam, rng):
    img, _, _, p0 = _problem(aam, rng, seed=7)
    cfg = FitConfig(solver="gradient_descent", metric="identity", backtracking=False, step=1e3,
                    max_iters=10)
    rep = gradient_descent_fit(img, p0, None, aam, cfg)
    assert rep.diverged or rep.cost_trace[-1] > rep.cost_trace[0]


# pyramid ---------------------------------------------------------------------------------

def test_pyramid_fit(corpus):
    imgs = [r.image for r in corpus]
    shapes = [r.shape for r in corpus]
    levels = build_aam_pyramid(imgs, shapes, levels=2, frame_size=64, shape_variance=0.98,
                               appearance_variance=0.95)
    rec = corpus[0]
    p0 = levels[0].pdm.project(perturb_init(rec.shape, 0.03, seed=1, mean_shape=levels[0].pdm.mean_shape))
    rep = pyramid_fit(rec.image, p0, levels, FitConfig(pyramid_levels=2))
    single = project_out_fit(rec.image, p0, levels[0])
    assert rep.iterations == len(rep.cost_trace) - 1 >= 1
    err = np.linalg.norm(rep.shape_final - rec.shape, axis=1).mean()
    err0 = np.linalg.norm(levels[0].pdm.instance(p0) - rec.shape, axis=1).mean()
    assert err < err0
    assert rep.shape_final.shape == single.shape_final.shape
    with pytest.raises(DimensionError):
        pyramid_fit(rec.image, p0, levels, FitConfig(pyramid_levels=1))


# configuration ----------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(max_iters=0), dict(tol=0), dict(lam=-1), dict(alpha=1.5),
                                    dict(composition="sideways"), dict(solver="newton"),
                                    dict(metric="bfgs"), dict(step=0), dict(sic_solver="qr")])
def test_fit_config_validation(kwargs):
    with pytest.raises(ValueError):
        FitConfig(**kwargs)


def test_wrong_parameter_length(aam):
    with pytest.raises(Exception):
        project_out_fit(np.zeros((64, 64)), np.zeros(aam.n_parameters + 1), aam)
