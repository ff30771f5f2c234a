from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from aamgan.exceptions import DegenerateGeometryError, ShapeMismatchError
from aamgan.geometry import (bilinear_sample, build_reference_frame, compose_shapes, delaunay_triangulate,
                             render_texture, sample_to_reference, steepest_descent_images, triangle_areas,
                             warp_image, warp_jacobian)

from conftest import random_params, rendered


def _frame(points, size=40):
    pts = np.asarray(points, dtype=np.float64)
    tri = delaunay_triangulate(pts)
    return tri, build_reference_frame(pts, tri, size, size)


# triangulation ----------------------------------------------------------------------

def test_single_triangle():
    tri = delaunay_triangulate([[0, 0], [4, 0], [1, 3]])
    assert tri.triangles.tolist() == [[0, 1, 2]]


def test_square_two_triangles_share_diagonal():
    tri = delaunay_triangulate([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert tri.n_triangles == 2
    a, b = (set(t) for t in tri.triangles.tolist())
    shared = a & b
    assert len(shared) == 2 and shared in ({0, 2}, {1, 3})


def test_euler_count_on_68_point_mean_face():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 2 * np.pi, 28, endpoint=False)
    outline = np.stack([30 * np.cos(t), 38 * np.sin(t)], axis=1)
    inner = rng.uniform(-18, 18, (40, 2))
    base = np.vstack([outline, inner])
    mean = np.mean([base + rng.normal(0, 0.5, base.shape) for _ in range(5)], axis=0)
    tri = delaunay_triangulate(mean)
    h = len(ConvexHull(mean).vertices)
    assert tri.n_triangles == 2 * 68 - 2 - h


def test_collinear_rejected():
    with pytest.raises(DegenerateGeometryError):
        delaunay_triangulate([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_triangulation_deterministic(aam):
    a = delaunay_triangulate(aam.pdm.mean_shape).triangles
    b = delaunay_triangulate(aam.pdm.mean_shape.copy()).triangles
    assert a.tobytes() == b.tobytes()


def test_frame_bijection(aam):
    fr = aam.frame
    assert fr.n_pixels == int(fr.mask.sum())
    np.testing.assert_array_equal(np.sort(fr.pixel_index), np.flatnonzero(fr.mask))


# warping ------------------------------------------------------------------------------

def test_identity_warp_reads_pixels(aam, rng):
    img = rng.integers(0, 256, (64, 64)).astype(np.float64)
    ref = aam.frame.reference
    out = warp_image(img, ref, ref, aam.tri, aam.frame)
    np.testing.assert_allclose(out, img.reshape(-1)[aam.frame.pixel_index], atol=1e-9)


def test_identity_warp_with_recomputed_barycentrics(aam, rng):
    img = rng.integers(0, 256, (64, 64)).astype(np.float64)
    ref = aam.frame.reference.copy() + 0.0
    ref.flags.writeable = True
    out = warp_image(img, ref + 1e-300, ref, aam.tri, aam.frame)
    np.testing.assert_allclose(out, img.reshape(-1)[aam.frame.pixel_index], atol=1e-9)


def test_constant_image_constant_texture(aam):
    out = warp_image(np.full((64, 64), 77.0), aam.frame.reference, aam.frame.reference * 0.9 + 3,
                     aam.tri, aam.frame)
    np.testing.assert_allclose(out, 77.0, atol=1e-12)


def test_ramp_translation():
    pts = np.array([[5, 5], [30, 6], [20, 30], [8, 25]], dtype=np.float64)
    tri, fr = _frame(pts)
    yy, xx = np.mgrid[0:40, 0:60]
    ramp = xx.astype(np.float64)
    out = warp_image(ramp, pts, pts + [5, 0], tri, fr)
    np.testing.assert_allclose(out, fr.pixel_coords[:, 0] + 5, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-50, 50),
       st.lists(st.floats(-4, 4), min_size=6, max_size=6))
def test_affine_image_transports_exactly(a, b, c, jitter):
    pts = np.array([[6.0, 6.0], [30.0, 8.0], [14.0, 30.0]])
    tri, fr = _frame(pts)
    dst = pts + np.reshape(jitter, (3, 2)) + [10, 5]
    yy, xx = np.mgrid[0:60, 0:60].astype(np.float64)
    img = a * xx + b * yy + c
    # affine map reference -> dst, evaluated on frame pixels
    A = np.linalg.lstsq(np.hstack([pts, np.ones((3, 1))]), dst, rcond=None)[0]
    pos = np.hstack([fr.pixel_coords, np.ones((fr.n_pixels, 1))]) @ A
    expect = a * pos[:, 0] + b * pos[:, 1] + c
    out = warp_image(img, pts, dst, tri, fr)
    np.testing.assert_allclose(out, expect, atol=1e-9 * (1 + abs(a) + abs(b) + abs(c)) * 60)


def test_warp_shape_mismatch(aam):
    with pytest.raises(ShapeMismatchError):
        warp_image(np.zeros((64, 64)), aam.frame.reference, aam.frame.reference[:-1], aam.tri, aam.frame)


def test_sample_p0_is_crop(aam, rng):
    img = rng.uniform(0, 255, (64, 64))
    out = sample_to_reference(img, np.zeros(aam.n_parameters), aam.pdm, aam.tri, aam.frame)
    np.testing.assert_allclose(out, img.reshape(-1)[aam.frame.pixel_index], atol=1e-9)


def test_sample_outside_image_flags_everything(aam):
    p = np.zeros(aam.n_parameters)
    p[0] = 1e4  # x translation far to the right
    vals, out = sample_to_reference(np.ones((64, 64)), p, aam.pdm, aam.tri, aam.frame, return_outside=True)
    assert out.all() and np.all(vals == 0)


def test_render_sample_round_trip(aam, rng):
    for _ in range(5):
        p, c = random_params(aam, rng)
        img = rendered(aam, p, c)
        tex = sample_to_reference(img, p, aam.pdm, aam.tri, aam.frame)
        gain = 40.0 * np.sqrt(aam.appearance.n_pixels)
        expect = gain * aam.appearance.instance(c) + 128.0
        # the rendered image is quantised to integers: half a gray level per pixel
        assert np.max(np.abs(tex - expect)) <= 1.0


def test_bilinear_sample_outside_zero():
    img = np.arange(16, dtype=np.float64).reshape(4, 4)
    vals, out = bilinear_sample(img, np.array([[-0.1, 1.0], [1.5, 1.5], [3.0, 3.0], [3.01, 0]]))
    assert out.tolist() == [True, False, False, True]
    assert vals[1] == pytest.approx(7.5) and vals[2] == 15.0 and vals[0] == 0.0


# Jacobians ------------------------------------------------------------------------------

def _smooth_image(size=64):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return 120 + 60 * np.sin(xx / 7.0) * np.cos(yy / 9.0) + 0.8 * xx


def test_translation_columns_constant(aam):
    J = warp_jacobian(aam.pdm, np.zeros(aam.n_parameters), aam.tri, aam.frame)
    tx = aam.pdm.basis[0, 0]
    np.testing.assert_allclose(J[:, 0, 0], tx, atol=1e-12)
    np.testing.assert_allclose(J[:, 1, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(J[:, 1, 1], aam.pdm.basis[1, 1], atol=1e-12)
    np.testing.assert_allclose(J[:, 0, 1], 0.0, atol=1e-12)


def test_steepest_descent_matches_finite_differences(aam):
    rng = np.random.default_rng(7)
    img = _smooth_image()
    h = 1e-4
    errs = []
    for _ in range(20):
        p, _ = random_params(aam, rng)
        sd = steepest_descent_images(img, aam.pdm, p, aam.tri, aam.frame)
        d = rng.normal(size=aam.n_parameters)
        fp = sample_to_reference(img, p + h * d, aam.pdm, aam.tri, aam.frame)
        fm = sample_to_reference(img, p - h * d, aam.pdm, aam.tri, aam.frame)
        fd = (fp - fm) / (2 * h)
        errs.append(np.linalg.norm(sd @ d - fd) / np.linalg.norm(fd))
    assert max(errs) <= 1e-3


def test_zero_gradient_rows(aam):
    sd = steepest_descent_images(np.full((64, 64), 9.0), aam.pdm, np.zeros(aam.n_parameters),
                                 aam.tri, aam.frame)
    assert np.all(sd == 0)


# composition --------------------------------------------------------------------------

def test_compose_zero_is_identity(aam, rng):
    p, _ = random_params(aam, rng)
    for mode in ("forward", "inverse"):
        np.testing.assert_array_equal(compose_shapes(aam.pdm, aam.tri, p, np.zeros_like(p), mode), p)


def test_forward_inverse_first_order(aam, rng):
    for _ in range(10):
        p, _ = random_params(aam, rng)
        dp = rng.normal(size=p.shape)
        dp *= 1e-3 / np.linalg.norm(dp)
        q = compose_shapes(aam.pdm, aam.tri, compose_shapes(aam.pdm, aam.tri, p, dp, "forward"), dp, "inverse")
        assert np.linalg.norm(q - p) <= 1e-5


def test_forward_translation_is_exact(aam, rng):
    p = np.zeros(aam.n_parameters)
    dp = np.zeros_like(p)
    dp[0], dp[1] = 2.0, -1.0
    new = compose_shapes(aam.pdm, aam.tri, p, dp, "forward")
    shift = aam.pdm.instance(new) - aam.pdm.instance(p)
    expect = (aam.pdm.basis[:, :2] @ dp[:2]).reshape(-1, 2)
    np.testing.assert_allclose(shift, expect, atol=1e-12)
    np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-12)


def test_compose_bad_mode(aam):
    with pytest.raises(ValueError):
        compose_shapes(aam.pdm, aam.tri, np.zeros(aam.n_parameters), np.ones(aam.n_parameters), "sideways")


def test_render_background_and_areas(aam):
    tex = np.full(aam.frame.n_pixels, 200.0)
    m = aam.pdm.mean_shape
    shape = (m - m.mean(0)) * 1.2 + 50
    img = render_texture(tex, shape, aam.tri, aam.frame, (100, 100), background=3.0)
    assert img[0, 0] == 3.0 and img[99, 99] == 3.0
    assert img[50, 50] == pytest.approx(200.0, abs=1e-6)
    assert np.all(np.abs(triangle_areas(aam.pdm.mean_shape, aam.tri)) > 0)


def test_minified_render_raises(aam):
    from aamgan.exceptions import NumericalError
    tex = np.full(aam.frame.n_pixels, 200.0)
    with pytest.raises(NumericalError):
        render_texture(tex, aam.pdm.mean_shape * 0.5 + 10, aam.tri, aam.frame, (64, 64))
