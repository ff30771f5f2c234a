from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aamgan.models import build_pdm, procrustes_align
from aamgan.synth import (EYE_CENTRES, N_LANDMARKS, Lighting, Noise, Occlusion, augment, face_box,
                          interocular_distance, perturb_init, similarity_fit, synth_corpus, synth_face)


def test_same_seed_bit_identical():
    a, b = synth_face(11), synth_face(11)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.shape, b.shape)
    assert a.shape.shape == (N_LANDMARKS, 2)
    assert not np.array_equal(a.image, synth_face(12).image)


def test_translation_knob_shifts_landmarks_exactly():
    a = synth_face(5, translation=(0.0, 0.0))
    b = synth_face(5, translation=(3.25, -1.5))
    np.testing.assert_allclose(b.shape - a.shape, np.tile([3.25, -1.5], (N_LANDMARKS, 1)), atol=1e-12)


def test_resolution_guard():
    with pytest.raises(ValueError):
        synth_face(0, resolution=16)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([32, 48, 64, 96]))
def test_landmarks_inside_image(seed, res):
    r = synth_face(seed, res)
    assert r.image.shape == (res, res)
    assert np.all(r.shape >= 0) and np.all(r.shape <= res - 1)


def test_first_mode_tracks_expression():
    corpus = synth_corpus(200, seed=1)
    aligned, _ = procrustes_align([r.shape for r in corpus])
    pdm = build_pdm(aligned, n_components=3)
    proj = np.array([pdm.project(s)[pdm.n_similarity] for s in aligned])
    expr = np.array([r.meta["knobs"]["expression"] for r in corpus])
    assert abs(np.corrcoef(proj, expr)[0, 1]) >= 0.8


def test_corpus_deterministic_and_distinct():
    a, b = synth_corpus(4, seed=3), synth_corpus(4, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
    assert not np.array_equal(a[0].image, a[1].image)


# augmentation ------------------------------------------------------------------------

def test_identity_lighting():
    r = synth_face(2)
    out = augment(r, [Lighting(1.0, 0.0)], seed=0)
    np.testing.assert_array_equal(out.image, r.image)


def test_gain_clamps():
    r = synth_face(2)
    out = augment(r, [Lighting(2.0, 5.0)], seed=0)
    np.testing.assert_array_equal(out.image, np.minimum(255, 2 * r.image.astype(int) + 5))


@pytest.mark.parametrize("fraction", [0.1, 0.3, 0.5])
def test_occlusion_fraction(fraction):
    for seed in range(10):
        r = synth_face(seed)
        out = augment(r, [Occlusion(fraction, fill=0.0)], seed=seed)
        x0, y0, x1, y1 = face_box(r.shape)
        bx0, by0, bx1, by1 = out.meta["occlusions"][0]["box"]
        area = (bx1 - bx0) * (by1 - by0)
        assert abs(area / ((x1 - x0) * (y1 - y0)) - fraction) <= 0.02
        changed = out.image[by0:by1, bx0:bx1]
        assert np.all(changed == 0)


def test_occlusion_clipped_and_flagged():
    r = synth_face(0)
    out = augment(r, [Occlusion(box=(-5, -5, 10, 10), fill=0.0)], seed=0)
    occ = out.meta["occlusions"][0]
    assert occ["clipped"] and occ["box"] == (0, 0, 10, 10)
    assert np.all(out.image[:10, :10] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 0.6), st.floats(0.5, 2.0), st.floats(0, 5))
def test_augment_never_moves_landmarks(seed, frac, gain, sigma):
    r = synth_face(seed)
    out = augment(r, [Lighting(gain, 3.0), Occlusion(frac), Noise(sigma)], seed=seed)
    np.testing.assert_array_equal(out.shape, r.shape)


def test_augment_rejects_unknown_op():
    with pytest.raises(TypeError):
        augment(synth_face(0), ["blur"], seed=0)


# initialisation -----------------------------------------------------------------------

def test_interocular_conventions():
    r = synth_face(4)
    a, b = r.shape[EYE_CENTRES[0]], r.shape[EYE_CENTRES[1]]
    assert interocular_distance(r.shape) == pytest.approx(np.hypot(*(a - b)))
    s68 = np.zeros((68, 2))
    s68[36:42] = [0.0, 0.0]
    s68[42:48] = [3.0, 4.0]
    assert interocular_distance(s68) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        interocular_distance(np.zeros((5, 2)))


def test_similarity_fit_recovers_transform():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(10, 2))
    th = 0.4
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    dst = 2.5 * src @ R.T + [3, -1]
    np.testing.assert_allclose(similarity_fit(src, dst), dst, atol=1e-12)


def test_perturb_zero_is_aligned_mean():
    r = synth_face(1)
    mean = synth_face(99).shape
    np.testing.assert_allclose(perturb_init(r.shape, 0.0, seed=4, mean_shape=mean), similarity_fit(mean, r.shape))


def test_perturb_magnitude_monte_carlo():
    r = synth_face(1)
    iod = interocular_distance(r.shape)
    base = perturb_init(r.shape, 0.0)
    disp = [np.linalg.norm(perturb_init(r.shape, 0.05, seed=s) - base, axis=1).mean() / iod for s in range(1000)]
    assert abs(np.mean(disp) - 0.05) <= 0.2 * 0.05
    assert not np.array_equal(perturb_init(r.shape, 0.05, seed=1), perturb_init(r.shape, 0.05, seed=2))
    with pytest.raises(ValueError):
        perturb_init(r.shape, -0.1)
