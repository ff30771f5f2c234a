from __future__ import annotations

import numpy as np
import pytest

from aamgan import autodiff as ad
from aamgan.autodiff import Tensor
from aamgan.exceptions import InsufficientDataError, TensorShapeError
from aamgan.nets import Adam, Discriminator, Generator, TrainConfig, train_gan


def _pairs(n=4, res=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:res, 0:res]
    masks, imgs = [], []
    for _ in range(n):
        cx, cy, r = rng.uniform(5, 11), rng.uniform(5, 11), rng.uniform(3, 5)
        m = ((xx - cx) ** 2 + (yy - cy) ** 2 < r * r).astype(float)
        masks.append(m)
        imgs.append(np.where(m > 0, 0.6 * np.sin(xx / 2.0), -0.8))
    return np.stack(masks), np.stack(imgs)


def test_output_shapes_and_range():
    G, D = Generator(16, seed=0), Discriminator(16, seed=1)
    out = G(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)))
    assert out.shape == (3, 1, 16, 16) and np.all(np.abs(out.data) <= 1)
    assert D(out).shape == (3, 1, 2, 2)
    assert G(np.zeros((1, 16, 16))).shape == (1, 1, 16, 16)


def test_wrong_input_shape():
    with pytest.raises(TensorShapeError, match="generator_forward"):
        Generator(16)(np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        Generator(12)


def test_same_seed_same_training():
    masks, imgs = _pairs()
    cfg = TrainConfig(epochs=3, batch_size=2, seed=5)
    G1, D1, h1 = train_gan(masks, imgs, cfg)
    G2, D2, h2 = train_gan(masks, imgs, cfg)
    for k, v in G1.state_dict().items():
        np.testing.assert_array_equal(v, G2.state_dict()[k])
    assert h1.as_dict() == h2.as_dict()
    G3, _, _ = train_gan(masks, imgs, TrainConfig(epochs=3, batch_size=2, seed=6))
    assert not np.array_equal(G1.state_dict()["enc1.w"], G3.state_dict()["enc1.w"])


def test_generator_overfits_small_set():
    masks, imgs = _pairs()
    cfg = TrainConfig(epochs=200, batch_size=4, learning_rate=2e-3, seed=0)
    G, D, hist = train_gan(masks, imgs, cfg)
    assert len(hist.g_l1) == len(hist.d_loss) == len(hist.g_adv) == 200
    assert hist.g_l1[-1] * 10 <= hist.g_l1[0]
    assert G.trained and D.trained


def test_pure_reconstruction_limit_skips_discriminator():
    masks, imgs = _pairs()
    D0 = Discriminator(16, seed=3)
    before = D0.state_dict()
    _, D, hist = train_gan(masks, imgs, TrainConfig(epochs=2, batch_size=2, adv_weight=0.0), discriminator=D0)
    for k, v in before.items():
        np.testing.assert_array_equal(v, D.state_dict()[k])
    assert hist.d_loss == [0.0, 0.0] and hist.g_adv == [0.0, 0.0]


def test_patch_receptive_field():
    D = Discriminator(32, seed=0)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 32, 32)), requires_grad=True)
    out = D(x)
    i, j = 1, 2
    g = np.zeros(out.shape)
    g[0, 0, i, j] = 1.0
    out.backward(g)
    r0, r1, c0, c1 = D.receptive_field(i, j)
    assert r1 - r0 == 22 and c1 - c0 == 22
    window = np.zeros((32, 32), dtype=bool)
    window[max(r0, 0):r1, max(c0, 0):c1] = True
    grad = np.abs(x.grad[0, 0])
    assert np.all(grad[~window] == 0) and np.count_nonzero(grad[window]) > 0.5 * window.sum()


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.3, -5.0])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_state_dict_round_trip():
    G = Generator(16, seed=4)
    H = Generator(16, seed=9)
    H.load_state_dict(G.state_dict())
    np.testing.assert_array_equal(G(np.ones((1, 16, 16))).data, H(np.ones((1, 16, 16))).data)
    with pytest.raises(KeyError):
        H.load_state_dict({})


def test_training_input_errors():
    with pytest.raises(InsufficientDataError):
        train_gan(np.zeros((0, 16, 16)), np.zeros((0, 16, 16)))
    with pytest.raises(TensorShapeError):
        train_gan(np.zeros((2, 16, 16)), np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_l1_loss_value():
    assert ad.l1_loss(Tensor([1.0, -1.0]), Tensor([0.0, 1.0])).item() == 1.5
