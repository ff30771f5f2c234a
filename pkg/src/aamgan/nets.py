"""Conditional U-Net generator, PatchGAN discriminator and adversarial training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import InsufficientDataError, NumericalError, TensorShapeError

LEAK = 0.2


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    batch_size: int = 32
    epochs: int = 100
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_l1: float = 100.0
    adv_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "beta1", "beta2", "eps", "lambda_l1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("Adam betas must be < 1")


class _Net:
    """Parameter container shared by both networks."""
    layout: list = []

    def __init__(self, resolution: int = 64, seed=0):
        if resolution % 8:
            raise ValueError("resolution must be a multiple of 8")
        self.resolution = int(resolution)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in self.layout:
            data = rng.normal(0.0, self._init_std(name, shape), shape) if name.endswith(".w") else np.zeros(shape)
            self.params[name] = Tensor(data, requires_grad=True)
        self.trained = False

    @staticmethod
    def _init_std(name: str, shape) -> float:
        # He initialisation for leaky-ReLU stacks; there are no normalisation layers
        # to rescue a fixed small std.  Transposed convs (C_in, C_out, k, k) at
        # stride 2 see a quarter of their kernel per output pixel.
        if name.startswith("dec"):
            fan_in = shape[0] * shape[2] * shape[3] / 4
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        return float(np.sqrt(2.0 / (1.0 + LEAK ** 2) / fan_in))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict, trained: bool = True):
        for k, t in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise TensorShapeError("load_state_dict", t.shape, arr.shape)
            t.data = arr.copy()
        self.trained = trained

    def _check_input(self, x: Tensor, name: str) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        R = self.resolution
        if x.ndim != 4 or x.shape[1:] != (1, R, R):
            raise TensorShapeError(name, x.shape, (1, R, R))
        return x

    def _conv(self, x, name, stride=2, pad=1):
        return ad.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride, pad)

    def _deconv(self, x, name, stride=2, pad=1):
        return ad.conv_transpose2d(x, self.params[name + ".w"], self.params[name + ".b"], stride, pad)


class Generator(_Net):
    """Three-level U-Net: mask ``(N, 1, R, R)`` in [0, 1] -> image in [-1, 1]."""
    layout = [
        ("enc1.w", (16, 1, 4, 4)), ("enc1.b", (16,)),
        ("enc2.w", (32, 16, 4, 4)), ("enc2.b", (32,)),
        ("enc3.w", (64, 32, 4, 4)), ("enc3.b", (64,)),
        ("dec3.w", (64, 32, 4, 4)), ("dec3.b", (32,)),
        ("dec2.w", (64, 16, 4, 4)), ("dec2.b", (16,)),
        ("dec1.w", (32, 1, 4, 4)), ("dec1.b", (1,)),
    ]

    def forward(self, mask) -> Tensor:
        x = self._check_input(mask, "generator_forward")
        x = ad.sub(ad.mul(x, 2.0), 1.0)
        e1 = ad.leaky_relu(self._conv(x, "enc1"), LEAK)
        e2 = ad.leaky_relu(self._conv(e1, "enc2"), LEAK)
        e3 = ad.leaky_relu(self._conv(e2, "enc3"), LEAK)
        d3 = ad.relu(self._deconv(e3, "dec3"))
        d2 = ad.relu(self._deconv(ad.concat([d3, e2], axis=1), "dec2"))
        return ad.tanh(self._deconv(ad.concat([d2, e1], axis=1), "dec1"))

    __call__ = forward


class Discriminator(_Net):
    """Three strided convolutions producing an ``(R/8, R/8)`` patch logit map."""
    layout = [
        ("conv1.w", (16, 1, 4, 4)), ("conv1.b", (16,)),
        ("conv2.w", (32, 16, 4, 4)), ("conv2.b", (32,)),
        ("conv3.w", (1, 32, 4, 4)), ("conv3.b", (1,)),
    ]
    geometry = [(4, 2, 1), (4, 2, 1), (4, 2, 1)]  # (kernel, stride, pad) per layer

    def forward(self, image) -> Tensor:
        x = self._check_input(image, "discriminator_forward")
        h = ad.leaky_relu(self._conv(x, "conv1"), LEAK)
        h = ad.leaky_relu(self._conv(h, "conv2"), LEAK)
        return self._conv(h, "conv3")

    __call__ = forward

    def receptive_field(self, i: int, j: int):
        """Input window ``(row0, row1, col0, col1)`` (exclusive ends, unclipped)
        that logit ``(i, j)`` can see."""
        lo_r, lo_c, size = i, j, 1
        for k, s, p in reversed(self.geometry):
            lo_r, lo_c = lo_r * s - p, lo_c * s - p
            size = (size - 1) * s + k
        return lo_r, lo_r + size, lo_c, lo_c + size


def generator_forward(net: Generator, mask) -> Tensor:
    return net.forward(mask)


def discriminator_forward(net: Discriminator, image) -> Tensor:
    return net.forward(image)


class Adam:
    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    d_loss: list = field(default_factory=list)
    g_adv: list = field(default_factory=list)
    g_l1: list = field(default_factory=list)

    def as_dict(self):
        return {"d_loss": list(self.d_loss), "g_adv": list(self.g_adv), "g_l1": list(self.g_l1)}


def _check_finite(value, what, step):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} at training step {step}")


def train_gan(masks, images, config: TrainConfig | None = None, generator: Generator | None = None,
              discriminator: Discriminator | None = None, callback=None):
    """Alternating pix2pix-style training on ``(mask, image)`` pairs.

    ``masks`` and ``images`` are ``(N, R, R)`` arrays; images in [-1, 1].
    Returns ``(generator, discriminator, history)``; history holds per-epoch
    means of the discriminator loss and the two generator terms (the plain
    L1, before weighting).
    """
    config = config or TrainConfig()
    masks = np.asarray(masks, dtype=np.float64)
    images = np.asarray(images, dtype=np.float64)
    if masks.ndim != 3 or masks.shape != images.shape or len(masks) == 0:
        if len(masks) == 0:
            raise InsufficientDataError("empty training set")
        raise TensorShapeError("train_gan", masks.shape, images.shape)
    n, R, _ = masks.shape
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    G = generator or Generator(R, np.random.default_rng(seeds[0]))
    D = discriminator or Discriminator(R, np.random.default_rng(seeds[1]))
    rng = np.random.default_rng(seeds[2])
    opt_g = Adam(G.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    opt_d = Adam(D.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    use_adv = config.adv_weight > 0
    hist = TrainHistory()
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            m = Tensor(masks[idx][:, None])
            real = Tensor(images[idx][:, None])
            fake = G(m)
            d_val = 0.0
            if use_adv:
                D.zero_grad()
                fake_const = Tensor(fake.data)
                d_loss = ad.mul(ad.add(ad.bce_with_logits(D(real), 1.0),
                                       ad.bce_with_logits(D(fake_const), 0.0)), 0.5)
                d_val = d_loss.item()
                _check_finite(d_val, "discriminator loss", step)
                d_loss.backward()
                opt_d.step()
            G.zero_grad()
            l1 = ad.l1_loss(fake, real)
            g_loss = ad.mul(l1, config.lambda_l1)
            adv_val = 0.0
            if use_adv:
                adv = ad.bce_with_logits(D(fake), 1.0)
                adv_val = adv.item()
                g_loss = ad.add(g_loss, ad.mul(adv, config.adv_weight))
            _check_finite(g_loss.item(), "generator loss", step)
            g_loss.backward()
            opt_g.step()
            D.zero_grad()
            sums += (d_val, adv_val, l1.item())
            batches += 1
            step += 1
        hist.d_loss.append(sums[0] / batches)
        hist.g_adv.append(sums[1] / batches)
        hist.g_l1.append(sums[2] / batches)
        if callback is not None:
            callback(epoch, hist)
    G.trained = True
    D.trained = True
    return G, D, hist
