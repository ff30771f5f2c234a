"""Procedural 29-landmark faces, pixel augmentations and perturbed initialisation.

Landmark layout (0-based)::

    0-8    jaw, left temple -> chin (4) -> right temple
    9-14   brows, three points each (left then right)
    15-17  left eye: outer, centre, inner
    18-20  right eye: inner, centre, outer
    21-24  nose: bridge, tip, left nostril, right nostril
    25-28  mouth: left corner, top, right corner, bottom
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_random_seed, check_shape
from .data import AnnotatedImage

N_LANDMARKS = 29
EYE_CENTRES = (16, 19)
JAW = list(range(0, 9))
BROWS = list(range(9, 15))
MOUTH = list(range(25, 29))

# knob ranges used when a knob is left unspecified
DEFAULT_RANGES = {
    "expression": (-1.0, 1.0),
    "translation": 0.06,   # fraction of resolution
    "scale": (0.92, 1.08),
    "rotation": 8.0,       # degrees
    "gain": (0.9, 1.1),
    "shading": 20.0,       # gray levels across the face
}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _canonical_landmarks(expression, identity):
    """Landmarks in a face-centred frame where the face half-height is 1."""
    wid, eye_sep, mouth_w, nose_len, brow_h = identity
    W = 0.78 * wid
    up, low = 1.05, 1.0 + 0.14 * expression
    pts = np.empty((N_LANDMARKS, 2))
    for k, th in enumerate(np.deg2rad(195.0 - 26.25 * np.arange(9))):
        r = up if np.sin(th) < 0 else low
        pts[k] = [W * np.cos(th), r * np.sin(th)]
    brow_y = -0.52 * brow_h - 0.10 * expression
    for side, base in ((-1, 9), (1, 12)):
        xs = side * np.array([0.62, 0.42, 0.18]) * W * eye_sep
        arch = np.array([0.0, -0.06, -0.01])
        pts[base:base + 3, 0] = xs if side < 0 else xs[::-1]
        pts[base:base + 3, 1] = brow_y + (arch if side < 0 else arch[::-1])
    eye_y = -0.28
    for side, base in ((-1, 15), (1, 18)):
        xs = side * np.array([0.62, 0.40, 0.18]) * W * eye_sep
        pts[base:base + 3, 0] = xs if side < 0 else xs[::-1]
        pts[base:base + 3, 1] = eye_y
    pts[21] = [0.0, -0.18]
    pts[22] = [0.0, 0.12 * nose_len]
    pts[23] = [-0.14 * W, 0.20 * nose_len]
    pts[24] = [0.14 * W, 0.20 * nose_len]
    corner_y = 0.50 - 0.07 * expression
    pts[25] = [-0.34 * mouth_w * W * (1 + 0.1 * expression), corner_y]
    pts[27] = [0.34 * mouth_w * W * (1 + 0.1 * expression), corner_y]
    pts[26] = [0.0, 0.44 - 0.02 * expression]
    pts[28] = [0.0, 0.56 + 0.22 * max(expression, 0.0) + 0.06 * expression]
    return pts, W, up, low


def _ellipse_sd(u, v, cx, cy, ax, ay):
    """First-order signed distance to an ellipse (level value over gradient norm)."""
    du, dv = (u - cx) / ax, (v - cy) / ay
    r = np.sqrt(du ** 2 + dv ** 2)
    gn = np.hypot(du / ax, dv / ay) / np.maximum(r, 1e-12)
    return (r - 1.0) / np.maximum(gn, 1e-12)


def _segment_dist(u, v, a, b):
    d = b - a
    t = np.clip(((u - a[0]) * d[0] + (v - a[1]) * d[1]) / (d @ d), 0.0, 1.0)
    return np.hypot(u - a[0] - t * d[0], v - a[1] - t * d[1])


def _paint(canvas, value, sd, soft):
    """Blend ``value`` where the signed distance ``sd`` is negative."""
    a = _sigmoid(-sd / soft)
    return canvas * (1 - a) + value * a


def synth_face(seed=0, resolution: int = 64, expression: float | None = None,
               translation=None, scale: float | None = None, rotation: float | None = None,
               gain: float | None = None, shading: float | None = None,
               noise: float = 2.0) -> AnnotatedImage:
    """Render one procedural face with exactly known landmarks.

    Unspecified knobs are drawn from the seeded generator.  ``translation`` is
    in pixels relative to the image centre, ``rotation`` in degrees.
    """
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    rng = check_random_seed(seed)
    R = resolution
    draws = {
        "expression": rng.uniform(*DEFAULT_RANGES["expression"]),
        "translation": rng.uniform(-1, 1, 2) * DEFAULT_RANGES["translation"] * R,
        "scale": rng.uniform(*DEFAULT_RANGES["scale"]),
        "rotation": rng.uniform(-1, 1) * DEFAULT_RANGES["rotation"],
        "gain": rng.uniform(*DEFAULT_RANGES["gain"]),
        "shading": rng.uniform(-1, 1) * DEFAULT_RANGES["shading"],
    }
    identity = 1.0 + rng.uniform(-0.03, 0.03, 5)
    tones = rng.uniform(-1, 1, 4)
    expression = draws["expression"] if expression is None else float(expression)
    translation = draws["translation"] if translation is None else np.asarray(translation, float)
    scale = draws["scale"] if scale is None else float(scale)
    rotation = draws["rotation"] if rotation is None else float(rotation)
    gain = draws["gain"] if gain is None else float(gain)
    shading = draws["shading"] if shading is None else float(shading)

    canon, W, up, low = _canonical_landmarks(expression, identity)
    size = 0.30 * R * scale
    th = np.deg2rad(rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    centre = np.array([(R - 1) / 2.0, (R - 1) / 2.0 + 0.02 * R]) + translation
    shape = centre + size * canon @ rot.T

    # pixel grid in canonical coordinates
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float64)
    d = np.stack([xx - centre[0], yy - centre[1]], axis=-1) @ rot / size
    u, v = d[..., 0], d[..., 1]
    soft = 0.6 / size  # anti-aliasing width of about 0.6 px

    img = 55.0 + 25.0 * (yy / R) + 8.0 * tones[0] * (xx / R - 0.5)
    # hair above the forehead
    img = _paint(img, 35.0 + 8 * tones[1], _ellipse_sd(u, v, 0.0, -0.35, W * 1.08, 0.95), soft)
    face_sd = np.where(v < 0, _ellipse_sd(u, v, 0.0, 0.0, W, up), _ellipse_sd(u, v, 0.0, 0.0, W, low))
    skin = 175.0 + 10 * tones[2] - 35.0 * ((u / W) ** 2 + (v / low) ** 2) + shading * u / W
    a = _sigmoid(-face_sd / soft)
    img = img * (1 - a) + skin * a

    for base in (9, 12):
        seg = canon[base:base + 3]
        dist = np.minimum(_segment_dist(u, v, seg[0], seg[1]), _segment_dist(u, v, seg[1], seg[2]))
        img = _paint(img, 70.0, dist - 0.035, soft)
    for outer, centre_i, inner in ((15, 16, 17), (20, 19, 18)):
        c = canon[centre_i]
        ax = abs(canon[outer, 0] - canon[inner, 0]) / 2
        img = _paint(img, 235.0, _ellipse_sd(u, v, c[0], c[1], ax, 0.4 * ax), soft)
        img = _paint(img, 45.0, _ellipse_sd(u, v, c[0], c[1], 0.45 * ax, 0.4 * ax), soft)
    img = _paint(img, 150.0, _segment_dist(u, v, canon[21], canon[22]) - 0.03, soft)
    for k in (23, 24):
        img = _paint(img, 80.0, _ellipse_sd(u, v, canon[k, 0], canon[k, 1], 0.045, 0.03), soft)
    left, top, right, bottom = canon[25], canon[26], canon[27], canon[28]
    mx = (left[0] + right[0]) / 2
    my = (left[1] + right[1]) / 2
    ax = (right[0] - left[0]) / 2
    mouth_sd = np.where(v < my, _ellipse_sd(u, v, mx, my, ax, max(my - top[1], 0.02)),
                        _ellipse_sd(u, v, mx, my, ax, max(bottom[1] - my, 0.02)))
    img = _paint(img, 95.0 + 10 * tones[3], mouth_sd, soft)
    img = _paint(img, 40.0, np.maximum(mouth_sd + 0.02, np.abs(v - my) - 0.25 * max(bottom[1] - my - 0.06, 0.0)), soft)

    img = gain * img
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    lo, hi = shape.min(axis=0), shape.max(axis=0)
    knobs = dict(expression=expression, translation=tuple(float(t) for t in translation),
                 scale=scale, rotation=rotation, gain=gain, shading=shading, seed=seed)
    return AnnotatedImage(img, shape, f"synth:{seed}", (lo[0], lo[1], hi[0], hi[1]), {"knobs": knobs})


def synth_corpus(n: int, seed=0, resolution: int = 64, **knobs) -> list[AnnotatedImage]:
    """``n`` faces whose per-face seeds derive from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(n)
    return [synth_face(np.random.default_rng(s), resolution, **knobs) for s in seeds]


# augmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class Lighting:
    gain: float = 1.0
    bias: float = 0.0


@dataclass(frozen=True)
class Occlusion:
    """A filled box; either an explicit ``box`` (x0, y0, x1, y1, exclusive end)
    or a ``fraction`` of the face box placed at a seeded position."""
    fraction: float | None = None
    box: tuple | None = None
    fill: float | str = "random"


@dataclass(frozen=True)
class Noise:
    sigma: float = 2.0


def face_box(shape) -> tuple:
    """Integer landmark bounding box ``(x0, y0, x1, y1)`` with exclusive end."""
    s = check_shape(shape)
    lo = np.floor(s.min(axis=0)).astype(int)
    hi = np.ceil(s.max(axis=0)).astype(int) + 1
    return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])


def _occlusion_box(rng, fbox, fraction):
    x0, y0, x1, y1 = fbox
    W, H = x1 - x0, y1 - y0
    target = fraction * W * H
    best = None
    aspect = rng.uniform(0.7, 1.4)
    for w in range(1, W + 1):
        h = int(round(target / w))
        if not 1 <= h <= H:
            continue
        score = (abs(w * h - target), abs(np.log(w / h / aspect)))
        if best is None or score < best[0]:
            best = (score, w, h)
    if best is None:
        return None
    _, w, h = best
    bx = x0 + int(rng.integers(0, W - w + 1))
    by = y0 + int(rng.integers(0, H - h + 1))
    return bx, by, bx + w, by + h


def augment(record: AnnotatedImage, ops, seed=0) -> AnnotatedImage:
    """Apply pixel-only augmentations in order; landmarks are never touched."""
    rng = check_random_seed(seed)
    img = record.image.astype(np.float64)
    meta = dict(record.meta)
    h, w = img.shape
    for op in ops:
        if isinstance(op, Lighting):
            img = np.clip(np.rint(op.gain * img + op.bias), 0, 255)
        elif isinstance(op, Noise):
            img = np.clip(np.rint(img + rng.normal(0.0, op.sigma, img.shape)), 0, 255)
        elif isinstance(op, Occlusion):
            if op.box is not None:
                box = tuple(int(round(b)) for b in op.box)
            elif op.fraction is not None:
                if op.fraction <= 0:
                    continue
                box = _occlusion_box(rng, face_box(record.shape), min(op.fraction, 1.0))
                if box is None:
                    continue
            else:
                raise ValueError("Occlusion needs a box or a fraction")
            x0, y0, x1, y1 = box
            cx0, cy0 = max(x0, 0), max(y0, 0)
            cx1, cy1 = min(x1, w), min(y1, h)
            clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
            fill = rng.uniform(20, 235) if op.fill == "random" else float(op.fill)
            if cx1 > cx0 and cy1 > cy0:
                img[cy0:cy1, cx0:cx1] = np.rint(fill)
            meta.setdefault("occlusions", []).append(
                {"box": (cx0, cy0, cx1, cy1), "clipped": clipped})
        else:
            raise TypeError(f"unknown augmentation {op!r}")
    return AnnotatedImage(img.astype(np.uint8), record.shape.copy(), record.source_path,
                          record.bbox, meta)


# initialisation -------------------------------------------------------------------

def interocular_distance(shape) -> float:
    """Eye-centre distance for the 29-point layout; outer-eye-region centroids for 68 points."""
    s = check_shape(shape)
    if s.shape[0] == N_LANDMARKS:
        a, b = s[EYE_CENTRES[0]], s[EYE_CENTRES[1]]
    elif s.shape[0] == 68:
        a, b = s[36:42].mean(axis=0), s[42:48].mean(axis=0)
    else:
        raise ValueError(f"no inter-ocular convention for {s.shape[0]} landmarks")
    return float(np.hypot(*(a - b)))


def similarity_fit(source, target) -> np.ndarray:
    """Least-squares similarity transform of ``source`` onto ``target``."""
    src = check_shape(source)
    dst = check_shape(target, src.shape[0], "target")
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    ms, md = zs.mean(), zd.mean()
    a = np.vdot(zs - ms, zd - md) / np.vdot(zs - ms, zs - ms)
    z = a * (zs - ms) + md
    return np.stack([z.real, z.imag], axis=1)


def perturb_init(ground_truth, magnitude: float, seed=0, mean_shape=None,
                 iod: float | None = None) -> np.ndarray:
    """Similarity-aligned mean shape displaced by seeded translation and scale noise.

    The displacement is rescaled so its mean landmark magnitude equals
    ``magnitude * iod`` exactly.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    gt = check_shape(ground_truth)
    base = gt if mean_shape is None else similarity_fit(mean_shape, gt)
    if magnitude == 0:
        return base.copy()
    iod = interocular_distance(gt) if iod is None else float(iod)
    rng = check_random_seed(seed)
    t = rng.normal(size=2)
    ds = rng.normal(scale=0.1)
    centred = base - base.mean(axis=0)
    rms = np.sqrt((centred ** 2).sum(axis=1).mean())
    disp = t[None, :] + ds * centred / rms
    disp *= magnitude * iod / np.linalg.norm(disp, axis=1).mean()
    return base + disp
