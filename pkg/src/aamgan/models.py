"""Linear shape and appearance models."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_shape, check_vector
from .exceptions import InsufficientDataError, NumericalError, ShapeMismatchError
from .geometry import (ReferenceFrame, Triangulation, build_reference_frame,
                       delaunay_triangulate, render_texture, warp_image)

N_SIMILARITY = 4


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive."""
    if vectors.shape[1] == 0:
        return vectors
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


# Procrustes ----------------------------------------------------------------

def _as_complex(shape):
    return shape[:, 0] + 1j * shape[:, 1]


def _as_real(z):
    return np.stack([z.real, z.imag], axis=1)


def _normalise(z):
    z = z - z.mean()
    return z / np.sqrt(np.sum(np.abs(z) ** 2))


def _align_to(z, target):
    """Best similarity (scale, rotation) mapping centred ``z`` onto ``target``."""
    return (np.vdot(z, target) / np.vdot(z, z)) * z


def _canonical_rotation(m):
    """Rotation putting the major principal axis vertical, landmark 0 upward.

    Depends only on the shape itself, which makes the aligned set invariant
    to a similarity transform applied to all inputs.
    """
    pts = _as_real(m)
    evals, evecs = np.linalg.eigh(pts.T @ pts)
    if evals[1] - evals[0] > 1e-9 * evals[1]:
        axis = evecs[:, 1]
        u = np.exp(1j * (np.pi / 2 - np.arctan2(axis[1], axis[0])))
    else:
        k = int(np.argmax(np.abs(m) > 1e-9))
        u = np.exp(1j * (-np.pi / 2 - np.angle(m[k])))
    rotated = u * m
    for val in rotated.imag:
        if abs(val) > 1e-9:
            if val > 0:
                u = -u
            break
    return u


def procrustes_align(shapes, tol: float = 1e-10, max_iters: int = 100):
    """Generalised Procrustes analysis.

    Returns ``(aligned, mean)`` with ``aligned`` a ``(N, v, 2)`` array and the
    mean normalised to unit centroid size at the origin.
    """
    shapes = [check_shape(s) for s in shapes]
    if len(shapes) < 2:
        raise InsufficientDataError("Procrustes alignment needs at least 2 shapes")
    v = shapes[0].shape[0]
    if any(s.shape[0] != v for s in shapes):
        raise ShapeMismatchError("all shapes must have the same landmark count")
    zs = [_normalise(_as_complex(s)) for s in shapes]
    mean = zs[0]
    for _ in range(max_iters):
        aligned = [_align_to(z, mean) for z in zs]
        new = _normalise(np.mean(aligned, axis=0))
        # keep the orientation of the previous estimate
        rot = np.vdot(new, mean)
        new = new * (rot / abs(rot))
        change = np.sqrt(np.sum(np.abs(new - mean) ** 2))
        mean = new
        if change < tol:
            break
    mean = mean * _canonical_rotation(mean)
    aligned = np.stack([_as_real(_align_to(z, mean)) for z in zs])
    return aligned, _as_real(mean)


def procrustes_residual(aligned, mean) -> float:
    return float(np.sum((np.asarray(aligned) - np.asarray(mean)[None]) ** 2))


# shape model ---------------------------------------------------------------

def similarity_basis(mean_shape) -> np.ndarray:
    """Orthonormal x-translation, y-translation, scale and rotation modes."""
    s = np.asarray(mean_shape, dtype=np.float64)
    v = s.shape[0]
    c = s - s.mean(axis=0)
    modes = np.zeros((2 * v, N_SIMILARITY))
    modes[0::2, 0] = 1.0
    modes[1::2, 1] = 1.0
    modes[:, 2] = c.reshape(-1)
    modes[:, 3] = np.stack([-c[:, 1], c[:, 0]], axis=1).reshape(-1)
    q, r = np.linalg.qr(modes)
    return q * np.sign(np.diag(r))


@dataclass(frozen=True, eq=False)
class PointDistributionModel:
    mean_shape: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    n_similarity: int = N_SIMILARITY
    total_variance: float = 0.0
    truncated: bool = False

    @property
    def n_points(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.basis.shape[1]

    @property
    def n_components(self) -> int:
        return self.basis.shape[1] - self.n_similarity

    @property
    def variance_fraction(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(self.eigenvalues.sum() / self.total_variance)

    def instance(self, p) -> np.ndarray:
        p = check_vector(p, self.n_parameters, "p")
        return self.mean_shape + (self.basis @ p).reshape(-1, 2)

    def project(self, shape) -> np.ndarray:
        s = check_shape(shape, n_points=self.n_points)
        return self.basis.T @ (s - self.mean_shape).reshape(-1)

    def nonrigid(self, p) -> np.ndarray:
        """Shape with the similarity coefficients zeroed (canonical pose)."""
        p = check_vector(p, self.n_parameters, "p").copy()
        p[:self.n_similarity] = 0.0
        return self.instance(p)


def _n_keep(eigenvalues, n_components, variance_fraction):
    total = eigenvalues.sum()
    if variance_fraction is not None and total > 0:
        cum = np.cumsum(eigenvalues) / total
        n_var = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
        n_var = min(n_var, len(eigenvalues))
        return n_var if n_components is None else min(n_var, n_components)
    return len(eigenvalues) if n_components is None else n_components


def build_pdm(shapes, n_components: int | None = None,
              variance_fraction: float | None = None) -> PointDistributionModel:
    """PCA shape model with four orthonormal similarity modes prepended.

    ``shapes`` must already be aligned (see :func:`procrustes_align`).
    """
    X = np.stack([check_shape(s).reshape(-1) for s in shapes])
    if X.shape[0] < 2:
        raise InsufficientDataError("need at least 2 shapes to build a shape model")
    mean = X.mean(axis=0)
    Q = similarity_basis(mean.reshape(-1, 2))
    D = X - mean
    D = D - (D @ Q) @ Q.T
    _, sv, vt = np.linalg.svd(D, full_matrices=False)
    evals_all = sv ** 2 / (X.shape[0] - 1)
    rank = int(np.sum(sv > max(1e-10 * (sv[0] if sv.size else 0.0), 1e-12)))
    total = float(evals_all.sum())
    n_keep = _n_keep(evals_all[:rank], n_components, variance_fraction)
    truncated = False
    if n_keep > rank:
        warnings.warn(f"requested {n_keep} shape components but the data has rank {rank}",
                      RuntimeWarning, stacklevel=2)
        n_keep, truncated = rank, True
    V = vt[:n_keep].T
    # re-orthogonalise against the similarity modes for numerical hygiene
    V = V - Q @ (Q.T @ V)
    V, _ = np.linalg.qr(V) if n_keep else (V, None)
    V = _fix_signs(V)
    basis = np.hstack([Q, V])
    return PointDistributionModel(mean.reshape(-1, 2), basis, evals_all[:n_keep].copy(),
                                  N_SIMILARITY, total, truncated)


def shape_instance(pdm: PointDistributionModel, p) -> np.ndarray:
    return pdm.instance(p)


def project_shape(pdm: PointDistributionModel, shape) -> np.ndarray:
    return pdm.project(shape)


# appearance model ------------------------------------------------------------

def normalise_texture(t) -> np.ndarray:
    """Zero-mean, unit-norm copy of a texture."""
    t = np.asarray(t, dtype=np.float64)
    c = t - t.mean()
    n = np.linalg.norm(c)
    return c / n if n > 0 else c


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    """PCA texture model on a reference frame.

    With ``normalize`` set, training textures are made zero-mean and unit-norm
    and the basis is kept orthogonal to the mean texture.  Input textures are
    then mapped into model units by removing the least-squares gain and bias
    against the mean texture (see :meth:`photometric`), which leaves any
    ``gain * (mean + A c) + bias`` texture exactly equal to ``mean + A c``.
    """
    mean_texture: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    frame: ReferenceFrame
    tri: Triangulation
    normalize: bool = True
    total_variance: float = 0.0
    truncated: bool = False

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.mean_texture.shape[0]

    @property
    def variance_fraction(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(self.eigenvalues.sum() / self.total_variance)

    def instance(self, c) -> np.ndarray:
        c = check_vector(c, self.n_components, "c")
        return self.mean_texture + self.basis @ c

    def project(self, texture) -> np.ndarray:
        return self.basis.T @ (np.asarray(texture, dtype=np.float64) - self.mean_texture)

    # photometric normalisation -------------------------------------------
    def _gain_bias_system(self, valid):
        a = self.mean_texture if valid is None else self.mean_texture[valid]
        n = a.shape[0]
        if n < 3:
            raise NumericalError(f"only {n} in-image pixels; photometric fit undefined")
        G = np.array([[a @ a, a.sum()], [a.sum(), float(n)]])
        return a, np.linalg.inv(G)

    def photometric(self, texture, valid=None):
        """Map a raw texture into model units.

        Returns ``(t_model, gain)``; ``gain`` is 1 when normalisation is off.
        ``valid`` restricts the computation to a subset of pixels (the
        returned texture then has that subset's length).
        """
        t = np.asarray(texture, dtype=np.float64)
        if valid is not None:
            t = t[valid]
        if not self.normalize:
            return t, 1.0
        a, Ginv = self._gain_bias_system(valid)
        g, b = Ginv @ np.array([a @ t, t.sum()])
        if abs(g) < 1e-12:
            g = 1e-12 if g >= 0 else -1e-12
        return (t - b) / g, g

    def photometric_jacobian(self, t_model, gain, J, valid=None):
        """Push a raw-texture Jacobian ``(F, k)`` through :meth:`photometric`."""
        if not self.normalize:
            return J
        a, Ginv = self._gain_bias_system(valid)
        dg, db = Ginv @ np.vstack([a @ J, J.sum(axis=0)])
        return (J - db[None, :] - t_model[:, None] * dg[None, :]) / gain

    def photometric_vjp(self, t_model, gain, u, valid=None):
        """Vector-Jacobian product of :meth:`photometric` for a row vector ``u``."""
        if not self.normalize:
            return u
        a, Ginv = self._gain_bias_system(valid)
        cg, cb = t_model @ u, u.sum()
        # d(gain)/dt = Ginv[0] @ [a, 1], d(bias)/dt = Ginv[1] @ [a, 1]
        return (u - (cg * Ginv[0, 0] + cb * Ginv[1, 0]) * a
                - (cg * Ginv[0, 1] + cb * Ginv[1, 1])) / gain


def build_appearance_model(images, shapes, pdm: PointDistributionModel,
                           tri: Triangulation | None = None,
                           frame: ReferenceFrame | None = None,
                           n_components: int | None = None,
                           variance_fraction: float | None = None,
                           normalize: bool = True) -> AppearanceModel:
    images = list(images)
    shapes = list(shapes)
    if not images:
        raise InsufficientDataError("appearance model needs at least one training image")
    if len(images) != len(shapes):
        raise ShapeMismatchError(f"{len(images)} images but {len(shapes)} shapes")
    ref = pdm.mean_shape
    if tri is None:
        tri = delaunay_triangulate(ref)
    if frame is None:
        hi = np.ceil(ref.max(axis=0)).astype(int) + 2
        frame = build_reference_frame(ref, tri, int(hi[0]), int(hi[1]))
    textures = np.stack([warp_image(img, ref, s, tri, frame) for img, s in zip(images, shapes)])
    if normalize:
        textures = np.stack([normalise_texture(t) for t in textures])
    mean = textures.mean(axis=0)
    X = textures - mean
    if normalize:
        na = np.linalg.norm(mean)
        if na > 0:
            u = mean / na
            X = X - np.outer(X @ u, u)
    n = X.shape[0]
    if n > 1:
        _, sv, vt = np.linalg.svd(X, full_matrices=False)
        evals_all = sv ** 2 / (n - 1)
    else:
        sv = np.zeros(0)
        vt = np.zeros((0, X.shape[1]))
        evals_all = np.zeros(0)
    rank = int(np.sum(sv > max(1e-10 * (sv[0] if sv.size else 0.0), 1e-12)))
    total = float(evals_all.sum())
    n_keep = _n_keep(evals_all[:rank], n_components, variance_fraction)
    truncated = False
    if n_keep > rank:
        warnings.warn(f"requested {n_keep} appearance components but the data has rank {rank}",
                      RuntimeWarning, stacklevel=2)
        n_keep, truncated = rank, True
    A = _fix_signs(vt[:n_keep].T.copy())
    return AppearanceModel(mean, A, evals_all[:n_keep].copy(), frame, tri,
                           bool(normalize), total, truncated)


def appearance_instance(am: AppearanceModel, c) -> np.ndarray:
    return am.instance(c)


# combined model ------------------------------------------------------------------

def _template_gradient(frame: ReferenceFrame, texture) -> np.ndarray:
    img = frame.to_image(texture, fill="nearest")
    gy, gx = np.gradient(img)
    return np.stack([frame.from_image(gx), frame.from_image(gy)], axis=1)


@dataclass(frozen=True, eq=False)
class AAM:
    """Shape model, appearance model and the shared warp machinery."""
    pdm: PointDistributionModel
    appearance: AppearanceModel
    meta: dict = field(default_factory=dict)

    @property
    def tri(self) -> Triangulation:
        return self.appearance.tri

    @property
    def frame(self) -> ReferenceFrame:
        return self.appearance.frame

    @property
    def n_parameters(self) -> int:
        return self.pdm.n_parameters

    @cached_property
    def dw_dp(self) -> np.ndarray:
        from .geometry import warp_jacobian
        return warp_jacobian(self.pdm, np.zeros(self.n_parameters), self.tri, self.frame)

    @cached_property
    def template_sd(self) -> np.ndarray:
        """Steepest-descent images of the mean texture, ``(F, n)``."""
        g = _template_gradient(self.frame, self.appearance.mean_texture)
        return np.einsum("fd,fdn->fn", g, self.dw_dp)

    @cached_property
    def mode_sd(self) -> np.ndarray:
        """Steepest-descent images of every appearance mode, ``(m, F, n)``."""
        A = self.appearance.basis
        out = np.empty((A.shape[1], A.shape[0], self.n_parameters))
        for j in range(A.shape[1]):
            g = _template_gradient(self.frame, A[:, j])
            out[j] = np.einsum("fd,fdn->fn", g, self.dw_dp)
        return out

    def sample(self, image, p, return_outside: bool = False):
        return warp_image(image, self.frame.reference, self.pdm.instance(p),
                          self.tri, self.frame, return_outside=return_outside)


def reference_placement(mean_unit, frame_size: int, margin: int):
    """Scale and offset mapping a unit-size mean shape into the frame."""
    lo = mean_unit.min(axis=0)
    hi = mean_unit.max(axis=0)
    scale = (frame_size - 1 - 2 * margin) / float(np.max(hi - lo))
    offset = (frame_size - 1) / 2.0 - scale * (lo + hi) / 2.0
    return scale, offset


def build_aam(images, shapes, n_shape_components: int | None = None,
              n_appearance_components: int | None = None, frame_size: int = 64,
              normalize: bool = True, shape_variance: float | None = None,
              appearance_variance: float | None = None, margin: int | None = None) -> AAM:
    images = [check_image(im) for im in images]
    shapes = [check_shape(s) for s in shapes]
    aligned, mean = procrustes_align(shapes)
    if margin is None:
        margin = max(2, frame_size // 32)
    scale, offset = reference_placement(mean, frame_size, margin)
    placed = aligned * scale + offset
    pdm = build_pdm(placed, n_shape_components, shape_variance)
    tri = delaunay_triangulate(pdm.mean_shape)
    frame = build_reference_frame(pdm.mean_shape, tri, frame_size, frame_size)
    am = build_appearance_model(images, shapes, pdm, tri, frame, n_appearance_components,
                                appearance_variance, normalize)
    return AAM(pdm, am, {"frame_size": frame_size})


def downsample(image) -> np.ndarray:
    """Half-resolution image; pixel ``(r, c)`` of the result sits at ``(2r, 2c)``."""
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), 1.0, mode="nearest")[::2, ::2]


def build_aam_pyramid(images, shapes, levels: int = 2, frame_size: int = 64, **kwargs) -> list[AAM]:
    """Models for a coarse-to-fine fit, finest level first."""
    images = [check_image(im) for im in images]
    shapes = [check_shape(s) for s in shapes]
    out = []
    for level in range(levels):
        out.append(build_aam(images, shapes, frame_size=frame_size // 2 ** level, **kwargs))
        images = [downsample(im) for im in images]
        shapes = [s / 2.0 for s in shapes]
    return out


def default_render_gain(am: AppearanceModel, contrast: float = 40.0) -> float:
    if not am.normalize:
        return 1.0
    return contrast * np.sqrt(am.n_pixels)


def render_instance(aam: AAM, p, c, image_shape, gain: float | None = None,
                    bias: float | None = None, background=None, exact: bool = True) -> np.ndarray:
    """Synthesise an image whose texture under ``p`` is ``gain*(mean + A c) + bias``."""
    am = aam.appearance
    if gain is None:
        gain = default_render_gain(am)
    if bias is None:
        bias = 128.0 if am.normalize else 0.0
    tex = gain * am.instance(c) + bias
    if background is None:
        background = float(bias)
    return render_texture(tex, aam.pdm.instance(p), aam.tri, aam.frame, image_shape,
                          background=background, exact=exact)
