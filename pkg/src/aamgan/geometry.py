"""Piecewise-affine motion model.

Coordinates follow the image convention used throughout the package: a point
is ``(x, y)`` with ``x`` the column and ``y`` the row, and pixel ``(r, c)`` has
its centre at ``(c, r)``.  Shapes are ``(v, 2)`` float arrays; flattened shape
vectors interleave coordinates as ``x0, y0, x1, y1, ...``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import MatrixRankWarning, spsolve
from scipy.spatial import Delaunay, QhullError

from ._validation import check_image, check_shape
from .exceptions import DegenerateGeometryError, NumericalError, ShapeMismatchError

DEGENERATE_AREA = 1e-9
RENDER_SKIRT = 2.5  # px of extrapolated texture painted around a rendered shape
_INSIDE_TOL = 1e-10


def _freeze(*arrays):
    for a in arrays:
        a.flags.writeable = False


@dataclass(frozen=True, eq=False)
class Triangulation:
    triangles: np.ndarray  # (T, 3) landmark indices

    def __post_init__(self):
        _freeze(self.triangles)

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Edges used by exactly one triangle, as sorted index pairs."""
        edges = np.concatenate([self.triangles[:, [0, 1]],
                                self.triangles[:, [1, 2]],
                                self.triangles[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return uniq[counts == 1]

    def incident(self, n_points: int) -> list[np.ndarray]:
        """Triangle ids touching each landmark."""
        out = [[] for _ in range(n_points)]
        for t, tri in enumerate(self.triangles):
            for k in tri:
                out[k].append(t)
        return [np.asarray(ts, dtype=np.intp) for ts in out]


def delaunay_triangulate(reference) -> Triangulation:
    pts = check_shape(reference, name="reference")
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
        raise DegenerateGeometryError("landmarks are collinear; cannot triangulate")
    try:
        simplices = Delaunay(pts).simplices
    except QhullError as exc:
        raise DegenerateGeometryError(f"triangulation failed: {exc}") from None
    tris = np.sort(simplices, axis=1)
    tris = tris[np.lexsort(tris.T[::-1])]
    return Triangulation(np.ascontiguousarray(tris, dtype=np.intp))


def triangle_areas(shape, tri: Triangulation) -> np.ndarray:
    """Signed triangle areas of ``shape`` under ``tri``."""
    s = np.asarray(shape, dtype=np.float64)
    a, b, c = (s[tri.triangles[:, k]] for k in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


def barycentric(points, shape, tri: Triangulation):
    """Barycentric coordinates of ``points`` w.r.t. every triangle.

    Returns an array ``(n_points, T, 3)``; degenerate triangles give NaN rows.
    """
    pts = np.asarray(points, dtype=np.float64)
    s = np.asarray(shape, dtype=np.float64)
    a = s[tri.triangles[:, 0]]
    e1 = s[tri.triangles[:, 1]] - a
    e2 = s[tri.triangles[:, 2]] - a
    det = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(det) < DEGENERATE_AREA, np.nan, det)
    d = pts[:, None, :] - a[None, :, :]
    l1 = (d[..., 0] * e2[:, 1] - d[..., 1] * e2[:, 0]) * inv
    l2 = (d[..., 1] * e1[:, 0] - d[..., 0] * e1[:, 1]) * inv
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def locate(points, shape, tri: Triangulation):
    """Containing triangle and barycentrics for each point.

    Points outside every triangle get triangle id -1.
    """
    bary = barycentric(points, shape, tri)
    with np.errstate(invalid="ignore"):
        inside = np.all(bary >= -_INSIDE_TOL, axis=-1)
    has = inside.any(axis=1)
    tid = np.where(has, inside.argmax(axis=1), -1)
    rows = np.arange(len(tid))
    b = bary[rows, np.maximum(tid, 0)]
    b[~has] = np.nan
    return tid, b


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """Pixel domain of the reference shape.

    ``pixel_index`` holds the row-major flat index of each masked pixel, so
    texture position ``f`` lives at ``mask.flat[pixel_index[f]]``.
    """
    width: int
    height: int
    mask: np.ndarray
    pixel_index: np.ndarray
    reference: np.ndarray
    triangle_of: np.ndarray
    vertex_index: np.ndarray
    barycentric: np.ndarray

    def __post_init__(self):
        _freeze(self.mask, self.pixel_index, self.reference,
                self.triangle_of, self.vertex_index, self.barycentric)

    @property
    def n_pixels(self) -> int:
        return self.pixel_index.shape[0]

    @cached_property
    def pixel_coords(self) -> np.ndarray:
        rows, cols = np.divmod(self.pixel_index, self.width)
        return np.stack([cols, rows], axis=1).astype(np.float64)

    @cached_property
    def weights(self) -> np.ndarray:
        """Dense ``(F, v)`` matrix mapping landmark coordinates to pixel positions."""
        w = np.zeros((self.n_pixels, self.reference.shape[0]))
        rows = np.arange(self.n_pixels)
        for k in range(3):
            np.add.at(w, (rows, self.vertex_index[:, k]), self.barycentric[:, k])
        w.flags.writeable = False
        return w

    def to_image(self, texture, fill: str | float = "nearest") -> np.ndarray:
        """Scatter a texture vector into an ``(height, width)`` raster.

        ``fill="nearest"`` extends the texture outside the mask by nearest
        neighbour so that finite differences at the mask border stay sane.
        """
        tex = np.asarray(texture, dtype=np.float64)
        img = np.zeros(self.height * self.width)
        img[self.pixel_index] = tex
        img = img.reshape(self.height, self.width)
        if fill == "nearest":
            _, (ri, ci) = ndimage.distance_transform_edt(~self.mask, return_indices=True)
            img = img[ri, ci]
        else:
            img[~self.mask] = float(fill)
        return img

    def from_image(self, image) -> np.ndarray:
        return np.asarray(image, dtype=np.float64).reshape(-1)[self.pixel_index]


def build_reference_frame(reference, tri: Triangulation, width: int, height: int) -> ReferenceFrame:
    ref = check_shape(reference, name="reference")
    if tri.triangles.max() >= ref.shape[0]:
        raise ShapeMismatchError("triangulation indexes beyond the reference landmarks")
    if np.any(np.abs(triangle_areas(ref, tri)) < DEGENERATE_AREA):
        raise DegenerateGeometryError("reference shape has a degenerate triangle")
    rr, cc = np.mgrid[0:height, 0:width]
    pts = np.stack([cc.ravel(), rr.ravel()], axis=1).astype(np.float64)
    tid, bary = locate(pts, ref, tri)
    inside = tid >= 0
    if not inside.any():
        raise DegenerateGeometryError("reference shape covers no pixel of the frame")
    mask = inside.reshape(height, width)
    tid = tid[inside].astype(np.intp)
    return ReferenceFrame(int(width), int(height), mask, np.flatnonzero(inside),
                          ref.copy(), tid, tri.triangles[tid].copy(), bary[inside])


def bilinear_sample(image, points):
    """Bilinear interpolation at ``points``; returns ``(values, outside)``.

    Points outside ``[0, w-1] x [0, h-1]`` sample 0 and are flagged.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = points[:, 0]
    y = points[:, 1]
    outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1) | ~np.isfinite(x) | ~np.isfinite(y)
    xs = np.where(outside, 0.0, x)
    ys = np.where(outside, 0.0, y)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx = xs - x0
    fy = ys - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    vals = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    vals[outside] = 0.0
    return vals, outside


def bilinear_gradient(image, points) -> np.ndarray:
    """Exact spatial derivative ``(d/dx, d/dy)`` of the bilinear interpolant."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = points[:, 0]
    y = points[:, 1]
    outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1) | ~np.isfinite(x) | ~np.isfinite(y)
    xs = np.where(outside, 0.0, x)
    ys = np.where(outside, 0.0, y)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx = xs - x0
    fy = ys - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    gx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    g = np.stack([gx, gy], axis=1)
    g[outside] = 0.0
    return g


def _positions(src, dst, tri, frame):
    if src is frame.reference or np.array_equal(src, frame.reference):
        return frame.weights @ dst
    # src differs from the cached reference: recompute barycentrics,
    # extrapolating from the best triangle for pixels outside src.
    bary = barycentric(frame.pixel_coords, src, tri)
    score = np.nan_to_num(bary.min(axis=-1), nan=-np.inf)
    tid = score.argmax(axis=1)
    b = bary[np.arange(len(tid)), tid]
    verts = tri.triangles[tid]
    return np.einsum("fk,fkd->fd", b, dst[verts])


def warp_image(image, src, dst, tri: Triangulation, frame: ReferenceFrame,
               return_outside: bool = False):
    """Sample ``image`` at the piecewise-affine image of the frame pixels.

    ``src`` is the shape living in the reference frame and ``dst`` the shape
    in ``image``.  Each masked pixel keeps its barycentric coordinates in its
    ``src`` triangle and is sent to the same coordinates in ``dst``.
    """
    img = check_image(image)
    src = check_shape(src, name="src")
    dst = check_shape(dst, n_points=src.shape[0], name="dst")
    if src.shape[0] != frame.reference.shape[0]:
        raise ShapeMismatchError(
            f"shapes have {src.shape[0]} landmarks, triangulation expects {frame.reference.shape[0]}")
    vals, outside = bilinear_sample(img, _positions(src, dst, tri, frame))
    if return_outside:
        return vals, outside
    return vals


def sample_to_reference(image, p, pdm, tri: Triangulation, frame: ReferenceFrame,
                        return_outside: bool = False):
    """``I[p]``: the image sampled on the reference frame under shape ``p``."""
    return warp_image(image, frame.reference, pdm.instance(p), tri, frame,
                      return_outside=return_outside)


def warp_jacobian(pdm, p, tri: Triangulation, frame: ReferenceFrame) -> np.ndarray:
    """``dW/dp`` as an ``(F, 2, n)`` array.

    Barycentric transfer is linear in the destination landmarks and these are
    linear in ``p``, so the result does not depend on ``p``.
    """
    S = pdm.basis
    n = S.shape[1]
    wx = frame.weights @ S[0::2]
    wy = frame.weights @ S[1::2]
    return np.stack([wx, wy], axis=1).reshape(frame.n_pixels, 2, n)


def steepest_descent_images(image, pdm, p, tri: Triangulation, frame: ReferenceFrame,
                            dw_dp: np.ndarray | None = None) -> np.ndarray:
    """``d I[p] / dp`` as an ``(F, n)`` matrix (bilinear-interpolant gradient)."""
    img = check_image(image)
    pos = frame.weights @ pdm.instance(p)
    grad = bilinear_gradient(img, pos)
    if dw_dp is None:
        dw_dp = warp_jacobian(pdm, p, tri, frame)
    return np.einsum("fd,fdn->fn", grad, dw_dp)


def landmark_linear_maps(reference, current, tri: Triangulation) -> np.ndarray:
    """Per-landmark 2x2 linear part of the reference->current warp.

    Each landmark averages the affine maps of its incident triangles.  Current
    triangles with area below ``DEGENERATE_AREA`` are skipped, which clamps the
    map to the remaining valid neighbours.
    """
    ref = np.asarray(reference, dtype=np.float64)
    cur = np.asarray(current, dtype=np.float64)
    t = tri.triangles
    dr = np.stack([ref[t[:, 1]] - ref[t[:, 0]], ref[t[:, 2]] - ref[t[:, 0]]], axis=2)
    dc = np.stack([cur[t[:, 1]] - cur[t[:, 0]], cur[t[:, 2]] - cur[t[:, 0]]], axis=2)
    maps = dc @ np.linalg.inv(dr)
    valid = np.abs(triangle_areas(cur, tri)) >= DEGENERATE_AREA
    v = ref.shape[0]
    acc = np.zeros((v, 2, 2))
    cnt = np.zeros(v)
    for k in range(3):
        np.add.at(acc, t[valid, k], maps[valid])
        np.add.at(cnt, t[valid, k], 1.0)
    out = np.tile(np.eye(2), (v, 1, 1))
    has = cnt > 0
    out[has] = acc[has] / cnt[has, None, None]
    return out


def composition_matrix(pdm, tri: Triangulation, p) -> np.ndarray:
    """First-order map from an increment to the composed parameter change."""
    S = pdm.basis
    v = S.shape[0] // 2
    A = landmark_linear_maps(pdm.mean_shape, pdm.instance(p), tri)
    MS = np.einsum("vab,vbn->van", A, S.reshape(v, 2, -1)).reshape(2 * v, -1)
    return S.T @ MS


def compose_shapes(pdm, tri: Triangulation, p, dp, mode: str = "forward") -> np.ndarray:
    """Compose the current warp with an incremental one at landmark level.

    ``forward`` applies ``s(dp)`` through the current warp; ``inverse`` applies
    the first-order inverse ``s(-dp)``.  The landmark displacement is projected
    back on the basis so the result is always a valid parameter vector.
    """
    p = np.asarray(p, dtype=np.float64)
    dp = np.asarray(dp, dtype=np.float64)
    if mode == "inverse":
        dp = -dp
    elif mode != "forward":
        raise ValueError(f"unknown composition mode {mode!r}")
    if not np.any(dp):
        return p.copy()
    S = pdm.basis
    v = S.shape[0] // 2
    delta = (S @ dp).reshape(v, 2)
    A = landmark_linear_maps(pdm.mean_shape, pdm.instance(p), tri)
    disp = np.einsum("vab,vb->va", A, delta)
    return p + S.T @ disp.reshape(-1)


def is_degenerate(shape, tri: Triangulation) -> bool:
    return bool(np.any(np.abs(triangle_areas(shape, tri)) < DEGENERATE_AREA))


# rendering -----------------------------------------------------------------

def _bilinear_matrix(points, shape_hw):
    h, w = shape_hw
    x, y = points[:, 0], points[:, 1]
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = x - x0
    fy = y - y0
    rows = np.repeat(np.arange(len(x)), 4)
    cols = np.stack([y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1], 1).ravel()
    vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(x), h * w))


def render_texture(texture, dst, tri: Triangulation, frame: ReferenceFrame,
                   image_shape, background=0.0, exact: bool = True) -> np.ndarray:
    """Paint a reference-frame texture into an image under shape ``dst``.

    The plain render inverse-maps every image pixel inside ``dst`` into the
    frame.  With ``exact`` the result is then corrected by the least-norm
    pixel update that makes ``warp_image(result, reference, dst)`` reproduce
    ``texture`` (requires the face not to be minified w.r.t. the frame).
    """
    dst = check_shape(dst, n_points=frame.reference.shape[0], name="dst")
    h, w = image_shape
    if np.isscalar(background):
        out = np.full((h, w), float(background))
    else:
        out = np.array(background, dtype=np.float64, copy=True)
    ref_img = frame.to_image(texture, fill="nearest")

    rr, cc = np.mgrid[0:h, 0:w]
    pts = np.stack([cc.ravel(), rr.ravel()], axis=1).astype(np.float64)
    lo = np.floor(dst.min(axis=0)).astype(int) - 1
    hi = np.ceil(dst.max(axis=0)).astype(int) + 1
    near = ((pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
            & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1]))
    idx = np.flatnonzero(near)
    # Pixels just outside the shape get the extrapolated texture too, so the
    # face edge does not blend with the background when resampled.
    bary = barycentric(pts[idx], dst, tri)
    score = np.nan_to_num(bary.min(axis=-1), nan=-np.inf)
    tid = score.argmax(axis=1)
    bary = bary[np.arange(len(tid)), tid]
    ref_pts = np.einsum("nk,nkd->nd", bary, frame.reference[tri.triangles[tid]])
    skirt = ndimage.distance_transform_edt(~frame.mask)
    dist, off = bilinear_sample(skirt, ref_pts)
    ok = ~off & (dist <= RENDER_SKIRT)
    vals, _ = bilinear_sample(ref_img, ref_pts[ok])
    out.reshape(-1)[idx[ok]] = vals

    if exact:
        pos = frame.weights @ dst
        if (pos.min() < 0) or (pos[:, 0].max() > w - 1) or (pos[:, 1].max() > h - 1):
            raise ValueError("exact render needs the whole shape inside the image")
        B = _bilinear_matrix(pos, (h, w))
        resid = np.asarray(texture, dtype=np.float64) - B @ out.reshape(-1)
        gram = (B @ B.T).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MatrixRankWarning)
            lam = spsolve(gram, resid)
        out = out + (B.T @ lam).reshape(h, w)
        err = np.abs(B @ out.reshape(-1) - np.asarray(texture, dtype=np.float64))
        if not np.all(np.isfinite(out)) or err.max() > 1e-6 * max(1.0, np.abs(texture).max()):
            raise NumericalError("exact render failed: the shape must be magnified (not shrunk) "
                                 "relative to the reference frame")
    return out
