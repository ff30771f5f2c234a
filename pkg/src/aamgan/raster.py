"""Soft (differentiable) and hard rasterisation of a triangulated shape."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, custom_op
from .exceptions import DegenerateGeometryError
from .geometry import Triangulation, barycentric, triangle_areas


def _grid(resolution):
    R = int(resolution)
    yy, xx = np.mgrid[0:R, 0:R]
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)


def inside_mask(shape, tri: Triangulation, resolution: int) -> np.ndarray:
    """Hard rasterisation, ``(R, R)`` bool.

    A pixel centre is inside when a ray towards +x crosses the region's
    boundary edges an odd number of times; for any shape whose triangles do
    not fold over each other this is exactly the union of the triangles.
    """
    s = np.asarray(shape, dtype=np.float64)
    pts = _grid(resolution)
    e = tri.boundary_edges
    a, b = s[e[:, 0]], s[e[:, 1]]
    px, py = pts[:, 0:1], pts[:, 1:2]
    straddle = (a[None, :, 1] > py) != (b[None, :, 1] > py)
    dy = b[:, 1] - a[:, 1]
    dy = np.where(dy == 0, 1.0, dy)
    x_cross = a[None, :, 0] + (py - a[None, :, 1]) * (b[:, 0] - a[:, 0])[None] / dy[None]
    crossings = (straddle & (px < x_cross)).sum(axis=1)
    return (crossings % 2 == 1).reshape(resolution, resolution)


def triangle_union_mask(shape, tri: Triangulation, resolution: int) -> np.ndarray:
    """Pixel centres covered by at least one triangle (slow reference version)."""
    pts = _grid(resolution)
    bary = barycentric(pts, np.asarray(shape, dtype=np.float64), tri)
    inside = np.nan_to_num(bary.min(axis=-1), nan=-1.0) >= 0
    return inside.any(axis=1).reshape(resolution, resolution)


def boundary_distance(shape, tri: Triangulation, resolution: int):
    """Unsigned distance to the region boundary and the nearest-edge geometry.

    Returns ``(d, edge, t, diff)`` per pixel: the distance, the index of the
    closest boundary edge, the clamped segment parameter and ``pixel - closest``.
    """
    s = np.asarray(shape, dtype=np.float64)
    edges = tri.boundary_edges
    pts = _grid(resolution)
    a = s[edges[:, 0]]
    b = s[edges[:, 1]]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
    ap = pts[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    d2 = (diff * diff).sum(axis=2)
    k = d2.argmin(axis=1)
    rows = np.arange(len(pts))
    return np.sqrt(d2[rows, k]), k, t[rows, k], diff[rows, k]


def soft_rasterize(shape, tri: Triangulation, resolution: int, sigma: float = 1.0) -> Tensor:
    """Occupancy ``sigmoid(-signed_distance / sigma)`` as a ``(1, R, R)`` tensor.

    The signed distance is negative inside the union of the shape's
    triangles.  Gradients flow to the landmark coordinates when ``shape`` is a
    tensor that requires them.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    st = as_tensor(shape)
    s = st.data
    if s.ndim != 2 or s.shape[1] != 2 or not np.all(np.isfinite(s)):
        raise DegenerateGeometryError("shape must be a finite (v, 2) array")
    if np.abs(triangle_areas(s, tri)).sum() < 1e-9:
        raise DegenerateGeometryError("shape region has zero area")
    R = int(resolution)
    d, k, t, diff = boundary_distance(s, tri, R)
    sign = np.where(inside_mask(s, tri, R).ravel(), -1.0, 1.0)
    z = -sign * d / sigma
    val = 0.5 * (1.0 + np.tanh(0.5 * z))

    def back(g):
        # dv/dd = -sign/sigma * v (1 - v);  dd/da = -(diff/d)(1 - t), dd/db = -(diff/d) t
        dv = g.reshape(-1) * (-sign / sigma) * val * (1.0 - val)
        unit = diff / np.maximum(d, 1e-12)[:, None]
        unit[d < 1e-12] = 0.0
        w = dv[:, None] * unit
        out = np.zeros_like(s)
        edges = tri.boundary_edges
        np.add.at(out, edges[k, 0], -w * (1.0 - t)[:, None])
        np.add.at(out, edges[k, 1], -w * t[:, None])
        return (out,)
    return custom_op(val.reshape(1, R, R), (st,), back, "soft_rasterize")
