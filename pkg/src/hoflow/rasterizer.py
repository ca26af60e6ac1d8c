"""Z-buffered triangle rasterization with perspective-correct barycentric
attribute interpolation.

Coverage, depth, triangle ids and barycentric weights are computed on
detached geometry; only the interpolated attribute values carry gradients
(back to the per-vertex attributes).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy.sparse
import torch

from .geometry import CameraIntrinsics, Mesh, as_tensor

# TBB in this image is too old for numba; workqueue is deterministic and always available.
numba.config.THREADING_LAYER = "workqueue"

NEAR_PLANE = 0.01
EMPTY = -1


class NearPlaneError(ValueError):
    pass


class NoCoverageError(ValueError):
    pass


@dataclass
class RasterOutput:
    attributes: torch.Tensor | None  # H x W x k, zero where uncovered
    depth: np.ndarray  # H x W, +inf where uncovered
    coverage: np.ndarray  # H x W bool
    triangle_id: np.ndarray  # H x W int64, EMPTY where uncovered
    barycentric: np.ndarray  # H x W x 3, perspective-correct, zero where uncovered

    @property
    def shape(self) -> tuple[int, int]:
        return self.coverage.shape


@numba.njit(cache=True)
def _raster_rows(uv, z, faces, width, row0, row1, depth, tri_id, bary):
    for t in range(faces.shape[0]):
        i0, i1, i2 = faces[t, 0], faces[t, 1], faces[t, 2]
        ax, ay = uv[i0, 0], uv[i0, 1]
        bx, by = uv[i1, 0], uv[i1, 1]
        cx, cy = uv[i2, 0], uv[i2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        flip = area < 0.0
        if flip:
            bx, by, cx, cy = cx, cy, bx, by
            i1, i2 = i2, i1
            area = -area
        za, zb, zc = z[i0], z[i1], z[i2]
        # top-left rule: inward normal of edge (p, q) is (-(qy - py), qx - px)
        nx0, ny0 = -(cy - by), cx - bx
        nx1, ny1 = -(ay - cy), ax - cx
        nx2, ny2 = -(by - ay), bx - ax
        tl0 = nx0 > 0.0 or (nx0 == 0.0 and ny0 > 0.0)
        tl1 = nx1 > 0.0 or (nx1 == 0.0 and ny1 > 0.0)
        tl2 = nx2 > 0.0 or (nx2 == 0.0 and ny2 > 0.0)

        xmin = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        xmax = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(ay, by, cy) - 0.5)), row0)
        ymax = min(int(np.ceil(max(ay, by, cy) - 0.5)), row1 - 1)
        for y in range(ymin, ymax + 1):
            py = y + 0.5
            for x in range(xmin, xmax + 1):
                px = x + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                q0 = b0 / za
                q1 = b1 / zb
                q2 = b2 / zc
                inv_z = q0 + q1 + q2
                d = 1.0 / inv_z
                if d < depth[y, x]:
                    depth[y, x] = d
                    tri_id[y, x] = t
                    p0 = q0 * d
                    if flip:
                        bary[y, x, 0] = p0
                        bary[y, x, 1] = q2 * d
                        bary[y, x, 2] = q1 * d
                    else:
                        bary[y, x, 0] = p0
                        bary[y, x, 1] = q1 * d
                        bary[y, x, 2] = q2 * d


@numba.njit(parallel=True, cache=True)
def _raster_bands(uv, z, faces, width, bounds, depth, tri_id, bary):
    for b in numba.prange(bounds.shape[0] - 1):
        _raster_rows(uv, z, faces, width, bounds[b], bounds[b + 1], depth, tri_id, bary)


@numba.njit(cache=True)
def _points_in_triangles(uv, faces, pts, cell_start, cell_points, width, height, inside):
    for t in range(faces.shape[0]):
        ax, ay = uv[faces[t, 0], 0], uv[faces[t, 0], 1]
        bx, by = uv[faces[t, 1], 0], uv[faces[t, 1], 1]
        cx, cy = uv[faces[t, 2], 0], uv[faces[t, 2], 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, by, cx, cy = cx, cy, bx, by
        x0 = max(int(np.floor(min(ax, bx, cx))), 0)
        x1 = min(int(np.floor(max(ax, bx, cx))), width - 1)
        y0 = max(int(np.floor(min(ay, by, cy))), 0)
        y1 = min(int(np.floor(max(ay, by, cy))), height - 1)
        for gy in range(y0, y1 + 1):
            for gx in range(x0, x1 + 1):
                c = gy * width + gx
                for k in range(cell_start[c], cell_start[c + 1]):
                    i = cell_points[k]
                    if inside[i]:
                        continue
                    px, py = pts[i, 0], pts[i, 1]
                    if ((cx - bx) * (py - by) - (cy - by) * (px - bx) >= 0.0
                            and (ax - cx) * (py - cy) - (ay - cy) * (px - cx) >= 0.0
                            and (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0):
                        inside[i] = True


def points_in_silhouette(mesh: Mesh, cam: CameraIntrinsics, points) -> np.ndarray:
    """Whether each continuous image point (u, v) lies in the closed projected
    silhouette of ``mesh`` (union of its projected triangles)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    inside = np.zeros(pts.shape[0], dtype=np.bool_)
    if pts.shape[0] == 0 or mesh.faces.shape[0] == 0:
        return inside
    W, H = cam.width, cam.height
    gx = np.floor(pts[:, 0])
    gy = np.floor(pts[:, 1])
    ok = (gx >= 0) & (gx < W) & (gy >= 0) & (gy < H)
    cell = np.where(ok, gy * W + gx, W * H).astype(np.int64)
    order = np.argsort(cell, kind="stable")
    cell_start = np.searchsorted(cell[order], np.arange(W * H + 1)).astype(np.int64)
    uv = project_vertices(mesh.vertices.detach().numpy(), cam)
    _points_in_triangles(np.ascontiguousarray(uv), np.ascontiguousarray(mesh.faces), pts,
                         cell_start, order.astype(np.int64), W, H, inside)
    return inside


def project_vertices(vertices: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    cx, cy = cam.principal_point
    uv = np.empty((vertices.shape[0], 2))
    uv[:, 0] = cam.focal * vertices[:, 0] / vertices[:, 2] + cx
    uv[:, 1] = cam.focal * vertices[:, 1] / vertices[:, 2] + cy
    return uv


def rasterize_geometry(mesh: Mesh, cam: CameraIntrinsics, bands: int = 1) -> RasterOutput:
    """Visibility pass only: depth, coverage, triangle ids, barycentrics."""
    verts = mesh.vertices.detach().numpy()
    H, W = cam.height, cam.width
    if verts.shape[0]:
        z = verts[:, 2]
        bad = np.flatnonzero(~(z > NEAR_PLANE))
        if bad.size:
            raise NearPlaneError(
                f"vertex {bad[0]} at depth {z[bad[0]]:.4g} m is in front of the near plane "
                f"({NEAR_PLANE} m); {bad.size} vertices rejected")
    depth = np.full((H, W), np.inf)
    tri_id = np.full((H, W), EMPTY, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if mesh.faces.shape[0]:
        uv = project_vertices(verts, cam)
        bands = max(1, min(int(bands), H))
        bounds = np.linspace(0, H, bands + 1).round().astype(np.int64)
        _raster_bands(np.ascontiguousarray(uv), np.ascontiguousarray(verts[:, 2]),
                      np.ascontiguousarray(mesh.faces), W, bounds, depth, tri_id, bary)
    return RasterOutput(None, depth, tri_id != EMPTY, tri_id, bary)


def interpolate(raster: RasterOutput, faces: np.ndarray, attrs) -> torch.Tensor:
    """Barycentric combination of per-vertex attributes on covered pixels.

    Differentiable with respect to ``attrs``; zero on uncovered pixels.
    """
    attrs = as_tensor(attrs)
    if attrs.dim() == 1:
        attrs = attrs[:, None]
    H, W = raster.shape
    out = torch.zeros((H * W, attrs.shape[1]), dtype=attrs.dtype)
    pix = np.flatnonzero(raster.coverage.ravel())
    if pix.size == 0:
        return out.reshape(H, W, -1)
    tri = faces[raster.triangle_id.ravel()[pix]]
    w = torch.from_numpy(raster.barycentric.reshape(-1, 3)[pix])
    vals = (w[:, :, None] * attrs[torch.from_numpy(tri)]).sum(1)
    out = out.index_put((torch.from_numpy(pix),), vals)
    return out.reshape(H, W, -1)


def rasterize(mesh: Mesh, attrs, cam: CameraIntrinsics, bands: int = 1) -> RasterOutput:
    attrs = as_tensor(attrs)
    if attrs.dim() == 1:
        attrs = attrs[:, None]
    if attrs.shape[0] != mesh.num_vertices:
        raise ValueError(f"attrs has {attrs.shape[0]} rows for {mesh.num_vertices} vertices")
    out = rasterize_geometry(mesh, cam, bands)
    out.attributes = interpolate(out, mesh.faces, attrs)
    return out


def render_silhouette(mesh: Mesh, cam: CameraIntrinsics) -> np.ndarray:
    return rasterize_geometry(mesh, cam).coverage


def attribute_jacobian(raster: RasterOutput, pixel, mesh: Mesh, attrs) -> scipy.sparse.csr_matrix:
    """d attributes[pixel] / d attrs, as a k x (N*k) sparse matrix
    (attrs flattened row-major)."""
    y, x = pixel
    if not raster.coverage[y, x]:
        raise NoCoverageError(f"pixel {(y, x)} is not covered")
    n = mesh.num_vertices
    k = 1 if np.ndim(attrs) == 1 else np.shape(attrs)[1]
    tri = mesh.faces[raster.triangle_id[y, x]]
    w = raster.barycentric[y, x]
    rows, cols, vals = [], [], []
    for c in range(k):
        for vi, wi in zip(tri, w):
            rows.append(c)
            cols.append(vi * k + c)
            vals.append(wi)
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(k, n * k))


def dump_debug(raster: RasterOutput, out_dir, prefix: str = "raster") -> list[Path]:
    """Coverage and normalized-depth PNGs plus raw float32 attribute planes."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cov = raster.coverage.astype(np.uint8) * 255
    p = out_dir / f"{prefix}_coverage.png"
    Image.fromarray(cov).save(p)
    written.append(p)
    d = np.zeros(raster.shape)
    if raster.coverage.any():
        finite = raster.depth[raster.coverage]
        lo, hi = finite.min(), finite.max()
        d[raster.coverage] = 1.0 - (finite - lo) / max(hi - lo, 1e-12)
    p = out_dir / f"{prefix}_depth.png"
    Image.fromarray((d * 255).round().astype(np.uint8)).save(p)
    written.append(p)
    if raster.attributes is not None:
        a = raster.attributes.detach().numpy()
        for c in range(a.shape[2]):
            p = out_dir / f"{prefix}_attr{c}.f32"
            a[:, :, c].astype("<f4").tofile(p)
            written.append(p)
    return written
