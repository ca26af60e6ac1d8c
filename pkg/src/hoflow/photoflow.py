"""Rendered optical flow, differentiable backward warping, the cyclic
visibility check and the masked photometric L1 loss.

Pixel-index convention: pixel (x, y) has its center at continuous image
coordinate (x + 0.5, y + 0.5); sample locations are expressed in index
space, so an integer location hits a pixel center exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import CameraIntrinsics, Mesh, as_tensor, project
from .rasterizer import interpolate, points_in_silhouette, project_vertices, rasterize_geometry

CYCLE_THRESHOLD = 2.0


class TopologyError(ValueError):
    pass


@dataclass
class FlowField:
    flow: torch.Tensor  # H x W x 2, (du, dv) in pixels
    valid: np.ndarray  # H x W bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def check_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {a.shape}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return a


def render_flow(mesh_src: Mesh, mesh_dst: Mesh, cam: CameraIntrinsics) -> FlowField:
    """Flow from the ``mesh_src`` posing to the ``mesh_dst`` posing, rasterized
    over ``mesh_src``. Differentiable w.r.t. ``mesh_dst`` vertices."""
    if not mesh_src.same_topology(mesh_dst):
        raise TopologyError("source and destination meshes do not share topology")
    attrs = project(mesh_dst.vertices, cam) - project(mesh_src.vertices.detach(), cam)
    raster = rasterize_geometry(mesh_src, cam)
    return FlowField(interpolate(raster, mesh_src.faces, attrs), raster.coverage)


def _corners(loc: torch.Tensor, H: int, W: int):
    """Lower cell corner (clamped so corner+1 stays inside) and in-bounds flags."""
    x, y = loc[..., 0].detach(), loc[..., 1].detach()
    inb = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x0 = torch.clamp(torch.floor(x), 0, max(W - 2, 0)).long()
    y0 = torch.clamp(torch.floor(y), 0, max(H - 2, 0)).long()
    return x0, y0, inb


def bilinear_sample_many(img, loc, cells=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``img`` (H x W x C) at M locations (M x 2, (x, y) index space).

    Out-of-bounds locations return zeros and ``in_bounds`` False. The result is
    differentiable w.r.t. ``loc`` (and ``img`` if it is a tensor). ``cells``
    optionally pins the lower cell corners (x0, y0) so the interpolant is
    evaluated as one polynomial piece; locations then count as in bounds.
    """
    img = as_tensor(img)
    loc = as_tensor(loc).reshape(-1, 2)
    H, W = img.shape[:2]
    if cells is None:
        x0, y0, inb = _corners(loc, H, W)
    else:
        x0, y0 = (torch.as_tensor(c) for c in cells)
        inb = torch.ones(loc.shape[0], dtype=torch.bool)
    x1 = torch.clamp(x0 + 1, max=W - 1)
    y1 = torch.clamp(y0 + 1, max=H - 1)
    ax = (loc[:, 0] - x0.to(loc.dtype))[:, None]
    ay = (loc[:, 1] - y0.to(loc.dtype))[:, None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    out = top * (1 - ay) + bot * ay
    return torch.where(inb[:, None], out, torch.zeros_like(out)), inb


def bilinear_sample(img, location) -> tuple[torch.Tensor, bool]:
    out, inb = bilinear_sample_many(img, as_tensor(location).reshape(1, 2))
    return out[0], bool(inb[0])


def _pixel_grid(H: int, W: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64),
                            torch.arange(W, dtype=torch.float64), indexing="ij")
    return torch.stack([xs, ys], -1)


def warp(img, flow: FlowField) -> tuple[torch.Tensor, np.ndarray]:
    """output[p] = img sampled at p + flow[p] where the flow is valid."""
    img = as_tensor(img)
    H, W = flow.shape
    if img.shape[:2] != (H, W):
        raise ValueError(f"image {tuple(img.shape[:2])} and flow {(H, W)} sizes differ")
    pix = np.flatnonzero(flow.valid.ravel())
    loc = _pixel_grid(H, W).reshape(-1, 2)[pix] + flow.flow.reshape(-1, 2)[pix]
    vals, inb = bilinear_sample_many(img, loc)
    out = torch.zeros((H * W, img.shape[2]), dtype=vals.dtype)
    out = out.index_put((torch.from_numpy(pix),), vals)
    mask = np.zeros(H * W, dtype=bool)
    mask[pix] = inb.numpy()
    return out.reshape(H, W, -1), mask.reshape(H, W)


def sample_valid(field: np.ndarray, valid: np.ndarray, loc: np.ndarray):
    """Bilinear sample of ``field`` at ``loc`` using only valid neighbours,
    with weights renormalized over them. Returns (values, ok)."""
    H, W = valid.shape
    x, y = loc[:, 0], loc[:, 1]
    inb = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x0 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = np.where(inb, x - x0, 0.0)[:, None]
    ay = np.where(inb, y - y0, 0.0)[:, None]
    acc = np.zeros((loc.shape[0], field.shape[-1]))
    wsum = np.zeros((loc.shape[0], 1))
    for yy, xx, w in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)),
                      (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay)):
        v = valid[yy, xx][:, None]
        acc += np.where(v, w * field[yy, xx], 0.0)
        wsum += np.where(v, w, 0.0)
    ok = inb & (wsum[:, 0] > 1e-12)
    return np.where(ok[:, None], acc / np.maximum(wsum, 1e-300), 0.0), ok


def cyclic_mask(flow_fwd: FlowField, flow_bwd: FlowField,
                threshold: float = CYCLE_THRESHOLD) -> np.ndarray:
    """Keep p iff p -> q = p + F(p) -> q + B(q) returns within ``threshold`` px.

    B is sampled bilinearly over its valid pixels only; a chain with no valid
    backward neighbour, or leaving the image, is discarded.
    """
    if flow_fwd.shape != flow_bwd.shape:
        raise ValueError("forward and backward flows differ in size")
    H, W = flow_fwd.shape
    keep = np.zeros((H, W), dtype=bool)
    pix = np.flatnonzero(flow_fwd.valid.ravel())
    if pix.size == 0:
        return keep
    p = np.stack([pix % W, pix // W], 1).astype(np.float64)
    q = p + flow_fwd.flow.detach().numpy().reshape(-1, 2)[pix]
    b, ok = sample_valid(flow_bwd.flow.detach().numpy(), flow_bwd.valid, q)
    err = np.linalg.norm(q + b - p, axis=1)
    keep.ravel()[pix] = ok & (err <= threshold)
    return keep


@dataclass
class ActivePiece:
    """Discrete state of the loss at one evaluation point: visibility mask,
    bilinear cells and L1 signs. Holding it fixed turns the loss into a
    smooth function of the vertices (used by derivative checks)."""

    mask: np.ndarray  # H x W
    cells: tuple  # (x0, y0) per masked pixel
    signs: torch.Tensor  # M x 3


@dataclass
class PhotoResult:
    loss: torch.Tensor
    mask: np.ndarray
    empty: bool
    warped: torch.Tensor  # M x 3 warped colors on masked pixels
    piece: ActivePiece | None = None

    @property
    def count(self) -> int:
        return int(self.mask.sum())


class PhotometricLoss:
    """Masked L1 between the reference frame and the target frame warped by
    the flow rendered from the reference (ground-truth) meshes to estimated
    meshes of identical topology.

    The reference raster is fixed, so it is computed once.
    """

    def __init__(self, I_ref, I_target, mesh_ref: Mesh, cam: CameraIntrinsics,
                 threshold: float = CYCLE_THRESHOLD):
        self.I_ref = check_image(I_ref)
        self.I_target = check_image(I_target)
        if self.I_ref.shape[:2] != cam.shape or self.I_target.shape[:2] != cam.shape:
            raise ValueError("image size does not match the camera")
        self.cam = cam
        self.mesh_ref = mesh_ref.detach()
        self.threshold = threshold
        raster = rasterize_geometry(self.mesh_ref, cam)
        self.coverage = raster.coverage
        self.pix = np.flatnonzero(raster.coverage.ravel())
        W = cam.width
        self.grid = np.stack([self.pix % W, self.pix // W], 1).astype(np.float64)
        self.tri = torch.from_numpy(mesh_ref.faces[raster.triangle_id.ravel()[self.pix]])
        self.bary = torch.from_numpy(raster.barycentric.reshape(-1, 3)[self.pix])
        self.uv_ref = torch.from_numpy(project_vertices(self.mesh_ref.vertices.numpy(), cam))
        self.target_t = torch.from_numpy(self.I_target)
        self.ref_t = torch.from_numpy(self.I_ref.reshape(-1, 3)[self.pix])

    def flow_values(self, mesh_est: Mesh) -> torch.Tensor:
        """Forward flow on the covered reference pixels (M x 2)."""
        if not self.mesh_ref.same_topology(mesh_est):
            raise TopologyError("estimated mesh topology differs from the reference")
        attrs = project(mesh_est.vertices, self.cam) - self.uv_ref
        return (self.bary[:, :, None] * attrs[self.tri]).sum(1)

    def visibility(self, mesh_est: Mesh, flow_vals: torch.Tensor) -> np.ndarray:
        """Boolean mask over the covered reference pixels (length M)."""
        H, W = self.cam.shape
        q = self.grid + flow_vals.detach().numpy()
        inb = (q[:, 0] >= 0) & (q[:, 0] <= W - 1) & (q[:, 1] >= 0) & (q[:, 1] <= H - 1)
        est = rasterize_geometry(mesh_est.detach(), self.cam)
        # warped location (index space -> continuous image coordinates) must lie
        # inside the projected estimated silhouette
        in_sil = points_in_silhouette(mesh_est, self.cam, q + 0.5)
        uv_est = project_vertices(mesh_est.vertices.detach().numpy(), self.cam)
        back_attr = torch.from_numpy(self.uv_ref.numpy() - uv_est)
        back = interpolate(est, mesh_est.faces, back_attr).numpy()
        b, ok = sample_valid(back, est.coverage, q)
        cyc = ok & (np.linalg.norm(q + b - self.grid, axis=1) <= self.threshold)
        return inb & in_sil & cyc

    def __call__(self, mesh_est: Mesh, mask: np.ndarray | None = None,
                 piece: ActivePiece | None = None) -> PhotoResult:
        """``mask`` (H x W) freezes the visibility mask instead of recomputing
        it; ``piece`` additionally freezes bilinear cells and L1 signs."""
        flow_vals = self.flow_values(mesh_est)
        if piece is not None:
            mask = piece.mask
        if mask is None:
            keep = self.visibility(mesh_est, flow_vals)
        else:
            keep = np.asarray(mask, dtype=bool).ravel()[self.pix]
        full = np.zeros(self.cam.shape, dtype=bool)
        full.ravel()[self.pix[keep]] = True
        sel = torch.from_numpy(np.flatnonzero(keep))
        if sel.numel() == 0:
            zero = flow_vals.sum() * 0.0
            return PhotoResult(zero, full, True, torch.zeros((0, 3), dtype=torch.float64))
        loc = torch.from_numpy(self.grid)[sel] + flow_vals[sel]
        H, W = self.cam.shape
        if piece is None:
            x0, y0, _ = _corners(loc, H, W)
            warped, _ = bilinear_sample_many(self.target_t, loc)
            diff = warped - self.ref_t[sel]
            signs = torch.sign(diff.detach())
            loss = diff.abs().sum() / max(1, int(sel.numel()))
            return PhotoResult(loss, full, False, warped, ActivePiece(full, (x0, y0), signs))
        warped, _ = bilinear_sample_many(self.target_t, loc, piece.cells)
        loss = (piece.signs * (warped - self.ref_t[sel])).sum() / max(1, int(sel.numel()))
        return PhotoResult(loss, full, False, warped, piece)


def photometric_loss(I_ref, I_est, mesh_ref_gt: Mesh, mesh_est: Mesh, cam: CameraIntrinsics,
                     threshold: float = CYCLE_THRESHOLD) -> PhotoResult:
    return PhotometricLoss(I_ref, I_est, mesh_ref_gt, cam, threshold)(mesh_est)


# --- image I/O ---------------------------------------------------------------

def save_png(path, img) -> None:
    from PIL import Image

    a = check_image(img.detach().numpy() if isinstance(img, torch.Tensor) else img)
    Image.fromarray((a * 255.0).round().astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_f32(path, img) -> None:
    """Raw little-endian float32 planes, channel-major, with an .json shape sidecar."""
    a = np.asarray(img.detach().numpy() if isinstance(img, torch.Tensor) else img)
    path = Path(path)
    np.ascontiguousarray(np.moveaxis(a, -1, 0)).astype("<f4").tofile(path)
    path.with_suffix(path.suffix + ".json").write_text(
        '{"shape": [%d, %d, %d]}' % (a.shape[0], a.shape[1], a.shape[2]))


def load_f32(path) -> np.ndarray:
    path = Path(path)
    h, w, c = json.loads(path.with_suffix(path.suffix + ".json").read_text())["shape"]
    planes = np.fromfile(path, "<f4").reshape(c, h, w)
    return np.moveaxis(planes, 0, -1).astype(np.float64)
