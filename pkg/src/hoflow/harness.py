"""Synthetic hand-object sequences, evaluation metrics and their on-disk
formats.

Sequence directory layout::

    camera.json
    frames/00000.png   (8-bit)   frames/00000.f32 (+ .json shape sidecar, lossless)
    params/00000.json
    models/object.meshb  models/object_colors.f32  models/hand.skin.json ...
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import (CameraIntrinsics, Mesh, RigidPose, apply_rigid, concat_meshes, encode_translation,
                       load_mesh, project, save_mesh)
from .hand_model import box_mesh, load_model, save_model, toy_hand_model
from .photoflow import load_f32, load_png, save_f32, save_png
from .rasterizer import NEAR_PLANE, interpolate, rasterize_geometry
from .scene import NUM_PARAMS, SceneModels, SceneParams, scene_forward, scene_mesh

BACKGROUND = 0.5


class GenerationError(ValueError):
    pass


def default_camera(size: int = 128, focal: float = 128.0) -> CameraIntrinsics:
    return CameraIntrinsics.centered(focal, size, size, z_off=0.40)


def smooth_texture(points, rng, modes: int = 6, wavelength=(0.03, 0.08)) -> np.ndarray:
    """Per-vertex RGB from a few random 3D Fourier modes.

    Texture detail much finer than the expected frame-to-frame motion makes
    the photometric basin narrow, so wavelengths are kept at several cm.
    """
    points = np.asarray(points, dtype=np.float64)
    dirs = rng.normal(size=(3, modes, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    k = 2 * np.pi / rng.uniform(*wavelength, (3, modes, 1))
    phase = rng.uniform(0, 2 * np.pi, (3, modes))
    waves = np.sin(np.einsum("cmd,nd->ncm", dirs * k, points) + phase)
    return np.clip(0.5 + 0.5 * waves.mean(-1) * np.sqrt(2.0), 0.0, 1.0)


def make_models(seed: int = 0) -> SceneModels:
    """Box object plus the procedural hand, with smooth random textures."""
    rng = np.random.default_rng(seed)
    ov, of = box_mesh((0.04, 0.03, 0.025), (8, 6, 5))
    hand = toy_hand_model(seed)
    return SceneModels(
        object_mesh=Mesh(ov, of),
        object_colors=smooth_texture(ov, rng),
        hand=hand,
        hand_colors=smooth_texture(hand.template_vertices, rng),
    )


def render_image(mesh: Mesh, colors, cam: CameraIntrinsics, background: float = BACKGROUND) -> np.ndarray:
    """Unlit per-vertex-color rendering in [0, 1]."""
    raster = rasterize_geometry(mesh.detach(), cam)
    img = interpolate(raster, mesh.faces, torch.as_tensor(np.asarray(colors, dtype=np.float64))).numpy()
    img[~raster.coverage] = background
    return np.clip(img, 0.0, 1.0)


def render_scene(params: SceneParams, models: SceneModels, cam: CameraIntrinsics) -> np.ndarray:
    hand, obj, _ = scene_forward(params, models, cam)
    return render_image(scene_mesh(hand, obj), models.colors, cam)


def plane_mesh(center, half_extents, divisions) -> Mesh:
    """Fronto-parallel grid of quads (two triangles each) at depth center[2]."""
    nx, ny = divisions
    xs = np.linspace(-half_extents[0], half_extents[0], nx + 1) + center[0]
    ys = np.linspace(-half_extents[1], half_extents[1], ny + 1) + center[1]
    X, Y = np.meshgrid(xs, ys)
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(center[2]))], 1)
    f = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            f += [(a, a + 1, a + nx + 2), (a, a + nx + 2, a + nx + 1)]
    return Mesh(v, np.array(f, dtype=np.int64))


@dataclass
class TwoBodyScene:
    """Textured background plane plus a smaller occluder plane in front of it.

    Between the reference and the target frame the occluder slides sideways
    while the background plane moves slightly, so part of the background seen
    at the reference frame is hidden at the target frame.
    """

    mesh_ref: Mesh
    mesh_target: Mesh
    colors: np.ndarray
    back_vertices: int  # the first ``back_vertices`` vertices belong to the background

    def images(self, cam: CameraIntrinsics):
        return (render_image(self.mesh_ref, self.colors, cam),
                render_image(self.mesh_target, self.colors, cam))


def two_body_scene(seed: int = 0, occluder_shift: float = 0.03, back_shift=(0.004, 0.002)) -> TwoBodyScene:
    rng = np.random.default_rng(seed)
    back = plane_mesh((0.0, 0.0, 0.8), (0.2, 0.2), (12, 12))
    front = plane_mesh((-0.02, 0.0, 0.5), (0.04, 0.05), (4, 4))
    ref = concat_meshes([back, front])
    n_back = back.num_vertices
    shift = np.zeros((ref.num_vertices, 3))
    shift[:n_back, :2] = back_shift
    shift[n_back:, 0] = occluder_shift
    target = Mesh(ref.vertices + torch.from_numpy(shift), ref.faces)
    colors = smooth_texture(ref.vertices.numpy(), rng)
    return TwoBodyScene(ref, target, colors, n_back)


@dataclass
class Trajectory:
    """params(t) = start + velocity * t + amplitude * sin(2 pi t / period + phase),
    phases drawn from the generation seed."""

    frames: int = 30
    start: np.ndarray = field(default_factory=lambda: np.zeros(NUM_PARAMS))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(NUM_PARAMS))
    amplitude: np.ndarray = field(default_factory=lambda: np.zeros(NUM_PARAMS))
    period: float = 12.0
    max_pixel_motion: float = 4.0

    def params_at(self, t: int, phase: np.ndarray) -> np.ndarray:
        return (self.start + self.velocity * t
                + self.amplitude * np.sin(2 * np.pi * t / self.period + phase))


def canonical_start(cam: CameraIntrinsics, seed: int = 0) -> np.ndarray:
    """Object at 0.55 m right of center, hand at 0.6 m left of it, palm toward
    the camera; small random articulation and shape."""
    rng = np.random.default_rng(seed)
    v = np.zeros(NUM_PARAMS)
    v[0:3] = rng.normal(0.0, 0.15, 3)
    v[3:6] = encode_translation((0.045, 0.0, 0.55), cam)
    v[6:9] = rng.normal(0.0, 0.05, 3)
    v[9:12] = encode_translation((-0.03, 0.1, 0.60), cam)
    v[12:27] = rng.normal(0.0, 0.4, 15)
    v[27:37] = rng.normal(0.0, 0.4, 10)
    return v


def default_trajectory(cam: CameraIntrinsics, seed: int = 0, frames: int = 30) -> Trajectory:
    """Smooth, mostly in-plane hand-object motion with some articulation."""
    rng = np.random.default_rng(seed + 1000)
    vel = np.zeros(NUM_PARAMS)
    amp = np.zeros(NUM_PARAMS)
    vel[[4, 5]] = rng.uniform(-0.4, 0.4, 2)
    vel[[10, 11]] = rng.uniform(-0.3, 0.3, 2)
    amp[[4, 5, 10, 11]] = rng.uniform(1.5, 3.0, 4)
    amp[2] = rng.uniform(0.08, 0.12)
    amp[8] = rng.uniform(0.04, 0.07)
    amp[[0, 1, 6, 7]] = rng.uniform(0.02, 0.04, 4)
    amp[[3, 9]] = 0.01 / cam.focal
    amp[12:15] = rng.uniform(0.1, 0.3, 3)
    return Trajectory(frames, canonical_start(cam, seed), vel, amp, period=12.0)


@dataclass
class SyntheticSequence:
    frames: list  # list of (image H x W x 3, SceneParams)
    camera: CameraIntrinsics
    models: SceneModels

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def images(self) -> list:
        return [img for img, _ in self.frames]

    @property
    def params(self) -> list:
        return [p for _, p in self.frames]


def _check_frame(t: int, mesh: Mesh, cam: CameraIntrinsics) -> np.ndarray:
    v = mesh.vertices.detach().numpy()
    if np.any(v[:, 2] <= NEAR_PLANE):
        raise GenerationError(f"frame {t}: mesh crosses the near plane")
    uv = project(v, cam).numpy()
    if uv.min() < 0 or uv[:, 0].max() > cam.width or uv[:, 1].max() > cam.height:
        raise GenerationError(f"frame {t}: mesh leaves the camera frustum")
    return uv


def generate_sequence(trajectory: Trajectory, seed: int = 0, cam: CameraIntrinsics | None = None,
                      models: SceneModels | None = None) -> SyntheticSequence:
    cam = cam or default_camera()
    models = models or make_models(seed)
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, NUM_PARAMS)
    frames, prev_uv = [], None
    for t in range(trajectory.frames):
        p = SceneParams.from_vector(trajectory.params_at(t, phase))
        hand, obj, _ = scene_forward(p, models, cam)
        mesh = scene_mesh(hand, obj)
        uv = _check_frame(t, mesh, cam)
        if prev_uv is not None:
            motion = np.linalg.norm(uv - prev_uv, axis=1).max()
            if motion > trajectory.max_pixel_motion:
                raise GenerationError(
                    f"frame {t}: {motion:.2f} px motion exceeds {trajectory.max_pixel_motion} px")
        prev_uv = uv
        frames.append((render_image(mesh, models.colors, cam), p))
    return SyntheticSequence(frames, cam, models)


# --- metrics -------------------------------------------------------------------

def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred.detach().numpy() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    b = np.asarray(gt.detach().numpy() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mepe_3d(pred, gt) -> float:
    """Mean end-point error in millimeters (inputs in meters)."""
    a, b = _pair(pred, gt)
    return float(np.linalg.norm(a - b, axis=-1).mean() * 1000.0)


def mean_2d_error(pred, gt, cam: CameraIntrinsics) -> float:
    """Mean pixel distance between projections of 3D points."""
    a, b = _pair(pred, gt)
    return float(np.linalg.norm(project(a, cam).numpy() - project(b, cam).numpy(), axis=-1).mean())


def pck_curve(errors, thresholds) -> np.ndarray:
    """Fraction of frames whose mean error is strictly below each threshold."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    th = np.asarray(thresholds, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("no errors given")
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be ascending")
    return (e[None, :] < th[:, None]).mean(1)


def aabb_corners(vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(0), v.max(0)
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def object_corners(models: SceneModels, pose: RigidPose, cam: CameraIntrinsics) -> torch.Tensor:
    """The model's 8 bounding-box corners carried by the object pose."""
    corners = Mesh(aabb_corners(models.object_mesh.vertices.numpy()), np.zeros((0, 3), np.int64))
    return apply_rigid(corners, pose, cam).vertices


def frame_errors(pred: SceneParams, gt: SceneParams, models: SceneModels, cam: CameraIntrinsics) -> dict:
    with torch.no_grad():
        ph, po, pj = scene_forward(pred, models, cam)
        gh, go, gj = scene_forward(gt, models, cam)
        pc = object_corners(models, pred.object, cam)
        gc = object_corners(models, gt.object, cam)
    pv = torch.cat([ph.vertices, po.vertices])
    gv = torch.cat([gh.vertices, go.vertices])
    return {
        "hand_mepe_mm": mepe_3d(pj, gj),
        "hand_2d_px": mean_2d_error(pj, gj, cam),
        "obj_vertex_mm": mepe_3d(po.vertices, go.vertices),
        "obj_2d_px": mean_2d_error(po.vertices, go.vertices, cam),
        "obj_corner_mm": mepe_3d(pc, gc),
        "obj_corner_2d_px": mean_2d_error(pc, gc, cam),
        "vertex_2d_px": mean_2d_error(pv, gv, cam),
    }


def write_metrics_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def write_pck_csv(path, thresholds, fractions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction"])
        for t, f in zip(thresholds, fractions):
            w.writerow([repr(float(t)), repr(float(f))])


# --- sequence directories ------------------------------------------------------

def save_sequence(seq: SyntheticSequence, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "params").mkdir(exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "camera.json").write_text(json.dumps(seq.camera.to_dict(), indent=1))
    for t, (img, p) in enumerate(seq.frames):
        save_png(out / "frames" / f"{t:05d}.png", img)
        save_f32(out / "frames" / f"{t:05d}.f32", img)
        (out / "params" / f"{t:05d}.json").write_text(p.to_json())
    m = seq.models
    save_mesh(out / "models" / "object.meshb", m.object_mesh)
    save_f32(out / "models" / "object_colors.f32", m.object_colors[None])
    save_model(out / "models" / "hand.skin.json", m.hand)
    save_f32(out / "models" / "hand_colors.f32", m.hand_colors[None])
    return out


class SequenceFormatError(ValueError):
    pass


def load_sequence(seq_dir) -> SyntheticSequence:
    d = Path(seq_dir)
    if not (d / "camera.json").is_file():
        raise FileNotFoundError(f"{d / 'camera.json'} not found")
    cam = CameraIntrinsics.from_dict(json.loads((d / "camera.json").read_text()))
    models = SceneModels(
        object_mesh=load_mesh(d / "models" / "object.meshb"),
        object_colors=load_f32(d / "models" / "object_colors.f32")[0],
        hand=load_model(d / "models" / "hand.skin.json"),
        hand_colors=load_f32(d / "models" / "hand_colors.f32")[0],
    )
    frames = []
    pngs = sorted((d / "frames").glob("*.png"))
    if not pngs:
        raise SequenceFormatError(f"no frames in {d / 'frames'}")
    for t, png in enumerate(pngs):
        if png.stem != f"{t:05d}":
            raise SequenceFormatError(f"frame {t}: expected {t:05d}.png, found {png.name}")
        raw = png.with_suffix(".f32")
        try:
            img = load_f32(raw) if raw.is_file() else load_png(png)
        except Exception as exc:
            raise SequenceFormatError(f"frame {t}: cannot read {raw if raw.is_file() else png}: {exc}") from exc
        if img.shape != (cam.height, cam.width, 3):
            raise SequenceFormatError(f"frame {t}: image shape {img.shape} does not match camera")
        pfile = d / "params" / f"{t:05d}.json"
        params = SceneParams.from_json(pfile.read_text()) if pfile.is_file() else None
        frames.append((img, params))
    return SyntheticSequence(frames, cam, models)
