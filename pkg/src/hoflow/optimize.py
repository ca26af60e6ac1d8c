"""Gradient evaluation over the 37 scene parameters, per-frame photometric
refinement and the sparse-keyframe supervision protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .adam import Adam
from .geometry import CameraIntrinsics, InvalidPoseError, Mesh, as_tensor, encode_translation
from .hand_model import articulate
from .harness import frame_errors
from .losses import LossWeights, combined_loss, joint_loss, object_vertex_loss, regularizers
from .photoflow import CYCLE_THRESHOLD, PhotometricLoss
from .scene import (HAND_SLICE, NUM_PARAMS, OBJECT_SLICE, PARAM_NAMES, SceneModels, SceneParams,
                    natural_units, scene_forward, scene_mesh)

log = logging.getLogger(__name__)


class GradientError(FloatingPointError):
    def __init__(self, message: str, snapshot: np.ndarray):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class RefineConfig:
    step_size: float = 1e-2
    max_iters: int = 500
    patience: int = 20
    min_improvement: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    regularize: bool = False
    optimize: str = "all"  # "all" | "object" | "hand"
    # explicit parameter names (see PARAM_NAMES); overrides ``optimize`` when set
    dofs: tuple | None = None
    cycle_threshold: float = CYCLE_THRESHOLD
    # iterates whose mask shrinks below this fraction of the initial one are not eligible as best
    min_mask_fraction: float = 0.5
    # keyframe fitting on L_HO
    fit_iters: int = 300
    fit_step_size: float = 1e-2

    def __post_init__(self):
        if not self.step_size > 0 or not self.fit_step_size > 0:
            raise ValueError("step sizes must be positive")
        if self.max_iters < 0 or self.fit_iters < 0:
            raise ValueError("iteration caps must be nonnegative")
        if self.optimize not in ("all", "object", "hand"):
            raise ValueError(f"unknown optimize target {self.optimize!r}")
        if self.dofs is not None:
            unknown = set(self.dofs) - set(PARAM_NAMES)
            if unknown:
                raise ValueError(f"unknown parameter names {sorted(unknown)}")

    def active(self) -> np.ndarray:
        m = np.zeros(NUM_PARAMS, dtype=bool)
        if self.dofs is not None:
            m[[PARAM_NAMES.index(n) for n in self.dofs]] = True
            return m
        if self.optimize in ("all", "object"):
            m[OBJECT_SLICE] = True
        if self.optimize in ("all", "hand"):
            m[HAND_SLICE] = True
        return m


def grad(loss_fn, params: SceneParams) -> np.ndarray:
    """Reverse-mode gradient of ``loss_fn(SceneParams) -> scalar`` w.r.t. the
    flat 37-vector."""
    return value_and_grad(loss_fn, params)[1]


def value_and_grad(loss_fn, params: SceneParams) -> tuple[float, np.ndarray]:
    x = params.vector().detach().clone().requires_grad_(True)
    loss = loss_fn(SceneParams.from_vector(x))
    value = float(loss.detach())
    if not math.isfinite(value):
        raise GradientError(f"non-finite loss {value}", x.detach().numpy().copy())
    if not loss.requires_grad:
        return value, np.zeros(NUM_PARAMS)
    (g,) = torch.autograd.grad(loss, x, allow_unused=True)
    g = np.zeros(NUM_PARAMS) if g is None else g.numpy()
    if not np.all(np.isfinite(g)):
        raise GradientError("non-finite gradient", x.detach().numpy().copy())
    return value, g


def photo_objective(I_ref, ref_mesh: Mesh, I_target, models: SceneModels, cam: CameraIntrinsics,
                    config: RefineConfig = RefineConfig()):
    """Closure params -> (loss tensor, PhotoResult) for one frame pair."""
    term = PhotometricLoss(I_ref, I_target, ref_mesh, cam, config.cycle_threshold)
    w = config.weights

    def objective(params: SceneParams, mask=None, piece=None):
        hand, obj, _ = scene_forward(params, models, cam)
        res = term(scene_mesh(hand, obj), mask, piece)
        loss = w.photo * res.loss
        if config.regularize:
            l_theta, l_beta = regularizers(params.hand)
            loss = loss + w.lambda_theta * l_theta + w.lambda_beta * l_beta
        return loss, res

    objective.term = term
    return objective


def fd_steps(focal: float, eps: float = 1e-4) -> np.ndarray:
    """Per-coordinate central-difference steps: ``eps`` rad, meters of depth,
    pixels or coefficient units."""
    return eps * natural_units(focal, depth_unit=1.0, pixel_unit=1.0)


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.rel_error < self.tolerance))

    def table(self) -> list[tuple]:
        return [(PARAM_NAMES[i], self.analytic[i], self.numeric[i], self.rel_error[i],
                 bool(self.rel_error[i] < self.tolerance)) for i in range(NUM_PARAMS)]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradient(loss_fn, params: SceneParams, steps: np.ndarray, tolerance: float = 1e-3,
                   floor: float = 1e-8, analytic: np.ndarray | None = None) -> GradCheck:
    """Compare reverse-mode derivatives with central differences.

    ``loss_fn`` maps SceneParams to a scalar tensor; it must be a fixed
    function of the parameters (freeze any data-dependent masks first).
    """
    x = params.numpy()
    if analytic is None:
        analytic = grad(loss_fn, params)
    numeric = np.zeros(NUM_PARAMS)
    with torch.no_grad():
        for i in range(NUM_PARAMS):
            xp, xm = x.copy(), x.copy()
            xp[i] += steps[i]
            xm[i] -= steps[i]
            fp = float(loss_fn(SceneParams.from_vector(xp)))
            fm = float(loss_fn(SceneParams.from_vector(xm)))
            numeric[i] = (fp - fm) / (2 * steps[i])
    return GradCheck(analytic, numeric, relative_error(analytic, numeric, floor), tolerance)


@dataclass
class RefineResult:
    params: SceneParams
    initial_loss: float
    loss: float
    iterations: int
    no_supervision: bool = False
    history: list = field(default_factory=list)


def refine_frame(I_ref, ref_mesh: Mesh, I_target, init: SceneParams, models: SceneModels,
                 cam: CameraIntrinsics, config: RefineConfig = RefineConfig()) -> RefineResult:
    """Minimize the photometric loss of ``I_target`` against the annotated
    reference frame, starting from ``init``. Returns the lowest-loss iterate.

    ``ref_mesh`` is the ground-truth scene mesh (hand then object) at the
    reference frame.
    """
    objective = photo_objective(I_ref, ref_mesh, I_target, models, cam, config)
    units = natural_units(cam.focal)
    active = config.active()
    x = init.numpy()
    opt = Adam(config.step_size)
    best_x, best_loss, init_loss, init_count = x.copy(), math.inf, math.nan, 0
    best_trace, history = [], []
    it = 0
    for it in range(config.max_iters + 1):
        try:
            xt = torch.from_numpy(x.copy()).requires_grad_(True)
            loss, res = objective(SceneParams.from_vector(xt))
        except InvalidPoseError as exc:
            log.warning("refinement stopped at iteration %d: %s", it, exc)
            break
        value = float(loss.detach())
        if it == 0:
            init_loss, init_count = value, res.count
            if res.empty:
                return RefineResult(init, value, value, 0, no_supervision=True)
        history.append(value)
        eligible = (math.isfinite(value) and not res.empty
                    and res.count >= config.min_mask_fraction * init_count)
        if eligible and value < best_loss:
            best_loss, best_x = value, x.copy()
        best_trace.append(best_loss)
        if not math.isfinite(value):
            log.warning("non-finite loss at iteration %d; keeping best iterate", it)
            break
        if it == config.max_iters:
            break
        if it >= config.patience and best_trace[-1 - config.patience] - best_loss < config.min_improvement:
            break
        (g,) = torch.autograd.grad(loss, xt)
        gz = np.where(active, g.numpy() * units, 0.0)
        z = opt.step(x / units, gz)
        x = np.where(active, z * units, x)
    return RefineResult(SceneParams.from_vector(best_x), init_loss, best_loss, it, history=history)


# --- sparse keyframe protocol -------------------------------------------------

@dataclass
class Annotation:
    """Ground-truth supervision available on a keyframe."""

    object_vertices: torch.Tensor
    hand_vertices: torch.Tensor
    joints: torch.Tensor

    @classmethod
    def from_params(cls, params: SceneParams, models: SceneModels, cam: CameraIntrinsics):
        with torch.no_grad():
            hand, obj, joints = scene_forward(params, models, cam)
        return cls(obj.vertices, hand.vertices, joints)

    def scene_mesh(self, models: SceneModels) -> Mesh:
        return Mesh(torch.cat([self.hand_vertices, self.object_vertices]),
                    np.concatenate([models.hand.faces,
                                    models.object_mesh.faces + models.num_hand_vertices]))


def keyframe_indices(num_frames: int, ratio: float) -> list[int]:
    """Uniform keyframes from frame 0: round(i / ratio), i < ceil(ratio * T)."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    count = math.ceil(ratio * num_frames - 1e-9)
    keys = {int(math.floor(i / ratio + 0.5)) for i in range(count)}
    return sorted(k for k in keys if 0 <= k < num_frames)


def nearest_keyframe(t: int, keys: list[int]) -> int:
    """Nearest keyframe, ties toward the earlier one."""
    return min(keys, key=lambda k: (abs(k - t), k))


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with dst ~ R src + t."""
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def ho_loss(params: SceneParams, ann: Annotation, models: SceneModels, cam: CameraIntrinsics,
            weights: LossWeights) -> torch.Tensor:
    hand, obj, joints = scene_forward(params, models, cam)
    l_theta, l_beta = regularizers(params.hand)
    return combined_loss({
        "object": object_vertex_loss(obj.vertices, ann.object_vertices),
        "joints": joint_loss(joints, ann.joints),
        "beta": l_beta,
        "theta": l_theta,
    }, weights)


def fit_keyframe(ann: Annotation, models: SceneModels, cam: CameraIntrinsics,
                 config: RefineConfig = RefineConfig()) -> SceneParams:
    """Minimize L_HO against a keyframe annotation.

    The object pose has a closed form (Kabsch on known correspondences); the
    hand starts from a Kabsch alignment of its rest keypoints and is refined
    with Adam.
    """
    from scipy.spatial.transform import Rotation

    x = np.zeros(NUM_PARAMS)
    R, t = kabsch(models.object_mesh.vertices.numpy(), ann.object_vertices.numpy())
    x[0:3] = Rotation.from_matrix(R).as_rotvec()
    x[3:6] = encode_translation(t, cam)
    with torch.no_grad():
        rest, _ = articulate(models.hand, torch.zeros(models.hand.pose_basis.shape[0]),
                             torch.zeros(models.hand.shape_basis.shape[0]))
        rest_joints = (torch.from_numpy(models.hand.joint_regressor) @ rest).numpy()
    R, t = kabsch(rest_joints, ann.joints.numpy())
    x[6:9] = Rotation.from_matrix(R).as_rotvec()
    x[9:12] = encode_translation(t, cam)

    units = natural_units(cam.focal)
    active = np.zeros(NUM_PARAMS, dtype=bool)
    active[HAND_SLICE] = True
    opt = Adam(config.fit_step_size)
    best_x, best = x.copy(), math.inf
    for _ in range(config.fit_iters):
        value, g = value_and_grad(lambda p: ho_loss(p, ann, models, cam, config.weights),
                                  SceneParams.from_vector(x))
        if value < best:
            best, best_x = value, x.copy()
        z = opt.step(x / units, np.where(active, g * units, 0.0))
        x = np.where(active, z * units, x)
    return SceneParams.from_vector(best_x)


def interpolate_params(a: SceneParams, b: SceneParams, w: float) -> SceneParams:
    """Linear blend, with both global rotations slerped."""
    from scipy.spatial.transform import Rotation, Slerp

    xa, xb = a.numpy(), b.numpy()
    x = (1.0 - w) * xa + w * xb
    for sl in (slice(0, 3), slice(6, 9)):
        rots = Rotation.from_rotvec(np.stack([xa[sl], xb[sl]]))
        x[sl] = Slerp([0.0, 1.0], rots)([w]).as_rotvec()[0]
    return SceneParams.from_vector(x)


def initial_guess(t: int, keys: list[int], fits: dict) -> SceneParams:
    before = [k for k in keys if k <= t]
    after = [k for k in keys if k >= t]
    a = before[-1]
    if not after:
        return fits[a]
    b = after[0]
    if a == b:
        return fits[a]
    return interpolate_params(fits[a], fits[b], (t - a) / (b - a))


@dataclass
class ProtocolResult:
    keyframes: list
    params: list  # per-frame SceneParams
    initial: list  # per-frame initialization (keyframes: their fit)
    rows: list  # report rows


def sparse_protocol(frames, ratio: float, models: SceneModels, cam: CameraIntrinsics,
                    config: RefineConfig = RefineConfig(), ground_truth=None,
                    refine: bool = True) -> ProtocolResult:
    """Propagate sparse keyframe annotations through a sequence.

    ``frames``: list of (image, Annotation or None); annotations are only read
    on keyframes. ``ground_truth``: optional per-frame SceneParams used for
    the error columns of the report.
    """
    T = len(frames)
    keys = keyframe_indices(T, ratio)
    if 0 not in keys:
        raise ValueError("frame 0 must be a keyframe")
    fits, ref_meshes = {}, {}
    for k in keys:
        ann = frames[k][1]
        if ann is None:
            raise ValueError(f"keyframe {k} has no annotation")
        fits[k] = fit_keyframe(ann, models, cam, config)
        ref_meshes[k] = ann.scene_mesh(models)
    out, init, rows = [], [], []
    for t in range(T):
        image = frames[t][0]
        guess = initial_guess(t, keys, fits)
        row = {"frame": t, "is_keyframe": int(t in keys)}
        if t in keys:
            final, ref, loss0, loss1, iters, flag = guess, t, math.nan, math.nan, 0, 0
        elif refine:
            ref = nearest_keyframe(t, keys)
            res = refine_frame(frames[ref][0], ref_meshes[ref], image, guess, models, cam, config)
            final, loss0, loss1, iters, flag = (res.params, res.initial_loss, res.loss,
                                                res.iterations, int(res.no_supervision))
        else:
            ref, final, loss0, loss1, iters, flag = nearest_keyframe(t, keys), guess, math.nan, math.nan, 0, 0
        row.update(ref_frame=ref, init_loss=loss0, loss=loss1, iterations=iters, no_supervision=flag)
        if ground_truth is not None and ground_truth[t] is not None:
            for name, v in frame_errors(guess, ground_truth[t], models, cam).items():
                row[f"init_{name}"] = v
            for name, v in frame_errors(final, ground_truth[t], models, cam).items():
                row[name] = v
        out.append(final)
        init.append(guess)
        rows.append(row)
        log.info("frame %d: %s", t, row)
    return ProtocolResult(keys, out, init, rows)
