"""Parametric articulated hand: shape blendshapes, PCA pose space, linear
blend skinning, joint regression and the skeleton adaptation layer.

The model format mirrors MANO's array layout without its pose-corrective
blendshapes. No licensed asset ships here; ``toy_hand_model`` builds a
procedural 16-joint / 21-keypoint hand and ``toy_chain_model`` a 3-joint
chain with an analytic pose basis.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import (DTYPE, CameraIntrinsics, Mesh, RigidPose, as_tensor,
                       axis_angle_to_matrices, axis_angle_to_matrix, decode_translation)

NUM_PCA = 15
NUM_SHAPE = 10
NUM_KEYPOINTS = 21
ROW_SUM_TOL = 1e-6


class InvalidRegressorError(ValueError):
    pass


@dataclass(frozen=True)
class SkinnedModel:
    template_vertices: np.ndarray  # N x 3
    faces: np.ndarray  # F x 3
    shape_basis: np.ndarray  # S x N x 3
    pose_basis: np.ndarray  # P x 3(J-1)
    parents: np.ndarray  # J, parents[0] == -1
    skinning_weights: np.ndarray  # N x J
    pivot_regressor: np.ndarray  # J x N, rest joint pivots used by skinning
    joint_regressor: np.ndarray  # K x N, output keypoints
    fixed_rows: tuple[int, ...] = ()

    def __post_init__(self):
        n = self.template_vertices.shape[0]
        j = self.parents.shape[0]
        if self.shape_basis.shape[1:] != (n, 3):
            raise ValueError(f"shape_basis {self.shape_basis.shape} does not match {n} vertices")
        if self.pose_basis.shape[1] != 3 * (j - 1):
            raise ValueError(f"pose_basis has {self.pose_basis.shape[1]} columns, expected {3 * (j - 1)}")
        if self.skinning_weights.shape != (n, j):
            raise ValueError(f"skinning_weights {self.skinning_weights.shape} != {(n, j)}")
        if self.skinning_weights.min() < 0 or not np.allclose(
                self.skinning_weights.sum(1), 1.0, rtol=0, atol=ROW_SUM_TOL):
            raise ValueError("skinning weight rows must be nonnegative and sum to 1")
        if self.pivot_regressor.shape != (j, n):
            raise ValueError(f"pivot_regressor {self.pivot_regressor.shape} != {(j, n)}")
        if self.joint_regressor.shape[1] != n:
            raise ValueError("joint_regressor column count != vertex count")
        check_regressor(self.pivot_regressor)
        check_regressor(self.joint_regressor)
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise ValueError("kinematic tree must have a single root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, j)):
            raise ValueError("parents must precede children (tree must be acyclic)")
        if any(r < 0 or r >= self.joint_regressor.shape[0] for r in self.fixed_rows):
            raise ValueError("fixed_rows out of range")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    def rest_mesh(self) -> Mesh:
        return Mesh(self.template_vertices, self.faces)


@dataclass
class HandParams:
    pca_pose: torch.Tensor = field(default_factory=lambda: torch.zeros(NUM_PCA, dtype=DTYPE))
    shape: torch.Tensor = field(default_factory=lambda: torch.zeros(NUM_SHAPE, dtype=DTYPE))
    global_pose: RigidPose = field(default_factory=RigidPose)

    def __post_init__(self):
        self.pca_pose = as_tensor(self.pca_pose).reshape(-1)
        self.shape = as_tensor(self.shape).reshape(-1)


def check_regressor(regressor) -> None:
    r = regressor.detach().numpy() if isinstance(regressor, torch.Tensor) else np.asarray(regressor)
    sums = r.sum(1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size:
        raise InvalidRegressorError(f"regressor row {bad[0]} sums to {sums[bad[0]]:.9g}, not 1")


def regress_joints(regressor, vertices) -> torch.Tensor:
    check_regressor(regressor)
    return as_tensor(regressor) @ as_tensor(vertices)


def articulate(model: SkinnedModel, pca_pose, shape) -> tuple[torch.Tensor, torch.Tensor]:
    """Shape + PCA pose + LBS in model space (no global transform).

    Returns posed vertices (N x 3) and the posed joint pivots (J x 3).
    """
    pca_pose = as_tensor(pca_pose)
    shape = as_tensor(shape)
    if pca_pose.shape[0] != model.pose_basis.shape[0]:
        raise ValueError(f"{pca_pose.shape[0]} pose coefficients for a {model.pose_basis.shape[0]}-dim basis")
    if shape.shape[0] != model.shape_basis.shape[0]:
        raise ValueError(f"{shape.shape[0]} shape coefficients for a {model.shape_basis.shape[0]}-dim basis")
    v = torch.from_numpy(model.template_vertices) + torch.einsum(
        "s,snc->nc", shape, torch.from_numpy(model.shape_basis))
    pivots = torch.from_numpy(model.pivot_regressor) @ v
    local = axis_angle_to_matrices((pca_pose @ torch.from_numpy(model.pose_basis)).reshape(-1, 3))

    rots = [torch.eye(3, dtype=DTYPE)]
    posed = [pivots[0]]
    for j in range(1, model.num_joints):
        p = model.parents[j]
        rots.append(rots[p] @ local[j - 1])
        posed.append(posed[p] + rots[p] @ (pivots[j] - pivots[p]))
    R = torch.stack(rots)  # J x 3 x 3
    P = torch.stack(posed)  # J x 3
    # x' = sum_j w_j (R_j (x - pivot_j) + posed_j)
    per_joint = torch.einsum("jab,njb->nja", R, v[:, None, :] - pivots[None]) + P[None]
    w = torch.from_numpy(model.skinning_weights)
    return (w[:, :, None] * per_joint).sum(1), P


def hand_forward(model: SkinnedModel, params: HandParams, cam: CameraIntrinsics,
                 joint_regressor=None) -> tuple[Mesh, torch.Tensor]:
    """Posed hand mesh and keypoints in the camera frame.

    ``joint_regressor`` overrides the model's (used while adapting it).
    """
    v, _ = articulate(model, params.pca_pose, params.shape)
    reg = model.joint_regressor if joint_regressor is None else joint_regressor
    joints = regress_joints(reg, v)
    R = axis_angle_to_matrix(params.global_pose.rotation)
    t = decode_translation(params.global_pose, cam)
    return Mesh(v @ R.T + t, model.faces), joints @ R.T + t


def adapt_skeleton(model: SkinnedModel, gradient_update) -> SkinnedModel:
    """Apply an additive update to the joint regressor.

    Rows in ``model.fixed_rows`` are kept bit-identical; the others are
    projected back onto row-sum 1 by spreading the deficit uniformly.
    """
    upd = np.asarray(gradient_update, dtype=np.float64)
    old = model.joint_regressor
    if upd.shape != old.shape:
        raise ValueError(f"update shape {upd.shape} != regressor shape {old.shape}")
    new = old + upd
    new += (1.0 - new.sum(1, keepdims=True)) / new.shape[1]
    fixed = list(model.fixed_rows)
    new[fixed] = old[fixed]
    return dataclasses.replace(model, joint_regressor=new)


def fit_skeleton(model: SkinnedModel, vertex_sets, target_joints, steps: int = 1000,
                 step_size: float = 1e-2, callback=None) -> SkinnedModel:
    """Adapt the joint regressor so that regressor @ V_i matches the targets.

    ``vertex_sets`` is (B, N, 3) posed vertices, ``target_joints`` (B, K, 3).
    """
    from .adam import Adam

    V = as_tensor(vertex_sets)
    T = as_tensor(target_joints)
    opt = Adam(step_size)
    for it in range(steps):
        reg = torch.from_numpy(model.joint_regressor).requires_grad_(True)
        pred = torch.einsum("kn,bnc->bkc", reg, V)
        loss = ((pred - T) ** 2).sum(-1).mean()
        (g,) = torch.autograd.grad(loss, reg)
        flat = model.joint_regressor.ravel()
        delta = opt.step(flat, g.numpy().ravel()) - flat
        model = adapt_skeleton(model, delta.reshape(model.joint_regressor.shape))
        if callback is not None:
            callback(it, float(loss))
    return model


# --- procedural models -------------------------------------------------------

def _tube(start, direction, lateral, half_width, stations):
    """Square rings of 4 vertices at the given distances along ``direction``."""
    up = np.array([0.0, 0.0, 1.0])
    offs = [(+1, +1), (-1, +1), (-1, -1), (+1, -1)]
    rings = []
    for s in stations:
        c = start + s * direction
        rings.append([c + half_width * (a * lateral + b * up) for a, b in offs])
    return np.array(rings)  # R x 4 x 3


def _tube_faces(first, n_rings):
    faces = []
    for r in range(n_rings - 1):
        a, b = first + 4 * r, first + 4 * (r + 1)
        for k in range(4):
            k1 = (k + 1) % 4
            faces.append((a + k, b + k, b + k1))
            faces.append((a + k, b + k1, a + k1))
    return faces


def box_mesh(half_extents, divisions, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Closed box surface as a grid of triangles with shared vertices."""
    hx, hy, hz = half_extents
    nx, ny, nz = divisions
    xs = np.linspace(-hx, hx, nx + 1)
    ys = np.linspace(-hy, hy, ny + 1)
    zs = np.linspace(-hz, hz, nz + 1)
    verts, faces, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    def grid(a_vals, b_vals, make):
        for i in range(len(a_vals) - 1):
            for j in range(len(b_vals) - 1):
                q = [vid(make(a_vals[i + di], b_vals[j + dj])) for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1))]
                faces.append((q[0], q[1], q[2]))
                faces.append((q[0], q[2], q[3]))

    for sgn in (-1.0, 1.0):
        grid(xs, ys, lambda a, b: np.array([a, b, sgn * hz]))
        grid(xs, zs, lambda a, b: np.array([a, sgn * hy, b]))
        grid(ys, zs, lambda a, b: np.array([sgn * hx, a, b]))
    return np.array(verts) + np.asarray(center, dtype=np.float64), np.array(faces, dtype=np.int64)


def toy_chain_model() -> SkinnedModel:
    """Two unit bones along +x: joint 0 at the origin, joint 1 at x=1, joint 2
    at x=2. Bone i is rigidly skinned to joint i.

    Pose basis: coefficient 0/1/2 rotate joint 1 about z/y/x by that many
    radians, coefficients 3/4/5 likewise for joint 2; the rest are zero.
    """
    x_axis = np.array([1.0, 0.0, 0.0])
    lateral = np.array([0.0, 1.0, 0.0])
    rings = _tube(np.zeros(3), x_axis, lateral, 0.1, [0.0, 0.5, 1.0, 1.5, 2.0])
    verts = rings.reshape(-1, 3)
    faces = np.array(_tube_faces(0, 5), dtype=np.int64)
    n = verts.shape[0]
    weights = np.zeros((n, 3))
    weights[:8, 0] = 1.0  # rings at x=0, 0.5
    weights[8:, 1] = 1.0  # rings at x=1, 1.5, 2
    pivots = np.zeros((3, n))
    for j, ring in enumerate((0, 2, 4)):
        pivots[j, 4 * ring:4 * ring + 4] = 0.25
    pose_basis = np.zeros((NUM_PCA, 6))
    for k, col in enumerate((2, 1, 0, 5, 4, 3)):
        pose_basis[k, col] = 1.0
    shape_basis = np.zeros((NUM_SHAPE, n, 3))
    shape_basis[0] = verts
    shape_basis[1, :, 0] = verts[:, 0]
    return SkinnedModel(verts, faces, shape_basis, pose_basis, np.array([-1, 0, 1]),
                        weights, pivots, pivots.copy(), fixed_rows=(0, 2))


# keypoint layout: 0 wrist, then per finger [base, middle, distal, tip]
FINGERTIPS = (4, 8, 12, 16, 20)
HAND_FIXED_ROWS = (0,) + FINGERTIPS


def toy_hand_model(seed: int = 0) -> SkinnedModel:
    """Procedural right hand, wrist at the origin, fingers toward -y, palm
    facing -z. 16 skinning joints, 21 keypoints, random PCA pose basis."""
    rng = np.random.default_rng(seed)
    palm_v, palm_f = box_mesh((0.04, 0.045, 0.0125), (4, 4, 1), center=(0.0, -0.045, 0.0))
    verts = [palm_v]
    faces = [palm_f]
    n = palm_v.shape[0]

    # wrist pivot: the four bottom corners average to the origin
    corners = [int(np.argmin(np.linalg.norm(palm_v - c, axis=1)))
               for c in ([0.04, 0, 0.0125], [-0.04, 0, 0.0125], [0.04, 0, -0.0125], [-0.04, 0, -0.0125])]

    # (base position, direction, segment lengths, half width)
    fingers = [
        (np.array([-0.04, -0.03, 0.0]), np.array([-0.7071, -0.7071, 0.0]), (0.035, 0.03, 0.025), 0.0095),
        (np.array([-0.03, -0.09, 0.0]), np.array([0.0, -1.0, 0.0]), (0.04, 0.025, 0.02), 0.008),
        (np.array([-0.01, -0.09, 0.0]), np.array([0.0, -1.0, 0.0]), (0.045, 0.028, 0.022), 0.008),
        (np.array([0.01, -0.09, 0.0]), np.array([0.0, -1.0, 0.0]), (0.042, 0.026, 0.021), 0.0078),
        (np.array([0.03, -0.085, 0.0]), np.array([0.0, -1.0, 0.0]), (0.033, 0.02, 0.018), 0.007),
    ]
    J = 16
    parents = np.array([-1] + [p for f in range(5) for p in (0, 1 + 3 * f, 2 + 3 * f)])
    weight_rows = {}
    pivot_sets = {0: corners}
    tip_vertex = {}
    finger_axes = []
    for f, (base, d, lengths, hw) in enumerate(fingers):
        d = d / np.linalg.norm(d)
        lat = np.array([-d[1], d[0], 0.0])
        finger_axes.append((base, d, lat))
        l1, l2, l3 = lengths
        stations = [0.0, l1 / 2, l1, l1 + l2 / 2, l1 + l2, l1 + l2 + l3 / 2, l1 + l2 + l3]
        rings = _tube(base, d, lat, hw, stations)
        first = n
        fv = list(rings.reshape(-1, 3))
        apex = base + (l1 + l2 + l3 + hw) * d
        fv.append(apex)
        ff = _tube_faces(first, len(stations))
        last = first + 4 * (len(stations) - 1)
        for k in range(4):
            ff.append((last + k, last + (k + 1) % 4, first + 28))
        ff.append((first + 0, first + 2, first + 1))
        ff.append((first + 0, first + 3, first + 2))
        verts.append(np.array(fv))
        faces.append(np.array(ff, dtype=np.int64))
        jb, jm, jd = 1 + 3 * f, 2 + 3 * f, 3 + 3 * f
        # ring index -> skinning weights
        ring_weights = [
            {0: 0.5, jb: 0.5}, {jb: 1.0}, {jb: 0.5, jm: 0.5}, {jm: 1.0},
            {jm: 0.5, jd: 0.5}, {jd: 1.0}, {jd: 1.0},
        ]
        for r, wr in enumerate(ring_weights):
            for k in range(4):
                weight_rows[first + 4 * r + k] = wr
        weight_rows[first + 28] = {jd: 1.0}
        pivot_sets[jb] = list(range(first, first + 4))
        pivot_sets[jm] = list(range(first + 8, first + 12))
        pivot_sets[jd] = list(range(first + 16, first + 20))
        tip_vertex[f] = first + 28
        n += 29

    V = np.concatenate(verts)
    F = np.concatenate(faces)
    W = np.zeros((n, J))
    W[:palm_v.shape[0], 0] = 1.0
    for i, wr in weight_rows.items():
        for j, w in wr.items():
            W[i, j] = w

    pivots = np.zeros((J, n))
    for j, idx in pivot_sets.items():
        pivots[j, idx] = 1.0 / len(idx)
    reg = np.zeros((NUM_KEYPOINTS, n))
    reg[0] = pivots[0]
    for f in range(5):
        for k in range(3):
            reg[1 + 4 * f + k] = pivots[1 + 3 * f + k]
        reg[4 + 4 * f, tip_vertex[f]] = 1.0

    # pose basis: mostly flexion about each finger's lateral axis, some abduction
    pose_basis = np.zeros((NUM_PCA, 3 * (J - 1)))
    z = np.array([0.0, 0.0, 1.0])
    for k in range(NUM_PCA):
        scale = 0.35 / (1.0 + 0.15 * k)
        for f in range(5):
            _, _, lat = finger_axes[f]
            for s in range(3):
                j = 1 + 3 * f + s
                axis = rng.normal(0.0, scale) * lat
                if s == 0:
                    axis = axis + rng.normal(0.0, 0.3 * scale) * z
                pose_basis[k, 3 * (j - 1):3 * j] = axis

    shape_basis = np.zeros((NUM_SHAPE, n, 3))
    shape_basis[0] = 0.05 * V
    for f, (base, d, lat) in enumerate(finger_axes):
        lo = palm_v.shape[0] + 29 * f
        s = (V[lo:lo + 29] - base) @ d
        shape_basis[1, lo:lo + 29] = 0.06 * s[:, None] * d
    shape_basis[2, :, 0] = 0.06 * V[:, 0]
    shape_basis[3, :, 2] = 0.1 * V[:, 2]
    for k in range(4, NUM_SHAPE):
        A = rng.normal(0.0, 0.03, (3, 3))
        shape_basis[k] = V @ (A + A.T).T / 2
    return SkinnedModel(V, F, shape_basis, pose_basis, parents, W, pivots, reg,
                        fixed_rows=HAND_FIXED_ROWS)


# --- .skin.json I/O ----------------------------------------------------------
# The manifest lists each array's dtype, shape and byte offset inside a
# sibling .bin blob (little-endian float32 / uint32, as in .meshb).

_FLOAT_FIELDS = ("template_vertices", "shape_basis", "pose_basis", "skinning_weights",
                 "pivot_regressor", "joint_regressor")


def save_model(path, model: SkinnedModel) -> None:
    path = Path(path)
    if not path.name.endswith(".skin.json"):
        raise ValueError("model manifest must end with .skin.json")
    blob_name = path.name[: -len(".skin.json")] + ".skin.bin"
    arrays, chunks, offset = {}, [], 0
    for name in _FLOAT_FIELDS + ("faces",):
        a = getattr(model, name)
        data = a.astype("<u4" if name == "faces" else "<f4").tobytes()
        arrays[name] = {"dtype": "u32" if name == "faces" else "f32",
                        "shape": list(a.shape), "offset": offset}
        chunks.append(data)
        offset += len(data)
    manifest = {"format": "skinned-model/1", "blob": blob_name, "arrays": arrays,
                "parents": model.parents.tolist(), "fixed_rows": list(model.fixed_rows)}
    (path.parent / blob_name).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1))


def load_model(path) -> SkinnedModel:
    path = Path(path)
    manifest = json.loads(path.read_text())
    blob = (path.parent / manifest["blob"]).read_bytes()
    kw = {}
    for name, spec in manifest["arrays"].items():
        dt = "<u4" if spec["dtype"] == "u32" else "<f4"
        count = int(np.prod(spec["shape"]))
        a = np.frombuffer(blob, dt, count, spec["offset"]).reshape(spec["shape"])
        kw[name] = a.astype(np.int64 if name == "faces" else np.float64)
    # float32 storage perturbs row sums; restore them exactly
    for name in ("skinning_weights",):
        kw[name] = kw[name] / kw[name].sum(1, keepdims=True)
    for name in ("pivot_regressor", "joint_regressor"):
        kw[name] = kw[name] + (1.0 - kw[name].sum(1, keepdims=True)) / kw[name].shape[1]
    return SkinnedModel(parents=np.array(manifest["parents"]),
                        fixed_rows=tuple(manifest["fixed_rows"]), **kw)
