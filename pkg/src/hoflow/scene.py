"""The 37-parameter hand-object scene and its forward pass."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import (CameraIntrinsics, Mesh, RigidPose, apply_rigid, as_tensor,
                       concat_meshes)
from .hand_model import NUM_PCA, NUM_SHAPE, HandParams, SkinnedModel, hand_forward

NUM_PARAMS = 6 + 6 + NUM_PCA + NUM_SHAPE  # 37

PARAM_NAMES = (
    ["obj_rx", "obj_ry", "obj_rz", "obj_df", "obj_tu", "obj_tv",
     "hand_rx", "hand_ry", "hand_rz", "hand_df", "hand_tu", "hand_tv"]
    + [f"pca{i}" for i in range(NUM_PCA)]
    + [f"shape{i}" for i in range(NUM_SHAPE)]
)

OBJECT_SLICE = slice(0, 6)
HAND_SLICE = slice(6, NUM_PARAMS)
ROTATION_SLICES = (slice(0, 3), slice(6, 9))


def natural_units(focal: float, depth_unit: float = 0.01, pixel_unit: float = 10.0) -> np.ndarray:
    """Raw-parameter size of one optimizer unit per coordinate.

    Rotations in radians, d_f such that one unit is ``depth_unit`` meters of
    depth, t_u/t_v in ``pixel_unit`` pixels, PCA/shape coefficients as is.
    """
    rigid = [1.0, 1.0, 1.0, depth_unit / focal, pixel_unit, pixel_unit]
    return np.array(rigid + rigid + [1.0] * (NUM_PCA + NUM_SHAPE))


@dataclass
class SceneParams:
    object: RigidPose = field(default_factory=RigidPose)
    hand: HandParams = field(default_factory=HandParams)

    def vector(self) -> torch.Tensor:
        h = self.hand
        return torch.cat([self.object.vector(), h.global_pose.vector(), h.pca_pose, h.shape])

    def numpy(self) -> np.ndarray:
        return self.vector().detach().numpy().copy()

    @classmethod
    def from_vector(cls, v) -> "SceneParams":
        v = as_tensor(v).reshape(-1)
        if v.shape[0] != NUM_PARAMS:
            raise ValueError(f"expected {NUM_PARAMS} parameters, got {v.shape[0]}")
        obj = RigidPose.from_vector(v[0:6])
        hand = HandParams(v[12:12 + NUM_PCA], v[12 + NUM_PCA:], RigidPose.from_vector(v[6:12]))
        return cls(obj, hand)

    def to_json(self) -> str:
        return json.dumps(dict(zip(PARAM_NAMES, self.numpy().tolist())), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneParams":
        d = json.loads(text)
        missing = set(PARAM_NAMES) - set(d)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        return cls.from_vector([float(d[k]) for k in PARAM_NAMES])


@dataclass(frozen=True)
class SceneModels:
    """Reference models: origin-centered object mesh and the hand model, each
    with per-vertex RGB colors used as texture."""

    object_mesh: Mesh
    object_colors: np.ndarray
    hand: SkinnedModel
    hand_colors: np.ndarray

    @property
    def colors(self) -> np.ndarray:
        return np.concatenate([self.hand_colors, self.object_colors])

    @property
    def num_hand_vertices(self) -> int:
        return self.hand.num_vertices


def scene_forward(params: SceneParams, models: SceneModels, cam: CameraIntrinsics):
    """(hand mesh, object mesh, hand joints) in the camera frame."""
    hand_mesh, joints = hand_forward(models.hand, params.hand, cam)
    obj_mesh = apply_rigid(models.object_mesh, params.object, cam)
    return hand_mesh, obj_mesh, joints


def scene_mesh(hand_mesh: Mesh, obj_mesh: Mesh) -> Mesh:
    """Hand vertices first, then object vertices."""
    return concat_meshes([hand_mesh, obj_mesh])
