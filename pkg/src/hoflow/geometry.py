"""Rotations, rigid transforms, pinhole projection and the depth/pixel
translation encoding used for hand and object global pose.

Differentiable quantities are float64 torch tensors; anything array-like is
accepted on input.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64
# Below this angle Rodrigues' coefficients switch to their Taylor expansions.
SMALL_ANGLE = 1e-6


class InvalidPoseError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int
    z_off: float = 0.40

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ValueError(f"principal point {self.principal_point} outside the image")
        if not self.z_off > 0:
            raise ValueError(f"z_off must be positive, got {self.z_off}")
        object.__setattr__(self, "principal_point", (float(cx), float(cy)))

    @classmethod
    def centered(cls, focal: float, width: int, height: int, z_off: float = 0.40):
        return cls(focal, (width / 2.0, height / 2.0), width, height, z_off)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "principal_point": list(self.principal_point),
            "width": self.width,
            "height": self.height,
            "z_off": self.z_off,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["focal"]), tuple(d["principal_point"]), int(d["width"]),
                   int(d["height"]), float(d.get("z_off", 0.40)))


@dataclass
class RigidPose:
    """Global pose: axis-angle rotation plus (d_f, t_u, t_v) translation code.

    ``d_f`` is in meters per pixel, ``t_u``/``t_v`` in pixels relative to the
    principal point.
    """

    rotation: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DTYPE))
    d_f: torch.Tensor = field(default_factory=lambda: torch.zeros((), dtype=DTYPE))
    t_u: torch.Tensor = field(default_factory=lambda: torch.zeros((), dtype=DTYPE))
    t_v: torch.Tensor = field(default_factory=lambda: torch.zeros((), dtype=DTYPE))

    def __post_init__(self):
        self.rotation = as_tensor(self.rotation).reshape(3)
        self.d_f = as_tensor(self.d_f).reshape(())
        self.t_u = as_tensor(self.t_u).reshape(())
        self.t_v = as_tensor(self.t_v).reshape(())

    def vector(self) -> torch.Tensor:
        """Six-vector [rx, ry, rz, d_f, t_u, t_v]."""
        return torch.cat([self.rotation, torch.stack([self.d_f, self.t_u, self.t_v])])

    @classmethod
    def from_vector(cls, v) -> "RigidPose":
        v = as_tensor(v)
        return cls(v[0:3], v[3], v[4], v[5])


@dataclass
class Mesh:
    vertices: torch.Tensor
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_tensor(self.vertices).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = self.vertices.shape[0]
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError(f"face index out of range for {n} vertices")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def same_topology(self, other: "Mesh") -> bool:
        return self.num_vertices == other.num_vertices and np.array_equal(self.faces, other.faces)

    def detach(self) -> "Mesh":
        return Mesh(self.vertices.detach(), self.faces)


def concat_meshes(meshes) -> Mesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.num_vertices
    return Mesh(torch.cat(verts, 0), np.concatenate(faces, 0))


def axis_angle_to_matrices(r) -> torch.Tensor:
    """Batched Rodrigues: (..., 3) axis-angle -> (..., 3, 3) rotations.

    R = I + a K + b K^2 with K = skew(r), a = sin(t)/t, b = (1 - cos(t))/t^2;
    both coefficients use their Taylor expansions below SMALL_ANGLE.
    """
    r = as_tensor(r)
    theta2 = (r * r).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    zero = torch.zeros_like(r[..., 0])
    K = torch.stack([
        torch.stack([zero, -r[..., 2], r[..., 1]], -1),
        torch.stack([r[..., 2], zero, -r[..., 0]], -1),
        torch.stack([-r[..., 1], r[..., 0], zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=r.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def axis_angle_to_matrix(r) -> torch.Tensor:
    return axis_angle_to_matrices(as_tensor(r).reshape(3))


def matrix_to_axis_angle(R) -> np.ndarray:
    """Inverse of axis_angle_to_matrix (numpy, not differentiable)."""
    from scipy.spatial.transform import Rotation

    R = R.detach().numpy() if isinstance(R, torch.Tensor) else np.asarray(R, dtype=np.float64)
    return Rotation.from_matrix(R).as_rotvec()


def decode_translation(pose: RigidPose, cam: CameraIntrinsics) -> torch.Tensor:
    z = pose.d_f * cam.focal + cam.z_off
    if not bool(z > 0):
        raise InvalidPoseError(f"decoded depth {float(z):.6g} m is not positive")
    x = pose.t_u * z / cam.focal
    y = pose.t_v * z / cam.focal
    return torch.stack([x, y, z])


def encode_translation(t, cam: CameraIntrinsics) -> tuple[float, float, float]:
    """(d_f, t_u, t_v) such that decode_translation gives back ``t``."""
    x, y, z = (float(c) for c in np.asarray(t, dtype=np.float64).reshape(3))
    if z <= 0:
        raise InvalidPoseError(f"depth {z} is not positive")
    return (z - cam.z_off) / cam.focal, cam.focal * x / z, cam.focal * y / z


def project(points, cam: CameraIntrinsics) -> torch.Tensor:
    """Pinhole projection to continuous pixel coordinates (u, v)."""
    p = as_tensor(points).reshape(-1, 3)
    z = p[:, 2]
    bad = torch.nonzero(~(z.detach() > 0)).flatten()
    if bad.numel():
        i = int(bad[0])
        raise ProjectionError(f"point {i} has non-positive depth {float(z[i]):.6g}")
    cx, cy = cam.principal_point
    u = cam.focal * p[:, 0] / z + cx
    v = cam.focal * p[:, 1] / z + cy
    return torch.stack([u, v], dim=1)


def apply_rigid(mesh: Mesh, pose: RigidPose, cam: CameraIntrinsics) -> Mesh:
    """Rotate model-space vertices about the model origin, then translate."""
    R = axis_angle_to_matrix(pose.rotation)
    t = decode_translation(pose, cam)
    return Mesh(mesh.vertices @ R.T + t, mesh.faces)


# --- .meshb I/O --------------------------------------------------------------
# Layout: u32 header length, UTF-8 JSON header, f32 LE vertices, u32 LE faces.

def save_mesh(path, mesh: Mesh) -> None:
    verts = mesh.vertices.detach().numpy().astype("<f4")
    faces = mesh.faces.astype("<u4")
    header = json.dumps({"vertex_count": int(verts.shape[0]),
                         "face_count": int(faces.shape[0])}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def load_mesh(path) -> Mesh:
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + hlen])
    nv, nf = header["vertex_count"], header["face_count"]
    off = 4 + hlen
    verts = np.frombuffer(data, "<f4", nv * 3, off).reshape(nv, 3)
    off += nv * 12
    faces = np.frombuffer(data, "<u4", nf * 3, off).reshape(nf, 3)
    if off + nf * 12 != len(data):
        raise ValueError(f"{path}: size does not match header")
    return Mesh(verts.astype(np.float64), faces.astype(np.int64))
