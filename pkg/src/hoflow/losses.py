"""Supervised reconstruction terms, pose/shape regularizers and their
weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .geometry import as_tensor


@dataclass(frozen=True)
class LossWeights:
    # harness defaults, not published values
    lambda_J: float = 1.0
    lambda_beta: float = 1e-3
    lambda_theta: float = 1e-3
    photo: float = 1.0

    def __post_init__(self):
        for name in ("lambda_J", "lambda_beta", "lambda_theta", "photo"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {v}")


def _l2(pred, gt, reduction: str) -> torch.Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    sq = ((pred - gt) ** 2).sum(-1)
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def joint_loss(pred, gt, reduction: str = "mean") -> torch.Tensor:
    """Mean squared Euclidean distance over joints (m^2)."""
    return _l2(pred, gt, reduction)


def object_vertex_loss(pred, gt, reduction: str = "mean") -> torch.Tensor:
    return _l2(pred, gt, reduction)


def regularizers(params) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_theta, L_beta): squared norms of the PCA pose and shape coefficients."""
    return (params.pca_pose**2).sum(), (params.shape**2).sum()


def combined_loss(components: dict, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """L_obj + lJ L_J + lb L_beta + lt L_theta (+ w_photo L_photo if present).

    ``components`` keys: "object", "joints", "beta", "theta", optional "photo".
    """
    for k, v in components.items():
        if float(as_tensor(v).detach()) < 0:
            raise ValueError(f"loss component {k!r} is negative")
    total = (components["object"]
             + weights.lambda_J * components["joints"]
             + weights.lambda_beta * components["beta"]
             + weights.lambda_theta * components["theta"])
    if components.get("photo") is not None:
        total = total + weights.photo * components["photo"]
    return as_tensor(total)
