"""Training loss: per-frame, per-component distances between box sequences.

Centers are compared in linear space, sizes in log space, each residual
scaled by its sigma and passed through the smooth-L1 penalty. A
trajectory's distance is the frame-mean of the four component terms, so
loss magnitude is independent of clip length; a batch averages over all
its trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .geometry import Box, Sigmas, DEFAULT_SIGMAS
from .model import boxes_to_tensor
from .trajsynth import Trajectory

__all__ = [
    "LossReport",
    "smooth_l1_terms",
    "component_distances",
    "trajectory_distance",
    "batch_loss",
]


def smooth_l1_terms(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def component_distances(gt: torch.Tensor, pred: torch.Tensor, s: Sigmas) -> torch.Tensor:
    """(..., 4) boxes -> (..., 4) distance terms (dx, dy, dw, dh)."""
    if gt.shape != pred.shape or gt.shape[-1] != 4:
        raise ValueError(f"box tensors must share a (..., 4) shape, got {tuple(gt.shape)} vs {tuple(pred.shape)}")
    if (pred[..., 2:] <= 0).any():
        raise ValueError("predicted boxes must have positive sides")
    dx = smooth_l1_terms((gt[..., 0] - pred[..., 0]) / s.sx)
    dy = smooth_l1_terms((gt[..., 1] - pred[..., 1]) / s.sy)
    dw = smooth_l1_terms(torch.log(gt[..., 2] / pred[..., 2]) / s.sw)
    dh = smooth_l1_terms(torch.log(gt[..., 3] / pred[..., 3]) / s.sh)
    return torch.stack([dx, dy, dw, dh], dim=-1)


def _as_box_tensor(value, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(value, Trajectory):
        return boxes_to_tensor(value.boxes, dtype=dtype)
    if isinstance(value, (list, tuple)) and value and isinstance(value[0], Box):
        return boxes_to_tensor(value, dtype=dtype)
    t = torch.as_tensor(value)
    return t


def trajectory_distance(gt, pred_boxes, s: Sigmas = DEFAULT_SIGMAS) -> torch.Tensor:
    """Mean over frames of the summed component distances (a 0-dim tensor).

    Every frame contributes, including masked ones: ground truth is
    supervised at virtual locations too. Accepts Trajectory / Box lists
    or (T, 4) tensors.
    """
    gt_t = _as_box_tensor(gt)
    pred_t = _as_box_tensor(pred_boxes, dtype=gt_t.dtype if not gt_t.is_floating_point() else gt_t.dtype)
    if gt_t.shape != pred_t.shape:
        raise ValueError(f"length mismatch: gt {tuple(gt_t.shape)} vs pred {tuple(pred_t.shape)}")
    return component_distances(gt_t, pred_t, s).sum(dim=-1).mean()


@dataclass
class LossReport:
    """Batch loss with its per-component and per-frame decompositions.

    total == per_component.sum() == per_frame.mean(); all terms >= 0.
    ``total`` keeps the autograd graph when inputs require grad.
    """

    total: torch.Tensor
    per_component: torch.Tensor  # (4,): dx, dy, dw, dh means
    per_frame: torch.Tensor  # (T,) means of the per-frame component sums

    def scalars(self) -> dict[str, float]:
        comp = self.per_component.detach()
        return {
            "total": float(self.total.detach()),
            "dx": float(comp[0]),
            "dy": float(comp[1]),
            "dw": float(comp[2]),
            "dh": float(comp[3]),
        }


def batch_loss(gt: torch.Tensor, pred: torch.Tensor, s: Sigmas = DEFAULT_SIGMAS) -> LossReport:
    """Average trajectory distance over a batch.

    gt and pred are (N, K, T, 4); the total is the arithmetic mean over
    all N*K trajectories of their frame-mean distances, which (for the
    shared T) equals the mean over every (clip, trajectory, frame).
    """
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.ndim != 4 or gt.shape[-1] != 4:
        raise ValueError(f"expected (N, K, T, 4) ground truth, got {tuple(gt.shape)}")
    if gt.numel() == 0:
        raise ValueError("empty batch")
    comps = component_distances(gt, pred, s)  # (N, K, T, 4)
    return LossReport(
        total=comps.sum(dim=-1).mean(),
        per_component=comps.mean(dim=(0, 1, 2)),
        per_frame=comps.sum(dim=-1).mean(dim=(0, 1)),
    )
