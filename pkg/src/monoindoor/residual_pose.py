"""Initial plus iterative residual pose estimation through re-synthesized views."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .depth_factorization import IMAGE_MEAN, IMAGE_STD, he_init
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    bilinear_sample,
    compose,
    invert,
    pose_vector_to_transform,
    warp_coordinates,
)

POSE_OUTPUT_SCALE = 0.01


class PoseEncoder(nn.Module):
    def __init__(self, widths=(16, 32, 64, 128, 256)):
        super().__init__()
        layers = []
        cin = 6
        for i, w in enumerate(widths):
            layers.append(nn.Conv2d(cin, w, 7 if i == 0 else 3, stride=2, padding=3 if i == 0 else 1))
            layers.append(nn.ReLU())
            cin = w
        self.net = nn.Sequential(*layers)
        self.channels = cin
        he_init(self)

    def forward(self, a, b):
        return self.net((torch.cat([a, b], 1) - IMAGE_MEAN) / IMAGE_STD)


class PoseHead(nn.Module):
    """Regresses a 6-vector; the last layer starts at zero so the first prediction is the identity."""

    def __init__(self, channels: int, width: int = 256):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, width, 1)
        self.conv = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, 6, 1)
        he_init(self)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feats) -> RigidTransform:
        x = F.relu(self.squeeze(feats))
        x = F.relu(self.conv(x))
        raw = POSE_OUTPUT_SCALE * self.out(x).mean(dim=(2, 3))
        # tanh keeps every axis-angle component below 1 rad, so the norm stays under pi
        vec = torch.cat([torch.tanh(raw[:, :3]), raw[:, 3:]], 1)
        return pose_vector_to_transform(vec)


class PoseNet(nn.Module):
    """Shared encoder with independent heads for the initial and the residual pose."""

    def __init__(self, encoder_widths=(16, 32, 64, 128, 256), head_width=256):
        super().__init__()
        self.encoder = PoseEncoder(encoder_widths)
        self.initial_head = PoseHead(self.encoder.channels, head_width)
        self.residual_head = PoseHead(self.encoder.channels, head_width)


def _check_model(model):
    if model is None:
        raise ValueError("pose model is not initialized")


def predict_initial_pose(target, source, model: Optional[PoseNet]) -> RigidTransform:
    """Source-to-target motion ``T_{t'->t}`` for each pair in the batch."""
    _check_model(model)
    if target.shape != source.shape:
        raise ValueError("target and source must have the same shape")
    return model.initial_head(model.encoder(target, source))


def residual_pose_step(target, synth, model: Optional[PoseNet]) -> RigidTransform:
    """Pose of a synthesized view relative to the target."""
    _check_model(model)
    if target.shape != synth.shape:
        raise ValueError("target and synthesized view must have the same shape")
    return model.residual_head(model.encoder(target, synth))


@dataclass
class PoseIterationTrace:
    initial: RigidTransform
    residuals: List[RigidTransform] = field(default_factory=list)
    synth_views: List[torch.Tensor] = field(default_factory=list)
    valid_masks: List[torch.Tensor] = field(default_factory=list)
    final: Optional[RigidTransform] = None

    @property
    def target_to_source(self) -> RigidTransform:
        return invert(self.final)


def refine_pose(
    target: torch.Tensor,
    source: torch.Tensor,
    depth_t: torch.Tensor,
    k: CameraIntrinsics,
    initial: RigidTransform,
    residual_fn: Callable[[torch.Tensor, torch.Tensor], RigidTransform],
    n_iters: int,
) -> PoseIterationTrace:
    """Warp the source with ``initial``, then repeatedly warp the latest view by each residual.

    Residual poses compose on the left of the running product, matching the
    order in which the warps are applied.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    grid = warp_coordinates(depth_t, invert(initial), k)
    view = bilinear_sample(source, grid)
    valid = grid.valid
    trace = PoseIterationTrace(initial=initial, synth_views=[view], valid_masks=[valid], final=initial)
    for _ in range(n_iters):
        res = residual_fn(target, view)
        grid = warp_coordinates(depth_t, invert(res), k)
        carried = bilinear_sample(valid.unsqueeze(1).to(view.dtype), grid).squeeze(1)
        view = bilinear_sample(view, grid)
        valid = grid.valid & (carried > 1 - 1e-6)
        trace.residuals.append(res)
        trace.synth_views.append(view)
        trace.valid_masks.append(valid)
        trace.final = compose(res, trace.final)
    return trace


def iterative_pose(target, source, depth_t, k: CameraIntrinsics, n_iters: int, model: Optional[PoseNet]) -> PoseIterationTrace:
    initial = predict_initial_pose(target, source, model)
    return refine_pose(
        target, source, depth_t, k, initial, lambda tgt, view: residual_pose_step(tgt, view, model), n_iters
    )
