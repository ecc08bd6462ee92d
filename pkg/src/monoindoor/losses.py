"""Self-supervised training objective: photometric reprojection, smoothness, depth consistency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .geometry import CameraIntrinsics, RigidTransform, bilinear_sample, invert, transform_depth

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    tau: float = 0.001
    gamma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau < 0 or self.gamma < 0:
            raise ValueError("tau and gamma must be non-negative")


@dataclass
class LossBreakdown:
    photometric: torch.Tensor
    smoothness: torch.Tensor
    consistency: torch.Tensor
    total: torch.Tensor
    automask_fraction: float

    def as_dict(self) -> dict:
        def scalar(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return {
            "photometric": scalar(self.photometric),
            "smoothness": scalar(self.smoothness),
            "consistency": scalar(self.consistency),
            "total": scalar(self.total),
            "automask_fraction": float(self.automask_fraction),
        }


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over 3x3 windows (edge-replicated), averaged over channels -> ``(B, H, W)``."""
    _check_same_shape(a, b)

    def mean3(x):
        return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)

    mu_a = mean3(a)
    mu_b = mean3(b)
    var_a = mean3(a * a) - mu_a * mu_a
    var_b = mean3(b * b) - mu_b * mu_b
    cov = mean3(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(1)


def photometric_error(target: torch.Tensor, synth: torch.Tensor, alpha: float = 0.85) -> torch.Tensor:
    _check_same_shape(target, synth)
    l1 = (target - synth).abs().mean(1)
    if alpha == 0:
        return l1
    return (alpha / 2) * (1 - ssim_map(target, synth)) + (1 - alpha) * l1


def reprojection_loss(
    target: torch.Tensor,
    synths: Sequence[torch.Tensor],
    raw_sources: Sequence[torch.Tensor],
    alpha: float = 0.85,
    valid: Optional[Sequence[torch.Tensor]] = None,
    per_pixel_min: bool = True,
    automask: bool = True,
    identity_jitter: Optional[torch.Tensor] = None,
):
    """Photometric loss over synthesized views with auto-masking.

    Returns ``(loss, automask_fraction)``. A pixel is kept when its best
    synthesized error is strictly below the best error of the unwarped
    sources. Pixels that fall outside a view are excluded from that view.

    ``identity_jitter`` (``(B, H, W)``) multiplies the identity errors by
    ``1 + jitter`` before the comparison. Training uses tiny random jitter to
    break exact ties when every pose is still the identity; static pixels
    have zero identity error and stay masked regardless.
    """
    if len(synths) == 0:
        raise ValueError("reprojection_loss needs at least one synthesized view")
    if len(raw_sources) != len(synths):
        raise ValueError("raw_sources must align with synths")
    if valid is None:
        valid = [torch.ones_like(target[:, 0], dtype=torch.bool) for _ in synths]

    inf = torch.tensor(float("inf"), dtype=target.dtype, device=target.device)
    errors = torch.stack(
        [torch.where(m, photometric_error(target, s, alpha), inf) for s, m in zip(synths, valid)]
    )
    if automask:
        identity = torch.stack([photometric_error(target, s, alpha) for s in raw_sources]).min(0).values
        if identity_jitter is not None:
            identity = identity * (1 + identity_jitter)
    else:
        identity = torch.full_like(errors[0], float("inf"))

    n_pixels = errors[0].numel()
    if per_pixel_min:
        best = errors.min(0).values
        keep = best < identity
        n_kept = keep.sum()
        loss = torch.where(keep, best, torch.zeros_like(best)).sum() / n_kept.clamp(min=1)
        return loss, float(n_kept) / n_pixels

    # literal sum over views of each view's masked mean
    loss = target.new_zeros(())
    kept_total = 0
    for err in errors:
        keep = err < identity
        kept = keep.sum()
        kept_total += int(kept)
        loss = loss + torch.where(keep, err, torch.zeros_like(err)).sum() / kept.clamp(min=1)
    return loss, kept_total / (n_pixels * len(errors))


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness of mean-normalized inverse depth."""
    if depth.shape[-2:] != image.shape[-2:]:
        raise ValueError("depth and image sizes differ")
    if not bool((depth > 0).all()):
        raise ValueError("depth must be positive")
    disp = 1.0 / depth
    disp = disp / disp.mean(dim=(-2, -1), keepdim=True)
    dx_d = (disp[..., :, 1:] - disp[..., :, :-1]).abs()
    dy_d = (disp[..., 1:, :] - disp[..., :-1, :]).abs()
    dx_i = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(-3)
    dy_i = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(-3)
    return (dx_d * torch.exp(-dx_i)).mean() + (dy_d * torch.exp(-dy_i)).mean()


def depth_consistency_loss(
    depth_t: torch.Tensor, depth_s: torch.Tensor, t_to_s: RigidTransform, k: CameraIntrinsics
) -> torch.Tensor:
    """Normalized difference between target depth and source depth re-expressed in the target frame."""
    grid, _ = transform_depth(depth_t, t_to_s, k)
    sampled = bilinear_sample(depth_s.unsqueeze(1), grid).squeeze(1)
    # source-frame point seen through the sampled coordinate, moved back into the target frame
    u, v = grid.coords[..., 0], grid.coords[..., 1]
    z_s = torch.where(grid.valid, sampled, torch.ones_like(sampled))
    points_s = torch.stack([z_s * (u - k.cx) / k.fx, z_s * (v - k.cy) / k.fy, z_s], dim=-1)
    back = invert(t_to_s)
    r = back.rotation.unsqueeze(-3).unsqueeze(-3)
    z_t = (r @ points_s.unsqueeze(-1)).squeeze(-1)[..., 2] + back.translation[..., None, None, 2]

    valid = grid.valid & (sampled > 0) & (z_t > 1e-6)
    if not bool(valid.any()):
        return depth_t.new_zeros(())
    z_t = torch.where(valid, z_t, depth_t)
    diff = (depth_t - z_t).abs() / (depth_t + z_t)
    return torch.where(valid, diff, torch.zeros_like(diff)).sum() / valid.sum()


def total_loss(
    photometric, smoothness, consistency, weights: LossWeights = LossWeights(), automask_fraction: float = 1.0
) -> LossBreakdown:
    total = photometric + weights.tau * smoothness + weights.gamma * consistency
    return LossBreakdown(photometric, smoothness, consistency, total, automask_fraction)
