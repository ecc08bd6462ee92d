"""Differentiable pinhole-camera geometry.

Conventions used throughout the package:

- images are ``(B, C, H, W)`` tensors, depth maps ``(B, H, W)``;
- pixel centres sit on integer coordinates, ``(0, 0)`` is the centre of the
  top-left pixel, ``u`` runs along the width and ``v`` along the height;
- a ``RigidTransform`` ``T_a_to_b`` maps points expressed in frame ``a`` into
  frame ``b``: ``x_b = R @ x_a + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

MIN_WARP_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for the same camera after resizing the image by ``factor``."""
        # pixel centres on integers: u' + 0.5 = factor * (u + 0.5)
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass
class RigidTransform:
    """Element of SE(3), optionally batched over leading dimensions.

    rotation: ``(..., 3, 3)`` orthonormal, translation: ``(..., 3)`` metres.
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None) -> "RigidTransform":
        eye = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        return cls(eye, torch.zeros(*batch_shape, 3, dtype=dtype, device=device))

    @classmethod
    def from_matrix(cls, matrix, dtype=torch.float64) -> "RigidTransform":
        """Build from a ``(..., 4, 4)`` or ``(..., 3, 4)`` matrix.

        The rotation block is projected onto SO(3) (polar decomposition), so
        slightly drifted matrices read from disk come back valid.
        """
        m = torch.as_tensor(matrix, dtype=dtype)
        return cls(project_to_so3(m[..., :3, :3]), m[..., :3, 3].clone())

    def matrix(self) -> torch.Tensor:
        batch = self.rotation.shape[:-2]
        out = torch.zeros(*batch, 4, 4, dtype=self.rotation.dtype, device=self.rotation.device)
        out[..., :3, :3] = self.rotation
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform ``(..., 3)`` points; the transform broadcasts over point dims."""
        r = self.rotation
        t = self.translation
        extra = points.dim() - 1 - (r.dim() - 2)
        for _ in range(extra):
            r = r.unsqueeze(-3)
            t = t.unsqueeze(-2)
        return (r @ points.unsqueeze(-1)).squeeze(-1) + t

    def to(self, *args, **kwargs) -> "RigidTransform":
        return RigidTransform(self.rotation.to(*args, **kwargs), self.translation.to(*args, **kwargs))

    def detach(self) -> "RigidTransform":
        return RigidTransform(self.rotation.detach(), self.translation.detach())

    def __getitem__(self, idx) -> "RigidTransform":
        return RigidTransform(self.rotation[idx], self.translation[idx])

    def rotation_angle(self) -> torch.Tensor:
        cos = (self.rotation.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
        return torch.arccos(cos.clamp(-1.0, 1.0))


def project_to_so3(matrix: torch.Tensor) -> torch.Tensor:
    """Closest rotation in the Frobenius sense (polar factor via SVD)."""
    u, _, vh = torch.linalg.svd(matrix)
    d = torch.sign(torch.linalg.det(u @ vh))
    fix = torch.ones_like(matrix[..., 0])
    fix[..., -1] = d
    return u @ torch.diag_embed(fix) @ vh


def skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, with Taylor branches so it stays smooth at zero."""
    theta2 = (axis_angle * axis_angle).sum(-1)
    small = theta2 < 1e-8
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / (theta * theta))
    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def pose_vector_to_transform(vec: torch.Tensor) -> RigidTransform:
    """``(..., 6)`` pose vector ``[axis_angle | translation]`` to a transform."""
    if vec.shape[-1] != 6:
        raise ValueError(f"pose vector must have 6 entries, got shape {tuple(vec.shape)}")
    return RigidTransform(axis_angle_to_matrix(vec[..., :3]), vec[..., 3:])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    rotation = a.rotation @ b.rotation
    translation = (a.rotation @ b.translation.unsqueeze(-1)).squeeze(-1) + a.translation
    return RigidTransform(rotation, translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.transpose(-1, -2)
    return RigidTransform(rt, -(rt @ t.translation.unsqueeze(-1)).squeeze(-1))


def pixel_lattice(height: int, width: int, dtype=torch.float64, device=None):
    """Integer pixel-centre coordinates ``(u, v)``, each ``(H, W)``."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return u, v


def _normalized_lattice(k: CameraIntrinsics, dtype, device):
    u, v = pixel_lattice(k.height, k.width, dtype, device)
    return u, v, (u - k.cx) / k.fx, (v - k.cy) / k.fy


def _check_depth(depth: torch.Tensor):
    if not bool(torch.isfinite(depth).all()) or not bool((depth > 0).all()):
        raise ValueError("depth must be strictly positive and finite")


def backproject(depth: torch.Tensor, k: CameraIntrinsics) -> torch.Tensor:
    """Depth ``(B, H, W)`` to camera-frame points ``(B, H, W, 3)``."""
    _check_depth(depth)
    _, _, xn, yn = _normalized_lattice(k, depth.dtype, depth.device)
    return torch.stack([depth * xn, depth * yn, depth], dim=-1)


@dataclass
class SamplingGrid:
    """Per-pixel source coordinates ``(B, H, W, 2)`` as ``(u, v)`` and validity ``(B, H, W)``."""

    coords: torch.Tensor
    valid: torch.Tensor


def _project(points: torch.Tensor, delta: torch.Tensor, k: CameraIntrinsics):
    """Project ``points + delta`` where ``points`` lie on the unwarped pixel rays.

    Written as an offset from the original pixel so that a zero ``delta`` gives
    back the lattice bit-exactly instead of up to division round-off.
    """
    u, v, xn, yn = _normalized_lattice(k, points.dtype, points.device)
    z = points[..., 2] + delta[..., 2]
    front = z > MIN_WARP_DEPTH
    z_safe = torch.where(front, z, torch.ones_like(z))
    du = k.fx * (delta[..., 0] - xn * delta[..., 2]) / z_safe
    dv = k.fy * (delta[..., 1] - yn * delta[..., 2]) / z_safe
    coords = torch.stack([u + du, v + dv], dim=-1)
    return coords, front, z


def _in_bounds(coords: torch.Tensor, k: CameraIntrinsics) -> torch.Tensor:
    cu, cv = coords[..., 0], coords[..., 1]
    return (cu >= 0) & (cu <= k.width - 1) & (cv >= 0) & (cv <= k.height - 1)


def transform_depth(depth: torch.Tensor, t: RigidTransform, k: CameraIntrinsics):
    """Warp coordinates plus the z of each transformed point (needed by depth losses)."""
    points = backproject(depth, k)
    r = t.rotation.unsqueeze(-3).unsqueeze(-3)
    eye = torch.eye(3, dtype=points.dtype, device=points.device)
    delta = ((r - eye) @ points.unsqueeze(-1)).squeeze(-1) + t.translation[..., None, None, :]
    coords, front, z = _project(points, delta, k)
    grid = SamplingGrid(coords, front & _in_bounds(coords, k))
    return grid, z


def warp_coordinates(depth: torch.Tensor, t: RigidTransform, k: CameraIntrinsics) -> SamplingGrid:
    """Where each target pixel lands in the source view, given target depth and ``T_target_to_source``."""
    return transform_depth(depth, t, k)[0]


def bilinear_sample(image: torch.Tensor, grid: SamplingGrid) -> torch.Tensor:
    """Sample ``image`` ``(B, C, Hs, Ws)`` at ``grid`` ``(B, H, W)``; invalid pixels are zero."""
    b, c, hs, ws = image.shape
    _, h, w, _ = grid.coords.shape
    valid = grid.valid
    # park invalid coordinates on a node so that neither value nor gradient is garbage
    cu = torch.where(valid, grid.coords[..., 0], torch.zeros_like(grid.coords[..., 0]))
    cv = torch.where(valid, grid.coords[..., 1], torch.zeros_like(grid.coords[..., 1]))
    u0 = torch.floor(cu).detach()
    v0 = torch.floor(cv).detach()
    wu = cu - u0
    wv = cv - v0
    u0i = u0.long().clamp(0, ws - 1)
    v0i = v0.long().clamp(0, hs - 1)
    u1i = (u0i + 1).clamp(max=ws - 1)
    v1i = (v0i + 1).clamp(max=hs - 1)

    flat = image.reshape(b, c, hs * ws)

    def gather(vi, ui):
        idx = (vi * ws + ui).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    wu = wu.unsqueeze(1)
    wv = wv.unsqueeze(1)
    out = (
        gather(v0i, u0i) * ((1 - wu) * (1 - wv))
        + gather(v0i, u1i) * (wu * (1 - wv))
        + gather(v1i, u0i) * ((1 - wu) * wv)
        + gather(v1i, u1i) * (wu * wv)
    )
    return torch.where(valid.unsqueeze(1), out, torch.zeros_like(out))


def synthesize_view(source: torch.Tensor, depth_t: torch.Tensor, t: RigidTransform, k: CameraIntrinsics):
    """Reconstruct the target view from ``source``; ``t`` is target-to-source."""
    grid = warp_coordinates(depth_t, t, k)
    return bilinear_sample(source, grid), grid


def relative_transform(cam_to_world_target, cam_to_world_source, dtype=torch.float64) -> RigidTransform:
    """``T_target_to_source`` from two camera-to-world poses (4x4 arrays)."""
    a = RigidTransform.from_matrix(cam_to_world_target, dtype)
    b = RigidTransform.from_matrix(cam_to_world_source, dtype)
    return compose(invert(b), a)
