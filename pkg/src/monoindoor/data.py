"""Synthetic indoor sequences with exact ground truth, and a directory loader.

Scenes are axis-aligned rooms (walls, floor, ceiling) with a few boxes on the
floor. Every pixel is ray-cast against the planes analytically, so depth is
exact, and colours come from a smooth procedural texture evaluated at the hit
point. World coordinates share the camera convention (x right, y down, z
forward); the ceiling is ``y = 0`` and the floor ``y = room height``.

On-disk layout::

    intrinsics.txt      fx fy cx cy
    rgb/000000.png      8-bit RGB
    depth/000000.png    optional, uint16 millimetres
    poses.txt           optional, 12 numbers per line (row-major 3x4 camera-to-world)
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0
TRAJECTORIES = ("dolly", "orbit", "handheld")


class SequenceLoadError(ValueError):
    pass


class MissingIntrinsicsError(SequenceLoadError):
    pass


class ImageSizeMismatchError(SequenceLoadError):
    pass


class NonContiguousFramesError(SequenceLoadError):
    pass


@dataclass
class SyntheticSceneConfig:
    room_width: float = 4.0
    room_height: float = 2.6
    room_depth: float = 6.0
    n_boxes: int = 2
    texture_octaves: int = 3
    texture_frequency: float = 0.8
    trajectory: str = "dolly"
    frames: int = 20
    width: int = 96
    height: int = 96
    # None means a default pinhole with a ~62 degree horizontal field of view
    fx: Optional[float] = None
    fy: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None
    start_distance: float = 4.0
    step: float = 0.05
    rotation_step: float = 0.03
    seed: int = 0

    def intrinsics(self) -> CameraIntrinsics:
        fx = self.fx if self.fx is not None else 0.8 * self.width
        fy = self.fy if self.fy is not None else fx
        cx = self.cx if self.cx is not None else (self.width - 1) / 2
        cy = self.cy if self.cy is not None else (self.height - 1) / 2
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height)

    def validate(self):
        dims = (self.room_width, self.room_height, self.room_depth)
        if min(dims) <= 0:
            raise ValueError(f"degenerate room dimensions {dims}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}, expected one of {TRAJECTORIES}")
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        if not 0 <= self.n_boxes <= 3:
            raise ValueError("n_boxes must be between 0 and 3")


@dataclass
class SequenceSample:
    target: np.ndarray
    sources: List[np.ndarray]
    intrinsics: CameraIntrinsics
    gt_depth: Optional[np.ndarray] = None
    gt_poses: Optional[List[np.ndarray]] = None
    frame_ids: Tuple[int, int, int] = (0, 1, 2)


@dataclass
class FrameSequence:
    """Frames with aligned ground truth. Images are ``(H, W, 3)`` floats in [0, 1]."""

    images: List[np.ndarray]
    intrinsics: CameraIntrinsics
    depths: Optional[List[np.ndarray]] = None
    poses: Optional[List[np.ndarray]] = None

    def __len__(self):
        return len(self.images)

    def samples(self, indices: Optional[Sequence[int]] = None) -> List[SequenceSample]:
        """(t-1, t, t+1) triplets; the first and last frame only serve as sources."""
        if indices is None:
            indices = range(1, len(self.images) - 1)
        out = []
        for i in indices:
            if not 1 <= i <= len(self.images) - 2:
                raise IndexError(f"frame {i} has no neighbours on both sides")
            ids = (i - 1, i, i + 1)
            out.append(
                SequenceSample(
                    target=self.images[i],
                    sources=[self.images[i - 1], self.images[i + 1]],
                    intrinsics=self.intrinsics,
                    gt_depth=None if self.depths is None else self.depths[i],
                    gt_poses=None if self.poses is None else [self.poses[j] for j in ids],
                    frame_ids=ids,
                )
            )
        return out

    def subsample(self, stride: int) -> "FrameSequence":
        sl = slice(None, None, stride)
        return FrameSequence(
            self.images[sl],
            self.intrinsics,
            None if self.depths is None else self.depths[sl],
            None if self.poses is None else self.poses[sl],
        )


# --------------------------------------------------------------------------- rendering


@dataclass
class _Texture:
    directions: np.ndarray  # (channels, waves, 3)
    freqs: np.ndarray  # (channels, waves)
    phases: np.ndarray
    amps: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        proj = np.einsum("...k,cwk->...cw", points, self.directions)
        waves = self.amps * np.sin(2 * np.pi * self.freqs * proj + self.phases)
        return np.clip(0.5 + 0.45 * waves.sum(-1) / self.amps.sum(-1), 0.0, 1.0)


def _make_texture(rng: np.random.Generator, octaves: int, frequency: float, waves_per_octave: int = 3) -> _Texture:
    dirs, freqs, amps = [], [], []
    for o in range(octaves):
        d = rng.normal(size=(3, waves_per_octave, 3))
        dirs.append(d / np.linalg.norm(d, axis=-1, keepdims=True))
        freqs.append(np.full((3, waves_per_octave), frequency * 2.0**o))
        amps.append(np.full((3, waves_per_octave), 0.6**o))
    return _Texture(
        np.concatenate(dirs, 1),
        np.concatenate(freqs, 1),
        rng.uniform(0, 2 * np.pi, size=(3, octaves * waves_per_octave)),
        np.concatenate(amps, 1),
    )


def _make_boxes(rng: np.random.Generator, cfg: SyntheticSceneConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Boxes on the floor against the side walls, away from the central camera corridor."""
    boxes = []
    for i in range(cfg.n_boxes):
        size = rng.uniform([0.4, 0.4, 0.4], [0.8, 1.0, 0.9])
        left = i % 2 == 0
        x0 = 0.05 if left else cfg.room_width - 0.05 - size[0]
        z0 = rng.uniform(0.55, 0.85) * cfg.room_depth - size[2] / 2
        z0 = min(z0, cfg.room_depth - size[2] - 0.05)
        y1 = cfg.room_height
        lo = np.array([x0, y1 - size[1], z0])
        boxes.append((lo, lo + size))
    return boxes


def _look_rotation(forward: np.ndarray, up=np.array([0.0, -1.0, 0.0])) -> np.ndarray:
    """Camera-to-world rotation whose z axis points along ``forward`` (y down)."""
    z = forward / np.linalg.norm(forward)
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], 1)


def _rot(axis: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(axis)
    if theta < 1e-12:
        return np.eye(3)
    k = axis / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def _pose(rotation: np.ndarray, position: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = rotation
    out[:3, 3] = position
    return out


def make_trajectory(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> List[np.ndarray]:
    centre = np.array([cfg.room_width / 2, cfg.room_height / 2, cfg.room_depth / 2])
    start = np.array([cfg.room_width / 2, cfg.room_height / 2, cfg.room_depth - cfg.start_distance])
    poses = []
    if cfg.trajectory == "dolly":
        for i in range(cfg.frames):
            poses.append(_pose(np.eye(3), start + np.array([0.0, 0.0, cfg.step * i])))
    elif cfg.trajectory == "orbit":
        radius = max(cfg.room_depth / 2 - cfg.start_distance / 2, 0.3)
        radius = min(radius, 0.4 * min(cfg.room_width, cfg.room_depth))
        angle_step = cfg.step / radius
        look_at = centre + np.array([0.0, 0.0, cfg.room_depth / 2])
        for i in range(cfg.frames):
            a = angle_step * (i - cfg.frames / 2)
            pos = centre + radius * np.array([np.sin(a), 0.0, -np.cos(a)])
            poses.append(_pose(_look_rotation(look_at - pos), pos))
    else:
        # forward walk with a random walk on orientation; rotation-rich
        r = np.eye(3)
        pos = start.copy()
        angles = np.zeros(3)
        for i in range(cfg.frames):
            poses.append(_pose(r, pos.copy()))
            angles = 0.6 * angles + rng.normal(scale=cfg.rotation_step, size=3) * np.array([1.0, 1.0, 0.5])
            r = r @ _rot(angles)
            # keep the camera roughly facing the far wall
            yaw_back = _rot(np.array([0.0, -0.15 * np.arctan2(r[0, 2], r[2, 2]), 0.0]))
            pitch_back = _rot(np.array([0.15 * np.arctan2(r[1, 2], r[2, 2]), 0.0, 0.0]))
            r = yaw_back @ pitch_back @ r
            pos = pos + np.array([rng.normal(scale=0.2 * cfg.step), rng.normal(scale=0.2 * cfg.step), cfg.step])
    return poses


@dataclass
class SyntheticScene:
    cfg: SyntheticSceneConfig
    texture: _Texture
    boxes: List[Tuple[np.ndarray, np.ndarray]]
    poses: List[np.ndarray] = field(default_factory=list)

    @property
    def room(self) -> np.ndarray:
        return np.array([self.cfg.room_width, self.cfg.room_height, self.cfg.room_depth])

    def render(self, cam_to_world: np.ndarray, k: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
        """Exact ray casting; returns ``(image (H, W, 3), depth (H, W))``."""
        v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
        rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], -1)
        rot = cam_to_world[:3, :3]
        origin = cam_to_world[:3, 3]
        rays = rays_cam @ rot.T
        room = self.room
        if np.any(origin <= 0) or np.any(origin >= room):
            raise ValueError(f"camera at {origin} is outside the room")
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays
            t0 = (0.0 - origin) * inv
            t1 = (room - origin) * inv
            # exit of the room slab; the camera is inside so this is the wall hit
            depth = np.nanmin(np.where(np.isfinite(np.maximum(t0, t1)), np.maximum(t0, t1), np.inf), axis=-1)
            for lo, hi in self.boxes:
                b0 = (lo - origin) * inv
                b1 = (hi - origin) * inv
                t_in = np.max(np.minimum(b0, b1), axis=-1)
                t_out = np.min(np.maximum(b0, b1), axis=-1)
                hit = (t_in <= t_out) & (t_in > 0)
                depth = np.where(hit & (t_in < depth), t_in, depth)
        points = origin + rays * depth[..., None]
        return self.texture(points), depth


def build_scene(cfg: SyntheticSceneConfig) -> SyntheticScene:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    texture = _make_texture(rng, cfg.texture_octaves, cfg.texture_frequency)
    boxes = _make_boxes(rng, cfg)
    poses = make_trajectory(cfg, rng)
    return SyntheticScene(cfg, texture, boxes, poses)


def render_sequence(cfg: SyntheticSceneConfig, workers: int = 1) -> FrameSequence:
    """Render the configured trajectory. All random draws happen before rendering,
    so the output does not depend on ``workers``."""
    scene = build_scene(cfg)
    k = cfg.intrinsics()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(lambda p: scene.render(p, k), scene.poses))
    else:
        frames = [scene.render(p, k) for p in scene.poses]
    return FrameSequence(
        images=[f[0] for f in frames],
        intrinsics=k,
        depths=[f[1] for f in frames],
        poses=[p.copy() for p in scene.poses],
    )


def generate_synthetic_scene(cfg: SyntheticSceneConfig, workers: int = 1) -> List[SequenceSample]:
    return render_sequence(cfg, workers).samples()


# --------------------------------------------------------------------------- disk io


def encode_depth(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)


def decode_depth(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / DEPTH_SCALE


def write_sequence(seq: FrameSequence, directory) -> Path:
    root = Path(directory)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    k = seq.intrinsics
    (root / "intrinsics.txt").write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")
    for i, img in enumerate(seq.images):
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(root / "rgb" / f"{i:06d}.png")
    if seq.depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(seq.depths):
            Image.fromarray(encode_depth(d)).save(root / "depth" / f"{i:06d}.png")
    if seq.poses is not None:
        lines = [" ".join(repr(float(x)) for x in p[:3, :4].reshape(-1)) for p in seq.poses]
        (root / "poses.txt").write_text("\n".join(lines) + "\n")
    return root


def _frame_indices(folder: Path) -> List[int]:
    pat = re.compile(r"^(\d{6})\.png$")
    idx = sorted(int(m.group(1)) for m in (pat.match(p.name) for p in folder.iterdir()) if m)
    if idx != list(range(len(idx))):
        raise NonContiguousFramesError(f"{folder}: frame indices are not contiguous from 0: {idx[:10]}...")
    return idx


def read_depth_png(path) -> np.ndarray:
    return decode_depth(np.asarray(Image.open(path)))


def read_sequence(directory, temporal_stride: int = 1) -> FrameSequence:
    root = Path(directory)
    intr_path = root / "intrinsics.txt"
    if not intr_path.is_file():
        raise MissingIntrinsicsError(f"{intr_path} not found")
    values = intr_path.read_text().split()
    if len(values) != 4:
        raise SequenceLoadError(f"{intr_path}: expected 4 numbers, got {len(values)}")
    fx, fy, cx, cy = (float(x) for x in values)

    rgb_dir = root / "rgb"
    if not rgb_dir.is_dir():
        raise SequenceLoadError(f"{rgb_dir} not found")
    indices = _frame_indices(rgb_dir)
    images = []
    for i in indices:
        img = np.asarray(Image.open(rgb_dir / f"{i:06d}.png").convert("RGB"), dtype=np.float64) / 255.0
        if images and img.shape != images[0].shape:
            raise ImageSizeMismatchError(f"frame {i} has size {img.shape[:2]}, expected {images[0].shape[:2]}")
        images.append(img)
    if not images:
        raise SequenceLoadError(f"{rgb_dir} contains no frames")
    h, w = images[0].shape[:2]
    k = CameraIntrinsics(fx, fy, cx, cy, w, h)

    depths = None
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        if _frame_indices(depth_dir) != indices:
            raise NonContiguousFramesError(f"{depth_dir} frames do not match rgb frames")
        depths = [read_depth_png(depth_dir / f"{i:06d}.png") for i in indices]
        for i, d in zip(indices, depths):
            if d.shape != (h, w):
                raise ImageSizeMismatchError(f"depth frame {i} has size {d.shape}, expected {(h, w)}")

    poses = None
    pose_path = root / "poses.txt"
    if pose_path.is_file():
        rows = np.loadtxt(pose_path, ndmin=2)
        if rows.shape != (len(indices), 12):
            raise SequenceLoadError(f"{pose_path}: expected {len(indices)} lines of 12 numbers, got {rows.shape}")
        poses = []
        for r in rows:
            p = np.eye(4)
            p[:3, :4] = r.reshape(3, 4)
            poses.append(p)

    seq = FrameSequence(images, k, depths, poses)
    if temporal_stride > 1:
        seq = seq.subsample(temporal_stride)
    logger.debug("loaded %d frames from %s", len(seq), root)
    return seq


def load_sequence(directory, temporal_stride: int = 1) -> List[SequenceSample]:
    """Triplet samples from a sequence directory; ``temporal_stride=10`` mimics sparse video sampling."""
    return read_sequence(directory, temporal_stride).samples()
