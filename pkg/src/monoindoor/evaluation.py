"""Depth and odometry metrics, plus table/visualization output."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from PIL import Image

DEPTH_HEADER = ("AbsRel", "RMS", "δ1", "δ2", "δ3")
DEPTH_HEADER_ASCII = ("abs_rel", "rms", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    rms: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class OdometryMetrics:
    ate: float
    rpe_m: float
    rpe_deg: float


@dataclass
class Trajectory:
    """Camera-to-world poses ``(N, 4, 4)`` with strictly increasing frame indices."""

    poses: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.indices = np.asarray(self.indices)
        if len(self.poses) != len(self.indices):
            raise ValueError("one index per pose required")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("trajectory indices must be strictly increasing")

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        poses = np.asarray(poses, dtype=np.float64)
        return cls(poses, np.arange(len(poses)))


def valid_depth_mask(gt: np.ndarray, d_max: Optional[float] = None) -> np.ndarray:
    mask = np.isfinite(gt) & (gt > 0)
    if d_max is not None:
        mask &= gt <= d_max
    return mask


def depth_metrics(pred, gt, align: str = "none", mask=None) -> DepthMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = valid_depth_mask(gt)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p = pred[mask]
    g = gt[mask]
    if align == "median":
        p = p * (np.median(g) / np.median(p))
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        rms=float(np.sqrt(np.mean((p - g) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def mean_metrics(rows: Sequence[DepthMetrics]) -> DepthMetrics:
    if not rows:
        raise ValueError("no metrics to average")
    return DepthMetrics(*np.mean([astuple(r) for r in rows], axis=0).tolist())


def rigid_alignment(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimizing ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, mu_d - r @ mu_s


def _rotation_angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)))


def odometry_metrics(pred: Trajectory, gt: Trajectory) -> OdometryMetrics:
    if len(pred.poses) != len(gt.poses) or np.any(pred.indices != gt.indices):
        raise ValueError("predicted and ground-truth trajectories must share frame indices")
    if len(pred.poses) < 2:
        raise ValueError("need at least two poses")
    p = pred.poses[:, :3, 3]
    g = gt.poses[:, :3, 3]
    r, t = rigid_alignment(p, g)
    aligned = p @ r.T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned - g) ** 2, axis=1))))

    trans, angles = [], []
    for i in range(len(p) - 1):
        rel_p = np.linalg.inv(pred.poses[i]) @ pred.poses[i + 1]
        rel_g = np.linalg.inv(gt.poses[i]) @ gt.poses[i + 1]
        err = np.linalg.inv(rel_g) @ rel_p
        trans.append(np.linalg.norm(err[:3, 3]))
        angles.append(_rotation_angle(err[:3, :3]))
    return OdometryMetrics(
        ate=ate,
        rpe_m=float(np.sqrt(np.mean(np.square(trans)))),
        rpe_deg=float(np.degrees(np.sqrt(np.mean(np.square(angles))))),
    )


# --------------------------------------------------------------------------- reports


def format_depth_table(rows: Dict[str, DepthMetrics], label: str = "Method") -> str:
    width = max([len(label)] + [len(n) for n in rows])
    lines = [f"{label:<{width}} | " + " | ".join(f"{h:>7}" for h in DEPTH_HEADER)]
    lines.append("-" * len(lines[0]))
    for name, m in rows.items():
        lines.append(f"{name:<{width}} | " + " | ".join(f"{v:7.4f}" for v in astuple(m)))
    return "\n".join(lines) + "\n"


def depth_csv(rows: Dict[str, DepthMetrics], label: str = "method") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((label,) + DEPTH_HEADER_ASCII)
    for name, m in rows.items():
        w.writerow((name,) + tuple(f"{v:.6f}" for v in astuple(m)))
    return buf.getvalue()


def colorize_depth(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Viridis over a fixed range; ``d_min`` maps to the first colormap entry, ``d_max`` to the last."""
    from matplotlib import colormaps

    lut = (colormaps["viridis"](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)
    x = np.clip((np.asarray(depth, dtype=np.float64) - d_min) / (d_max - d_min), 0, 1)
    return lut[np.round(x * 255).astype(np.int64)]


def render_report(rows: Dict[str, DepthMetrics], out_dir, visuals: Sequence = (), d_range=(0.0, 10.0),
                  label: str = "Method") -> Dict[str, Path]:
    """Write ``metrics.txt``, ``metrics.csv`` and one ``depth_XXX.png`` per ``(image, pred, gt)`` triple."""
    if not rows:
        raise ValueError("report needs at least one metric row")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"table": out / "metrics.txt", "csv": out / "metrics.csv"}
        paths["table"].write_text(format_depth_table(rows, label), encoding="utf-8")
        paths["csv"].write_text(depth_csv(rows, label.lower()), encoding="utf-8")
        for i, (image, pred, gt) in enumerate(visuals):
            panels = [np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), colorize_depth(pred, *d_range)]
            if gt is not None:
                panels.append(colorize_depth(gt, *d_range))
            path = out / f"depth_{i:03d}.png"
            Image.fromarray(np.concatenate(panels, axis=1)).save(path)
            paths[f"visual_{i}"] = path
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths
