"""End-to-end self-supervised training, checkpointing and the on/off ablation grid."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import data as data_mod
from .depth_factorization import DepthNet, ScaleBins, predict_depth
from .evaluation import DepthMetrics, depth_metrics, mean_metrics, valid_depth_mask
from .geometry import CameraIntrinsics, synthesize_view
from .losses import LossBreakdown, LossWeights, depth_consistency_loss, reprojection_loss, smoothness_loss, total_loss
from .residual_pose import PoseNet, iterative_pose

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
BLOBS = {"depth": "depth_net.pt", "pose": "pose_net.pt"}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: Dict[str, float]):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    epochs: int = 40
    lr_initial: float = 1e-4
    lr_drop_epoch: int = 20
    lr_final: float = 1e-5
    pose_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    max_steps: Optional[int] = None
    n_residual_iters: int = 1
    factorization: bool = True
    alpha: float = 0.85
    tau: float = 0.001
    gamma: float = 0.05
    per_pixel_min: bool = True
    automask: bool = True
    identity_jitter: float = 1e-5
    d_max: float = 10.0
    n_bins: int = 101
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    head_channels: int = 512
    decoder_widths: Tuple[int, ...] = (16, 32, 64, 128, 256)
    scale_hidden: int = 1024
    fc_width: int = 1024
    dropout: float = 0.5
    sigma_bias: float = -4.0
    pose_widths: Tuple[int, ...] = (16, 32, 64, 128, 256)
    pose_head_width: int = 256
    seed: int = 0
    data_path: Optional[str] = None
    temporal_stride: int = 1
    holdout_every: int = 5
    checkpoint_every: int = 0
    scene: data_mod.SyntheticSceneConfig = field(default_factory=data_mod.SyntheticSceneConfig)

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr_drop_epoch < self.epochs:
            raise ValueError("lr_drop_epoch must be smaller than epochs")
        if min(self.lr_initial, self.lr_final, self.pose_lr_scale) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.n_residual_iters <= 4:
            raise ValueError("n_residual_iters must be between 0 and 4")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.weights()
        self.bins()

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.tau, self.gamma)

    def bins(self) -> ScaleBins:
        return ScaleBins(self.d_max, self.n_bins)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        scene = data_mod.SyntheticSceneConfig(**d.pop("scene", {}))
        for name in ("encoder_widths", "decoder_widths", "pose_widths"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(scene=scene, **d)


# --------------------------------------------------------------------------- config files


def _coerce(value: str, annotation: str):
    annotation = str(annotation)
    if value.lower() in ("none", "null") and "Optional" in annotation:
        return None
    if "Tuple" in annotation:
        return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
    if "bool" in annotation:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "int" in annotation:
        return int(value)
    if "float" in annotation:
        return float(value)
    return value


def parse_overrides(pairs: Dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Apply ``key -> string value`` pairs; scene keys are written ``scene.<field>``."""
    cfg = base or TrainConfig()
    top = {f.name: f for f in dataclasses.fields(TrainConfig)}
    scene_fields = {f.name: f for f in dataclasses.fields(data_mod.SyntheticSceneConfig)}
    updates, scene_updates = {}, {}
    for key, raw in pairs.items():
        if key.startswith("scene."):
            name = key[len("scene."):]
            if name not in scene_fields:
                raise KeyError(f"unknown config key {key!r}")
            scene_updates[name] = _coerce(raw, scene_fields[name].type)
        else:
            if key not in top or key == "scene":
                raise KeyError(f"unknown config key {key!r}")
            updates[key] = _coerce(raw, top[key].type)
    scene = dataclasses.replace(cfg.scene, **scene_updates)
    return dataclasses.replace(cfg, scene=scene, **updates)


def read_config_text(text: str) -> Dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> TrainConfig:
    pairs = read_config_text(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    cfg = parse_overrides(pairs)
    cfg.validate()
    return cfg


def config_to_text(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    lines = []
    for f in dataclasses.fields(TrainConfig):
        if f.name == "scene":
            continue
        lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for f in dataclasses.fields(data_mod.SyntheticSceneConfig):
        lines.append(f"scene.{f.name} = {fmt(getattr(cfg.scene, f.name))}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- models and data


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_models(cfg: TrainConfig) -> Tuple[DepthNet, PoseNet]:
    depth = DepthNet(
        encoder_widths=cfg.encoder_widths,
        head_channels=cfg.head_channels,
        decoder_widths=cfg.decoder_widths,
        scale_hidden=cfg.scale_hidden,
        fc_width=cfg.fc_width,
        bins=cfg.bins(),
        dropout=cfg.dropout,
        factorized=cfg.factorization,
        sigma_bias=cfg.sigma_bias,
    )
    pose = PoseNet(cfg.pose_widths, cfg.pose_head_width)
    return depth, pose


def load_frames(cfg: TrainConfig) -> data_mod.FrameSequence:
    if cfg.data_path:
        return data_mod.read_sequence(cfg.data_path, cfg.temporal_stride)
    return data_mod.render_sequence(cfg.scene)


def split_indices(n_frames: int, holdout_every: int) -> Tuple[List[int], List[int]]:
    """Training targets and held-out frames (every ``holdout_every``-th frame, never a training target)."""
    held = [i for i in range(n_frames) if holdout_every > 0 and i % holdout_every == holdout_every - 1]
    train = [i for i in range(1, n_frames - 1) if i not in held]
    return train, held


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(torch.get_default_dtype())


def make_batch(samples: Sequence[data_mod.SequenceSample]):
    target = torch.stack([to_tensor(s.target) for s in samples])
    sources = [torch.stack([to_tensor(s.sources[j]) for s in samples]) for j in range(2)]
    return target, sources


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_final


# --------------------------------------------------------------------------- the objective


def compute_loss(depth_net: DepthNet, pose_net: PoseNet, target, sources, k: CameraIntrinsics,
                 cfg: TrainConfig, generator: Optional[torch.Generator] = None) -> LossBreakdown:
    b = target.shape[0]
    depths = depth_net(torch.cat([target] + list(sources)))
    depth_t = depths.metric[:b]

    synths, valids, t_to_s = [], [], []
    for j, src in enumerate(sources):
        trace = iterative_pose(target, src, depth_t, k, cfg.n_residual_iters, pose_net)
        pose = trace.target_to_source
        synth, grid = synthesize_view(src, depth_t, pose, k)
        synths.append(synth)
        valids.append(grid.valid)
        t_to_s.append(pose)

    jitter = None
    if cfg.automask and cfg.identity_jitter > 0:
        jitter = cfg.identity_jitter * torch.randn(target[:, 0].shape, generator=generator, dtype=target.dtype)
    photometric, kept = reprojection_loss(
        target, synths, sources, cfg.alpha, valids, cfg.per_pixel_min, cfg.automask, jitter
    )
    smooth = smoothness_loss(depth_t, target)
    consistency = torch.stack(
        [depth_consistency_loss(depth_t, depths.metric[(j + 1) * b:(j + 2) * b], pose, k) for j, pose in enumerate(t_to_s)]
    ).mean()
    return total_loss(photometric, smooth, consistency, cfg.weights(), kept)


# --------------------------------------------------------------------------- evaluation and checkpoints


def evaluate(depth_net: DepthNet, seq: data_mod.FrameSequence, indices: Sequence[int], align: str = "none",
             d_max: Optional[float] = None) -> DepthMetrics:
    if seq.depths is None:
        raise ValueError("sequence has no ground-truth depth")
    if not indices:
        raise ValueError("no frames to evaluate")
    images = torch.stack([to_tensor(seq.images[i]) for i in indices])
    pred = predict_depth(images, depth_net).metric.double().numpy()
    rows = []
    for p, i in zip(pred, indices):
        gt = seq.depths[i]
        rows.append(depth_metrics(p, gt, align, valid_depth_mask(gt, d_max)))
    return mean_metrics(rows)


def metric_summary(depth_net, seq, indices, d_max) -> Dict[str, Dict[str, float]]:
    return {a: evaluate(depth_net, seq, indices, a, d_max).as_dict() for a in ("none", "median")}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(directory, depth_net, pose_net, cfg: TrainConfig, epoch: int, step: int,
                    metrics: Optional[dict] = None) -> dict:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(depth_net.state_dict(), root / BLOBS["depth"])
    torch.save(pose_net.state_dict(), root / BLOBS["pose"])
    manifest = {
        "config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": step,
        "metrics": metrics or {},
        "digests": {name: _digest(root / name) for name in BLOBS.values()},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(directory):
    """Returns ``(cfg, depth_net, pose_net, manifest)``; blob digests are verified."""
    root = Path(directory)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    for name, digest in manifest["digests"].items():
        if _digest(root / name) != digest:
            raise ValueError(f"{root / name}: digest mismatch")
    cfg = TrainConfig.from_dict(manifest["config"])
    depth_net, pose_net = build_models(cfg)
    depth_net.load_state_dict(torch.load(root / BLOBS["depth"], weights_only=True))
    pose_net.load_state_dict(torch.load(root / BLOBS["pose"], weights_only=True))
    depth_net.eval()
    pose_net.eval()
    return cfg, depth_net, pose_net, manifest


# --------------------------------------------------------------------------- the loop


@dataclass
class TrainResult:
    manifest: dict
    log: List[dict]
    depth_net: DepthNet
    pose_net: PoseNet
    checkpoint: Optional[Path]
    sequence: data_mod.FrameSequence
    heldout: List[int]


def train(cfg: TrainConfig, out_dir=None, sequence: Optional[data_mod.FrameSequence] = None) -> TrainResult:
    """Run the configured schedule; returns the final manifest and a per-step loss log."""
    cfg.validate()
    seed_everything(cfg.seed)
    torch.use_deterministic_algorithms(True)
    seq = sequence if sequence is not None else load_frames(cfg)
    k = seq.intrinsics
    train_idx, held = split_indices(len(seq), cfg.holdout_every if seq.depths is not None else 0)
    samples = seq.samples(train_idx)
    if not samples:
        raise ValueError("no training samples: the sequence needs at least three frames")

    depth_net, pose_net = build_models(cfg)
    groups = [
        {"params": list(depth_net.parameters()), "scale": 1.0},
        {"params": list(pose_net.parameters()), "scale": cfg.pose_lr_scale},
    ]
    optim = torch.optim.Adam(groups, lr=cfg.lr_initial, betas=(cfg.beta1, cfg.beta2))
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None

    log: List[dict] = []
    step = 0
    epoch = 0
    done = False
    d_max = cfg.d_max
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        for group in optim.param_groups:
            group["lr"] = lr * group["scale"]
        order = torch.randperm(len(samples), generator=gen).tolist()
        depth_net.train()
        pose_net.train()
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            target, sources = make_batch(batch)
            parts = compute_loss(depth_net, pose_net, target, sources, k, cfg, gen)
            entry = {"step": step, "epoch": epoch, "lr": lr, **parts.as_dict()}
            if not math.isfinite(entry["total"]):
                logger.error("non-finite loss at step %d: %s", step, entry)
                raise TrainingDiverged(step, entry)
            optim.zero_grad()
            parts.total.backward()
            optim.step()
            log.append(entry)
            step += 1
            if step % 25 == 0:
                logger.info("step %d epoch %d loss %.5f kept %.3f", step, epoch, entry["total"], entry["automask_fraction"])
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                metrics = metric_summary(depth_net, seq, held, d_max) if held else {}
                save_checkpoint(out / f"checkpoint_{step:06d}", depth_net, pose_net, cfg, epoch, step, metrics)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break

    metrics = metric_summary(depth_net, seq, held, d_max) if held else {}
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint_final"
        manifest = save_checkpoint(ckpt, depth_net, pose_net, cfg, epoch, step, metrics)
        with open(out / "loss_log.jsonl", "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    else:
        manifest = {"config": cfg.to_dict(), "epoch": epoch, "global_step": step, "metrics": metrics, "digests": {}}
    return TrainResult(manifest, log, depth_net, pose_net, ckpt, seq, held)


ABLATION_ROWS = {
    "backbone": (False, False),
    "+factorization": (True, False),
    "+residual pose": (False, True),
    "full": (True, True),
}


def ablate(cfg: TrainConfig, out_dir=None, rows: Optional[Sequence[str]] = None) -> Dict[str, dict]:
    """Train each on/off variant under the same seed; returns per-row toggles and metrics."""
    names = list(rows) if rows is not None else list(ABLATION_ROWS)
    seq = load_frames(cfg)
    results = {}
    for name in names:
        factorization, residual = ABLATION_ROWS[name]
        variant = dataclasses.replace(
            cfg,
            factorization=factorization,
            n_residual_iters=(cfg.n_residual_iters or 1) if residual else 0,
        )
        sub = None if out_dir is None else Path(out_dir) / name.replace(" ", "_").replace("+", "plus_")
        logger.info("ablation row %s", name)
        res = train(variant, sub, sequence=seq)
        results[name] = {
            "factorization": factorization,
            "residual_pose": residual,
            "metrics": {a: DepthMetrics(**m) for a, m in res.manifest["metrics"].items()},
            "final_loss": res.log[-1]["total"],
        }
    return results
