"""Command-line entry point: ``synth``, ``train``, ``eval``, ``infer`` and ``ablate``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
Failures print a single ``error: <kind>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import training
from .depth_factorization import predict_depth
from .evaluation import DepthMetrics, colorize_depth, depth_metrics, mean_metrics, render_report, valid_depth_mask

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable; scene keys are written scene.<field>")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="monoindoor", description="Self-supervised indoor monocular depth.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene to disk")
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train depth and pose networks")
    _add_config_flags(p)
    p.add_argument("--data", help="sequence directory (default: render the configured scene)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="depth metrics against ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint directory")
    src.add_argument("--pred", help="directory of 16-bit depth PNGs named like the sequence frames")
    p.add_argument("--data", required=True, help="sequence directory with a depth/ folder")
    p.add_argument("--align", choices=("none", "median"), default="none")
    p.add_argument("--split", choices=("all", "heldout"), default="all",
                   help="evaluate every frame or only the held-out frames")
    p.add_argument("--holdout-every", type=int, default=None,
                   help="held-out period (default: the checkpoint's, else 5)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="depth for a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train the four on/off rows under one seed")
    _add_config_flags(p)
    p.add_argument("--rows", help="comma-separated subset of: " + ", ".join(training.ABLATION_ROWS))
    p.add_argument("--out", required=True)
    return parser


def _overrides(items: Sequence[str]) -> Dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _resolve_config(args, extra: Optional[Dict[str, str]] = None) -> training.TrainConfig:
    pairs = _overrides(args.set)
    pairs.update(extra or {})
    try:
        cfg = training.load_config(args.config, pairs)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    print("# resolved config")
    print(training.config_to_text(cfg), end="", flush=True)
    return cfg


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    root = data_mod.write_sequence(data_mod.render_sequence(cfg.scene), args.out)
    print(f"wrote {len(list((root / 'rgb').iterdir()))} frames to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"data_path": args.data} if args.data else None
    cfg = _resolve_config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(training.config_to_text(cfg))
    res = training.train(cfg, out)
    first, last = res.log[0]["total"], res.log[-1]["total"]
    print(f"steps {res.manifest['global_step']} loss {first:.5f} -> {last:.5f}")
    rows = {f"align={a}": DepthMetrics(**m) for a, m in res.manifest["metrics"].items()}
    if rows:
        paths = render_report(rows, out / "report", label="Held-out")
        print(paths["table"].read_text(), end="")
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _eval_indices(args, n_frames: int, holdout_every: int) -> List[int]:
    if args.split == "all":
        return list(range(n_frames))
    _, held = training.split_indices(n_frames, holdout_every)
    if not held:
        raise ValueError(f"no held-out frames among {n_frames} with period {holdout_every}")
    return held


def cmd_eval(args) -> int:
    seq = data_mod.read_sequence(args.data)
    if seq.depths is None:
        raise data_mod.SequenceLoadError(f"{args.data} has no depth/ folder")
    holdout_every = args.holdout_every
    d_max = None
    if args.checkpoint:
        cfg, depth_net, _, _ = training.load_checkpoint(args.checkpoint)
        print("# resolved config")
        print(training.config_to_text(cfg), end="", flush=True)
        holdout_every = holdout_every or cfg.holdout_every
        d_max = cfg.d_max
        indices = _eval_indices(args, len(seq), holdout_every)
        images = torch.stack([training.to_tensor(seq.images[i]) for i in indices])
        with torch.no_grad():
            preds = list(predict_depth(images, depth_net).metric.double().numpy())
        label = "checkpoint"
    else:
        indices = _eval_indices(args, len(seq), holdout_every or 5)
        preds = [data_mod.read_depth_png(Path(args.pred) / f"{i:06d}.png") for i in indices]
        label = "prediction"

    per_frame = []
    for i, pred in zip(indices, preds):
        gt = seq.depths[i]
        if pred.shape != gt.shape:
            raise ValueError(f"frame {i}: prediction {pred.shape} vs ground truth {gt.shape}")
        per_frame.append(depth_metrics(pred, gt, args.align, valid_depth_mask(gt, d_max)))
    summary = mean_metrics(per_frame)
    out = Path(args.out)
    visuals = [(seq.images[i], p, seq.depths[i]) for i, p in list(zip(indices, preds))[:4]]
    paths = render_report({f"{label} align={args.align}": summary}, out, visuals)
    _write_json(out / "metrics.json", {
        "align": args.align,
        "frames": indices,
        "mean": summary.as_dict(),
        "per_frame": [m.as_dict() for m in per_frame],
    })
    print(paths["table"].read_text(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, depth_net, _, _ = training.load_checkpoint(args.checkpoint)
    img = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    with torch.no_grad():
        fd = predict_depth(training.to_tensor(img)[None], depth_net)
    relative = fd.relative[0].double().numpy()
    metric = fd.metric[0].double().numpy()
    scale = float(fd.scale.reshape(-1)[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "relative.npy", relative)
    np.save(out / "metric.npy", metric)
    Image.fromarray(data_mod.encode_depth(metric)).save(out / "metric.png")
    _write_json(out / "scale.json", {"scale": scale})
    panel = np.concatenate([np.round(img * 255).astype(np.uint8), colorize_depth(metric, 0.0, cfg.d_max)], axis=1)
    Image.fromarray(panel).save(out / "visual.png")
    print(f"scale {scale:.4f} m, metric depth {metric.min():.3f}..{metric.max():.3f} m")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    rows = None
    if args.rows:
        rows = [r.strip() for r in args.rows.split(",")]
        unknown = [r for r in rows if r not in training.ABLATION_ROWS]
        if unknown:
            raise UsageError(f"unknown ablation rows {unknown}")
    out = Path(args.out)
    results = training.ablate(cfg, out, rows)
    for align in ("none", "median"):
        table = {name: r["metrics"][align] for name, r in results.items() if align in r["metrics"]}
        if table:
            paths = render_report(table, out / f"align_{align}")
            print(f"# align={align}")
            print(paths["table"].read_text(), end="")
    _write_json(out / "ablation.json", {
        name: {**{k: v for k, v in r.items() if k != "metrics"},
               "metrics": {a: m.as_dict() for a, m in r["metrics"].items()}}
        for name, r in results.items()
    })
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        reason = " ".join(str(exc).split()) or "no details"
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
