"""Command-line front end: ``synth``, ``train``, ``eval`` and ``infer``.

Exit status is 0 on success, 2 for configuration errors, 3 for data errors
and 4 for numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DatasetError, SyntheticSceneSpec, generate_synthetic, load_manifest, read_image, save_manifest
from .evaluation import DEFAULT_MAX_RADIUS, emit_report, evaluate, summary_text
from .network import CheckpointError, DetectorNet, NetworkConfig, load_checkpoint
from .scene import PRESENCE_THRESHOLD, argmax_joints
from .training import NumericalError, TrainConfig, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("instrupose")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: NetworkConfig
    training: TrainConfig
    train_manifest: str
    resize: Optional[list] = None
    max_radius: int = DEFAULT_MAX_RADIUS
    presence_threshold: float = PRESENCE_THRESHOLD
    out: Optional[str] = None
    extra: dict = field(default_factory=dict)

    KEYS = {"network", "training", "data", "evaluation", "out"}

    @classmethod
    def from_dict(cls, doc: dict, base: Optional[Path] = None) -> "RunConfig":
        unknown = set(doc) - cls.KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            data = dict(doc.get("data", {}))
            ev = dict(doc.get("evaluation", {}))
            bad = (set(data) - {"train_manifest", "resize"}) | (set(ev) - {"max_radius", "presence_threshold"})
            if bad:
                raise ConfigError(f"unknown config keys: {sorted(bad)}")
            if "train_manifest" not in data:
                raise ConfigError("data.train_manifest is required")
            manifest = Path(data["train_manifest"])
            if base is not None and not manifest.is_absolute():
                manifest = base / manifest
            cfg = cls(
                NetworkConfig.from_dict(doc.get("network", {})),
                TrainConfig.from_dict(doc.get("training", {})),
                str(manifest),
                data.get("resize"),
                int(ev.get("max_radius", DEFAULT_MAX_RADIUS)),
                float(ev.get("presence_threshold", PRESENCE_THRESHOLD)),
                doc.get("out"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < cfg.presence_threshold < 1 or cfg.max_radius < 0:
            raise ConfigError("presence_threshold must lie in (0, 1) and max_radius be >= 0")
        return cfg

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "data": {"train_manifest": self.train_manifest, "resize": self.resize},
            "evaluation": {"max_radius": self.max_radius, "presence_threshold": self.presence_threshold},
            "out": self.out,
        }


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSceneSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    manifest = generate_synthetic(spec, args.count)
    out = Path(args.out)
    save_manifest(manifest, out)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    pres = np.mean([a.presence for a in manifest.annotations], axis=0)
    print(f"wrote {len(manifest)} images to {out}")
    for name, p in zip(spec.instruments, pres):
        print(f"  {name}: present in {int(round(p * len(manifest)))}/{len(manifest)} ({100 * p:.1f}%)")
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    doc = _read_json(cfg_path)
    cfg = RunConfig.from_dict(doc, base=cfg_path.parent)
    if args.seed is not None:
        cfg.training.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if not cfg.out:
        raise ConfigError("no output directory (set 'out' in the config or pass --out)")
    manifest = load_manifest(cfg.train_manifest, resize=tuple(cfg.resize) if cfg.resize else None)
    net_cfg = cfg.network
    if tuple(manifest.schema.image_size) != tuple(net_cfg.input_size):
        raise DatasetError([f"manifest images are {manifest.schema.image_size}, network expects {net_cfg.input_size}"])
    if (manifest.schema.num_instruments, manifest.schema.num_joints) != (net_cfg.num_instruments, net_cfg.num_joints):
        raise DatasetError(["manifest instrument/joint counts do not match the network config"])
    if manifest.schema.channels != net_cfg.in_channels:
        raise DatasetError(["manifest channel count does not match the network config"])
    images = manifest.load_images()
    resume = None
    if args.resume:
        resume = _read_bytes(args.resume)
        if load_checkpoint(resume).config != net_cfg:
            raise ConfigError("resume checkpoint was written for a different network config")

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    model = DetectorNet.build(net_cfg, seed=cfg.training.seed)
    result = train(
        model, images, manifest.annotations, cfg.training, run_dir=out, resume=resume,
        on_epoch=lambda e, loss: print(f"epoch {e + 1}/{cfg.training.epochs}: mean loss {loss:.6f}", flush=True),
    )
    digest = hashlib.sha256(result.checkpoint).hexdigest()[:16]
    print(f"final checkpoint {out / 'final.ckpt'} (sha256 {digest})")
    return 0


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError([f"cannot read checkpoint {path}: {exc}"]) from exc


def _load_ckpt(path):
    return load_checkpoint(_read_bytes(path))


def cmd_eval(args) -> int:
    if not 0 < args.presence_threshold < 1 or args.max_radius < 0:
        raise ConfigError("presence threshold must lie in (0, 1), max radius >= 0")
    ckpt = _load_ckpt(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if len(manifest) == 0:
        raise DatasetError(["manifest has no entries"])
    cfg = ckpt.config
    if tuple(manifest.schema.image_size) != tuple(cfg.input_size) or (
        manifest.schema.num_instruments, manifest.schema.num_joints
    ) != (cfg.num_instruments, cfg.num_joints):
        raise DatasetError(["checkpoint is incompatible with the manifest (image size or M/N differ)"])
    probs, maps = ckpt.model.predict(manifest.load_images())
    gt_pres = np.stack([a.presence for a in manifest.annotations])
    gt_joints = np.stack([a.joints for a in manifest.annotations])
    report = evaluate(probs, argmax_joints(maps), gt_pres, gt_joints, manifest.schema.instruments,
                      manifest.schema.joints, args.max_radius, args.presence_threshold)
    emit_report(report, args.out, plot=args.plot)
    print(summary_text(report), end="")
    return 0


def cmd_infer(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = ckpt.config
    w, h = cfg.input_size
    probe = read_image(args.image, cfg.in_channels)
    if probe.shape[1:] != (h, w):
        if not args.resize:
            raise DatasetError([f"image is {probe.shape[2]}x{probe.shape[1]}, model expects {w}x{h} (use --resize)"])
        probe = read_image(args.image, cfg.in_channels, resize=(w, h))
    out = ckpt.model.forward(probe[None], mode="infer")
    probs = out.presence_probs.data[0]
    coords = argmax_joints(out.joint_maps.data[0])
    for m in range(cfg.num_instruments):
        flag = "present" if probs[m] >= args.presence_threshold else "absent"
        pts = " ".join(f"({x},{y})" for x, y in coords[m])
        print(f"instrument {m}: p={probs[m]:.6f} {flag} joints {pts}")
    if args.overlay:
        if not args.out:
            raise ConfigError("--overlay needs --out")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_overlay(probe, coords, probs >= args.presence_threshold, Path(args.out) / "overlay.png")
    return 0


def _write_overlay(image: np.ndarray, coords: np.ndarray, present: np.ndarray, path: Path) -> None:
    from PIL import Image, ImageDraw

    base = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(base, 3, axis=0) if base.shape[0] == 1 else base
    img = Image.fromarray(rgb.transpose(1, 2, 0)).convert("RGB")
    draw = ImageDraw.Draw(img)
    for m in range(coords.shape[0]):
        colour = (0, 255, 0) if present[m] else (255, 0, 0)
        for x, y in coords[m]:
            draw.ellipse([x - 1, y - 1, x + 1, y + 1], outline=colour)
    img.save(path)


# -------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instrupose", description="Multi-instrument detector")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--config", help="synthetic scene spec (JSON)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True, help="run config (JSON)")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--max-radius", type=int, default=DEFAULT_MAX_RADIUS)
    e.add_argument("--presence-threshold", type=float, default=PRESENCE_THRESHOLD)
    e.add_argument("--plot", action="store_true", help="also render curves.png")
    e.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run the detector on one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", help="directory for the overlay image")
    i.add_argument("--overlay", action="store_true")
    i.add_argument("--resize", action="store_true")
    i.add_argument("--presence-threshold", type=float, default=PRESENCE_THRESHOLD)
    i.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
