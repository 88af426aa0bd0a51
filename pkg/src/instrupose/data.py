"""Datasets: manifest files, train/test splits and a synthetic scene renderer.

A manifest is a JSON document::

    {
      "format": "instrupose-manifest", "version": 1,
      "schema": {"instruments": [...], "joints": [...],
                 "image_size": [w, h], "channels": 1},
      "entries": [
        {"image": "images/000000.png", "sequence": "seq1",
         "instruments": {"left_tool": {"shaft_end": [x, y], ...}},
         "meta": {...}},
        ...
      ]
    }

Coordinates are zero-based pixel positions, x rightward and y downward. An
instrument missing from ``instruments`` (or mapped to an empty object) is
absent from that frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .scene import SceneAnnotation

MANIFEST_FORMAT = "instrupose-manifest"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Joints the synthetic renderer can emit, in canonical order.
SYNTHETIC_JOINTS = ("shaft_start", "shaft_end", "left_tip", "right_tip")
_SIDE_ANGLE = {"left": 0.0, "right": math.pi, "top": math.pi / 2, "bottom": -math.pi / 2}


class DatasetError(ValueError):
    """One or more problems found while loading or validating a dataset."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        head = "; ".join(self.problems[:5])
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(f"{len(self.problems)} dataset problem(s): {head}{more}")


@dataclass
class Schema:
    instruments: List[str]
    joints: List[str]
    image_size: Tuple[int, int]
    channels: int = 1

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")

    @property
    def num_instruments(self) -> int:
        return len(self.instruments)

    @property
    def num_joints(self) -> int:
        return len(self.joints)


@dataclass
class Entry:
    image: str
    annotation: SceneAnnotation
    sequence: Optional[str] = None
    meta: dict = field(default_factory=dict)
    pixels: Optional[np.ndarray] = None  # (C, H, W) in [0, 1], when held in memory


@dataclass
class DatasetManifest:
    schema: Schema
    entries: List[Entry]
    root: Optional[Path] = None
    resize: Optional[Tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def annotations(self) -> List[SceneAnnotation]:
        return [e.annotation for e in self.entries]

    def load_image(self, i: int) -> np.ndarray:
        entry = self.entries[i]
        if entry.pixels is not None:
            return entry.pixels
        if self.root is None:
            raise DatasetError([f"entry {i}: no image data and no dataset root"])
        return read_image(self.root / entry.image, self.schema.channels, self.resize)

    def load_images(self) -> np.ndarray:
        """All images stacked as ``(S, C, H, W)`` float64 in [0, 1]."""
        return np.stack([self.load_image(i) for i in range(len(self))])

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.schema, [self.entries[i] for i in indices], self.root, self.resize)


# ------------------------------------------------------------------ images
def read_image(path, channels: int = 1, resize: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Decode an 8-bit raster to ``(C, H, W)`` floats in [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            if resize is not None:
                img = img.resize(tuple(resize), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError([f"{path}: cannot decode image ({exc})"]) from exc
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr[0]) if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0))
    img.save(path)


def scale_joints(joints: np.ndarray, old_size, new_size) -> np.ndarray:
    """Map pixel-center coordinates between image sizes."""
    sx = new_size[0] / old_size[0]
    sy = new_size[1] / old_size[1]
    out = np.array(joints, dtype=np.float64)
    out[..., 0] = (out[..., 0] + 0.5) * sx - 0.5
    out[..., 1] = (out[..., 1] + 0.5) * sy - 0.5
    out[..., 0] = np.clip(out[..., 0], 0.0, new_size[0] - 1.0)
    out[..., 1] = np.clip(out[..., 1], 0.0, new_size[1] - 1.0)
    return out


# ---------------------------------------------------------------- manifests
def _entry_to_json(entry: Entry, schema: Schema) -> dict:
    ann = entry.annotation
    instruments = {}
    for m, name in enumerate(schema.instruments):
        if ann.presence[m]:
            instruments[name] = {
                jn: [float(v) for v in ann.joints[m, n]] for n, jn in enumerate(schema.joints)
            }
    record = {"image": entry.image, "instruments": instruments}
    if entry.sequence is not None:
        record["sequence"] = entry.sequence
    if entry.meta:
        record["meta"] = entry.meta
    return record


def save_manifest(manifest: DatasetManifest, root) -> Path:
    """Write the manifest (and any in-memory images) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    schema = manifest.schema
    for i, entry in enumerate(manifest.entries):
        target = root / entry.image
        if entry.pixels is not None:
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(target, entry.pixels)
        elif manifest.root is not None and Path(manifest.root).resolve() != root.resolve():
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes((Path(manifest.root) / entry.image).read_bytes())
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "schema": {
            "instruments": list(schema.instruments),
            "joints": list(schema.joints),
            "image_size": list(schema.image_size),
            "channels": schema.channels,
        },
        "entries": [_entry_to_json(e, schema) for e in manifest.entries],
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1))
    return path


def parse_manifest(doc: dict, root: Optional[Path] = None, check_images: bool = True,
                   resize: Optional[Tuple[int, int]] = None) -> DatasetManifest:
    problems: List[str] = []
    if doc.get("format") != MANIFEST_FORMAT:
        raise DatasetError([f"unexpected manifest format {doc.get('format')!r}"])
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError([f"unsupported manifest version {doc.get('version')!r}"])
    try:
        s = doc["schema"]
        schema = Schema(list(s["instruments"]), list(s["joints"]), tuple(s["image_size"]), int(s.get("channels", 1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError([f"bad schema block: {exc}"]) from exc
    w, h = schema.image_size
    out_size = tuple(resize) if resize is not None else (w, h)
    M, N = schema.num_instruments, schema.num_joints

    entries = []
    for i, rec in enumerate(doc.get("entries", [])):
        where = f"entry {i} ({rec.get('image', '?')})"
        insts = rec.get("instruments", {}) or {}
        unknown = set(insts) - set(schema.instruments)
        if unknown:
            problems.append(f"{where}: unknown instruments {sorted(unknown)}")
            continue
        presence = np.zeros(M, dtype=bool)
        joints = np.full((M, N, 2), np.nan)
        bad = False
        for m, name in enumerate(schema.instruments):
            pts = insts.get(name) or {}
            extra = set(pts) - set(schema.joints)
            if extra:
                problems.append(f"{where}: unknown joints {sorted(extra)} for {name}")
                bad = True
                continue
            if not pts:
                continue
            missing = [jn for jn in schema.joints if jn not in pts]
            if missing:
                problems.append(f"{where}: {name} is partially annotated (missing {missing})")
                bad = True
                continue
            presence[m] = True
            for n, jn in enumerate(schema.joints):
                x, y = (float(v) for v in pts[jn])
                if not (0 <= x < w and 0 <= y < h):
                    problems.append(f"{where}: {name}/{jn} at ({x}, {y}) outside {w}x{h}")
                    bad = True
                joints[m, n] = (x, y)
        if bad:
            continue
        if root is not None and check_images and not (root / rec["image"]).is_file():
            problems.append(f"{where}: image file not found")
            continue
        if resize is not None:
            joints = scale_joints(joints, (w, h), out_size)
        entries.append(
            Entry(rec["image"], SceneAnnotation(out_size, presence, joints), rec.get("sequence"), rec.get("meta", {}))
        )
    if problems:
        raise DatasetError(problems)
    if resize is not None:
        schema = Schema(schema.instruments, schema.joints, out_size, schema.channels)
    return DatasetManifest(schema, entries, root, out_size if resize is not None else None)


def load_manifest(root, check_images: bool = True, resize: Optional[Tuple[int, int]] = None) -> DatasetManifest:
    """Read ``root/manifest.json`` (or a manifest file path) and validate it.

    Images are decoded lazily. An instrument with no joints is absent; a
    present instrument must carry every joint. Problems are collected and
    raised together as a :class:`DatasetError`. ``resize=(w, h)`` rescales
    images on decode and joint coordinates at load.
    """
    path = Path(root)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError([f"{path}: cannot read manifest ({exc})"]) from exc
    return parse_manifest(doc, path.parent, check_images, resize)


# ------------------------------------------------------------------- splits
def split(
    manifest: DatasetManifest,
    fraction: Optional[float] = None,
    train_sequences: Optional[Sequence[str]] = None,
    test_sequences: Optional[Sequence[str]] = None,
) -> Tuple[DatasetManifest, DatasetManifest]:
    """Deterministic train/test split.

    With ``fraction``, the first ``floor(fraction * n)`` frames of every
    sequence (in manifest order) go to training and the rest to testing.
    Otherwise frames are assigned by explicit sequence lists.
    """
    if fraction is not None:
        if not 0.0 < fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        by_seq: Dict[Optional[str], List[int]] = {}
        for i, e in enumerate(manifest.entries):
            by_seq.setdefault(e.sequence, []).append(i)
        train_idx, test_idx = [], []
        for idx in by_seq.values():
            cut = int(math.floor(fraction * len(idx) + 1e-9))
            train_idx += idx[:cut]
            test_idx += idx[cut:]
        train_idx.sort()
        test_idx.sort()
    else:
        if train_sequences is None or test_sequences is None:
            raise ValueError("give either fraction or both train_sequences and test_sequences")
        overlap = set(train_sequences) & set(test_sequences)
        if overlap:
            raise ValueError(f"sequences in both splits: {sorted(overlap)}")
        train_idx = [i for i, e in enumerate(manifest.entries) if e.sequence in set(train_sequences)]
        test_idx = [i for i, e in enumerate(manifest.entries) if e.sequence in set(test_sequences)]
    if not train_idx or not test_idx:
        raise ValueError(f"split leaves an empty side (train={len(train_idx)}, test={len(test_idx)})")
    return manifest.subset(train_idx), manifest.subset(test_idx)


# ---------------------------------------------------------------- synthetic
_RANGE_FIELDS = ("angle_range", "length_range", "tip_length_range", "tip_spread_range",
                 "intensity_range", "background_range")

@dataclass
class SyntheticSceneSpec:
    """Parameters of the synthetic instrument renderer.

    Each instrument enters from its own image border (``sides``), so its
    identity is visible in the image. Lengths are fractions of the image
    width; angles are in degrees.
    """

    image_size: Tuple[int, int] = (64, 64)
    instruments: List[str] = field(default_factory=lambda: ["left_tool", "right_tool"])
    sides: List[str] = field(default_factory=lambda: ["left", "right"])
    joints: List[str] = field(default_factory=lambda: ["shaft_end", "left_tip", "right_tip"])
    presence_prob: List[float] = field(default_factory=lambda: [0.5, 0.5])
    angle_range: Tuple[float, float] = (-40.0, 40.0)
    length_range: Tuple[float, float] = (0.35, 0.6)
    tip_length_range: Tuple[float, float] = (0.08, 0.14)
    tip_spread_range: Tuple[float, float] = (20.0, 35.0)
    shaft_width: float = 2.5
    tip_width: float = 1.5
    intensity_range: Tuple[float, float] = (0.75, 1.0)
    background_range: Tuple[float, float] = (0.05, 0.35)
    noise_level: float = 0.03
    margin: float = 2.0
    max_retries: int = 100
    sequence: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in _RANGE_FIELDS:
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        M = len(self.instruments)
        if M < 1:
            raise ValueError("need at least one instrument")
        if len(self.sides) != M or len(self.presence_prob) != M:
            raise ValueError("sides and presence_prob need one entry per instrument")
        for s in self.sides:
            if s not in _SIDE_ANGLE:
                raise ValueError(f"unknown side {s!r}; use one of {sorted(_SIDE_ANGLE)}")
        for p in self.presence_prob:
            if not 0.0 <= p <= 1.0:
                raise ValueError("presence probabilities must lie in [0, 1]")
        if not self.joints or any(j not in SYNTHETIC_JOINTS for j in self.joints):
            raise ValueError(f"joints must be drawn from {SYNTHETIC_JOINTS}")
        for name in _RANGE_FIELDS:
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-degenerate (low, high) range")
        if self.noise_level < 0 or self.margin < 0 or self.max_retries < 1:
            raise ValueError("noise_level and margin must be >= 0, max_retries >= 1")
        if min(self.image_size) < 4:
            raise ValueError("image too small")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def schema(self) -> Schema:
        return Schema(list(self.instruments), list(self.joints), self.image_size, 1)


def instrument_points(start, angle: float, length: float, tip_length: float, tip_spread: float) -> Dict[str, np.ndarray]:
    """Shaft start/end and the two tip points for one instrument.

    ``angle`` and ``tip_spread`` are in radians, measured in image
    coordinates (y downward). The left tip sits at ``angle - tip_spread``.
    """
    start = np.asarray(start, dtype=np.float64)
    end = start + length * np.array([math.cos(angle), math.sin(angle)])
    left = end + tip_length * np.array([math.cos(angle - tip_spread), math.sin(angle - tip_spread)])
    right = end + tip_length * np.array([math.cos(angle + tip_spread), math.sin(angle + tip_spread)])
    return {"shaft_start": start, "shaft_end": end, "left_tip": left, "right_tip": right}


def _segment_coverage(xx, yy, a, b, width: float) -> np.ndarray:
    """Anti-aliased coverage of a thick segment at pixel centers."""
    d = b - a
    denom = float(d @ d)
    t = np.zeros_like(xx) if denom == 0 else np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / denom, 0, 1)
    dist = np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1]))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def _sample_geometry(spec: SyntheticSceneSpec, side: str, rng: np.random.Generator) -> dict:
    w, h = spec.image_size
    mg = spec.margin
    for _ in range(spec.max_retries):
        if side in ("left", "right"):
            start = (0.0 if side == "left" else w - 1.0, rng.uniform(mg, h - 1 - mg))
        else:
            start = (rng.uniform(mg, w - 1 - mg), 0.0 if side == "top" else h - 1.0)
        angle = _SIDE_ANGLE[side] + math.radians(rng.uniform(*spec.angle_range))
        length = rng.uniform(*spec.length_range) * w
        tip_length = rng.uniform(*spec.tip_length_range) * w
        spread = math.radians(rng.uniform(*spec.tip_spread_range))
        params = {
            "side": side,
            "start": [round(float(v), 2) for v in start],
            "angle": round(angle, 6),
            "length": round(length, 4),
            "tip_length": round(tip_length, 4),
            "tip_spread": round(spread, 6),
        }
        pts = instrument_points(params["start"], params["angle"], params["length"],
                                params["tip_length"], params["tip_spread"])
        inner = np.array([pts[k] for k in ("shaft_end", "left_tip", "right_tip")])
        if ((inner[:, 0] >= mg) & (inner[:, 0] <= w - 1 - mg) & (inner[:, 1] >= mg) & (inner[:, 1] <= h - 1 - mg)).all():
            return params
    raise ValueError(f"could not place an instrument from the {side} border within {spec.max_retries} tries")


def render_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, SceneAnnotation, dict]:
    """Draw one image; returns ``(pixels (1, H, W), annotation, logged parameters)``."""
    w, h = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lo, hi = spec.background_range
    gx, gy = rng.uniform(-1, 1, size=2)
    base = rng.uniform(lo, hi)
    ramp = 0.5 * (hi - lo) * (gx * (xx / max(w - 1, 1) - 0.5) + gy * (yy / max(h - 1, 1) - 0.5))
    img = np.clip(base + ramp, 0.0, 1.0)

    M, N = len(spec.instruments), len(spec.joints)
    presence = np.zeros(M, dtype=bool)
    joints = np.full((M, N, 2), np.nan)
    logged = []
    for m, side in enumerate(spec.sides):
        if rng.uniform() >= spec.presence_prob[m]:
            logged.append(None)
            continue
        params = _sample_geometry(spec, side, rng)
        params["intensity"] = round(float(rng.uniform(*spec.intensity_range)), 4)
        pts = instrument_points(params["start"], params["angle"], params["length"],
                                params["tip_length"], params["tip_spread"])
        cov = _segment_coverage(xx, yy, pts["shaft_start"], pts["shaft_end"], spec.shaft_width)
        for tip in ("left_tip", "right_tip"):
            cov = np.maximum(cov, _segment_coverage(xx, yy, pts["shaft_end"], pts[tip], spec.tip_width))
        img = img * (1.0 - cov) + params["intensity"] * cov
        presence[m] = True
        joints[m] = [np.round(pts[j], 2) for j in spec.joints]
        logged.append(params)
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    # quantize exactly as an 8-bit raster would store it
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img[None], SceneAnnotation((w, h), presence, joints), {"instruments": logged}


def generate_synthetic(spec: SyntheticSceneSpec, count: int) -> DatasetManifest:
    """Render ``count`` scenes; a pure function of ``(spec, count)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(count):
        pixels, ann, logged = render_scene(spec, rng)
        entries.append(Entry(f"images/{i:06d}.png", ann, spec.sequence, logged, pixels))
    return DatasetManifest(spec.schema, entries)
