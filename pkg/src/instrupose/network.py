"""Encoder-decoder detector with a bottleneck presence classifier.

The encoder runs ``depth`` stages of 3x3 conv -> batch norm -> ReLU -> 2x2
max-pool, doubling the feature count each stage. The decoder mirrors it with
2x upsampling -> (skip concat) -> 3x3 conv -> batch norm -> ReLU, halving the
feature count each stage. A final 1x1 convolution emits one logit map per
(instrument, joint) pair, normalized per map with a spatial softmax. A dense
layer from the flattened bottleneck emits one sigmoid presence probability
per instrument.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .scene import SceneOutput
from .tensor import Tensor, as_tensor

MAGIC = b"IPOSE-CK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint bytes."""


@dataclass
class NetworkConfig:
    depth: int = 5
    base_features: int = 64
    input_size: Tuple[int, int] = (640, 480)  # (w, h)
    num_instruments: int = 1
    num_joints: int = 4
    in_channels: int = 1
    kernel_size: int = 3
    skip_connections: bool = True
    hidden_units: int = 0
    bn_momentum: float = F.BN_MOMENTUM
    bn_eps: float = F.BN_EPS

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")
        if self.num_instruments < 1 or self.num_joints < 1:
            raise ValueError("num_instruments and num_joints must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.hidden_units < 0:
            raise ValueError("hidden_units must be >= 0")
        if len(self.input_size) != 2:
            raise ValueError("input_size must be (width, height)")
        step = 2**self.depth
        w, h = self.input_size
        if w < step or h < step or w % step or h % step:
            raise ValueError(f"input size {w}x{h} must be a positive multiple of 2**depth = {step}")

    # channel schedule ------------------------------------------------------
    @property
    def encoder_channels(self) -> List[int]:
        return [self.base_features * 2**i for i in range(self.depth)]

    @property
    def decoder_channels(self) -> List[int]:
        """Output channels of decoder stages, listed from the bottom (deepest) up."""
        enc = self.encoder_channels
        return [max(enc[j] // 2, 1) for j in reversed(range(self.depth))]

    @property
    def bottleneck_size(self) -> int:
        w, h = self.input_size
        s = 2**self.depth
        return self.encoder_channels[-1] * (w // s) * (h // s)

    @property
    def num_maps(self) -> int:
        return self.num_instruments * self.num_joints

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def output_shapes(config: NetworkConfig, batch: int = 1) -> Dict[str, Tuple[int, ...]]:
    """Shapes produced by :meth:`DetectorNet.forward`, without running it."""
    w, h = config.input_size
    return {
        "presence_probs": (batch, config.num_instruments),
        "joint_maps": (batch, config.num_instruments, config.num_joints, h, w),
    }


class DetectorNet:
    """Parameters, batch-norm statistics and the forward pass of the detector."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.bn: Dict[str, F.BatchNormState] = {}

    # ----------------------------------------------------------------- build
    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0) -> "DetectorNet":
        config.validate()
        rng = np.random.default_rng(seed)
        net = cls(config)
        k = config.kernel_size

        def conv(name, c_in, c_out, ksize, gain=2.0, bias=False):
            fan_in = c_in * ksize * ksize
            w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(c_out, c_in, ksize, ksize))
            net._add(f"{name}.weight", w)
            if bias:
                net._add(f"{name}.bias", np.zeros(c_out))

        def bn(name, c):
            net._add(f"{name}.gamma", np.ones(c))
            net._add(f"{name}.beta", np.zeros(c))
            net.bn[name] = F.BatchNormState.initialized(c, momentum=config.bn_momentum, eps=config.bn_eps)

        c_in = config.in_channels
        for i, c in enumerate(config.encoder_channels):
            conv(f"enc{i}.conv", c_in, c, k)
            bn(f"enc{i}.bn", c)
            c_in = c
        enc = config.encoder_channels
        for j, c in zip(reversed(range(config.depth)), config.decoder_channels):
            c_cat = c_in + (enc[j] if config.skip_connections else 0)
            conv(f"dec{j}.conv", c_cat, c, k)
            bn(f"dec{j}.bn", c)
            c_in = c
        conv("head.conv", c_in, config.num_maps, 1, gain=1.0, bias=True)

        d_in = config.bottleneck_size
        if config.hidden_units:
            h = config.hidden_units
            net._add("cls.hidden.weight", rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, h)))
            net._add("cls.hidden.bias", np.zeros(h))
            d_in = h
        net._add("cls.weight", rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, config.num_instruments)))
        net._add("cls.bias", np.zeros(config.num_instruments))
        return net

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --------------------------------------------------------------- forward
    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        w, h = cfg.input_size
        expected = (cfg.in_channels, h, w)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"input must have shape (B, {cfg.in_channels}, {h}, {w}), got {x.shape}")

    def forward_logits(self, x, mode: str = "infer") -> Tuple[Tensor, Tensor]:
        """Pre-activation outputs: ``(map_logits (B, M*N, H, W), presence_logits (B, M))``."""
        x = as_tensor(x)
        self._check_input(x)
        cfg, p = self.config, self.params
        skips = []
        for i in range(cfg.depth):
            x = F.conv2d(x, p[f"enc{i}.conv.weight"])
            x = self._bn(f"enc{i}.bn", x, mode)
            x = F.relu(x)
            skips.append(x)
            x = F.max_pool2(x)

        z = F.flatten(x)
        if cfg.hidden_units:
            z = F.relu(F.dense(z, p["cls.hidden.weight"], p["cls.hidden.bias"]))
        presence_logits = F.dense(z, p["cls.weight"], p["cls.bias"])

        for j in reversed(range(cfg.depth)):
            x = F.upsample2(x)
            if cfg.skip_connections:
                x = F.concat([x, skips[j]], axis=1)
            x = F.conv2d(x, p[f"dec{j}.conv.weight"])
            x = self._bn(f"dec{j}.bn", x, mode)
            x = F.relu(x)
        map_logits = F.conv2d(x, p["head.conv.weight"], p["head.conv.bias"])
        return map_logits, presence_logits

    def _bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        return F.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name], mode)

    def forward(self, x, mode: str = "infer") -> SceneOutput:
        """Single pass producing presence probabilities and joint maps.

        ``joint_maps`` has shape ``(B, M, N, H, W)``; ``presence_probs`` is ``(B, M)``.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        map_logits, presence_logits = self.forward_logits(x, mode)
        B, _, H, W = map_logits.shape
        maps = F.spatial_softmax(map_logits)
        maps = maps.reshape(B, self.config.num_instruments, self.config.num_joints, H, W)
        return SceneOutput(F.sigmoid(presence_logits), maps)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
        """Inference over many images: ``(presence (S, M), maps (S, M, N, H, W))``."""
        probs, maps = [], []
        for start in range(0, len(images), batch_size):
            out = self.forward(images[start : start + batch_size], mode="infer")
            probs.append(out.presence_probs.data)
            maps.append(out.joint_maps.data)
        return np.concatenate(probs), np.concatenate(maps)

    # ----------------------------------------------------------------- state
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.params.items()}
        for name, s in self.bn.items():
            if s.ready:
                state[f"{name}.running_mean"] = s.mean.copy()
                state[f"{name}.running_var"] = s.var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in state]
        if missing:
            raise CheckpointError(f"state is missing parameters: {missing[:5]}")
        for name, t in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise CheckpointError(f"parameter {name} has shape {value.shape}, expected {t.shape}")
            t.data = value.copy()
        for name, s in self.bn.items():
            if f"{name}.running_mean" in state:
                s.mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
                s.var = np.array(state[f"{name}.running_var"], dtype=np.float64)
            else:
                s.mean = s.var = None

    def save(self, metadata: Optional[dict] = None, extra: Optional[Dict[str, np.ndarray]] = None) -> bytes:
        return save_checkpoint(self, metadata, extra)

    @staticmethod
    def load(blob: bytes) -> "DetectorNet":
        return load_checkpoint(blob).model


# ------------------------------------------------------------------ checkpoint
@dataclass
class Checkpoint:
    config: NetworkConfig
    model: DetectorNet
    metadata: dict = field(default_factory=dict)
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def save_checkpoint(
    model: DetectorNet, metadata: Optional[dict] = None, extra: Optional[Dict[str, np.ndarray]] = None
) -> bytes:
    """Serialize config, parameters, running statistics and optional extras.

    Layout (little-endian): magic, u32 version, u32-length-prefixed JSON
    config, u32-length-prefixed JSON metadata, u32 tensor count, then per
    tensor ``u32 name length, utf-8 name, u32 rank, u64 dims..., f64 data``,
    and a trailing CRC-32 of everything before it.
    """
    tensors = dict(model.state_dict())
    for name, value in (extra or {}).items():
        tensors[f"extra/{name}"] = value
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _block(json.dumps(model.config.to_dict(), sort_keys=True).encode()),
        _block(json.dumps(metadata or {}, sort_keys=True).encode()),
        struct.pack("<I", len(tensors)),
    ]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(blob: bytes) -> Checkpoint:
    """Parse bytes written by :func:`save_checkpoint` into a ready model."""
    blob = bytes(blob)
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a detector checkpoint (bad magic or too short)")
    r = _Reader(blob)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, crc = blob[:-4], blob[-4:]
    if struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    r.blob = body
    try:
        config = NetworkConfig.from_dict(json.loads(r.take(r.u32())))
        metadata = json.loads(r.take(r.u32()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    model = DetectorNet.build(config, seed=0)
    extra = {k[len("extra/") :]: v for k, v in tensors.items() if k.startswith("extra/")}
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("extra/")})
    return Checkpoint(config, model, metadata, extra)
