"""Factorized scene model: ground-truth targets and the composite cross-entropy.

A scene holds up to ``M`` instruments, each with ``N`` joints. The model
factorizes as independent Bernoulli presence variables times per-joint
location distributions conditioned on presence. Against this model the
cross-entropy splits into a binary term per instrument plus a pixel-wise
map term per (instrument, joint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, as_tensor, clip, log

SIGMA2 = 10.0
LOG_EPS = 1e-12
PRESENCE_THRESHOLD = 0.5


class SceneAnnotation:
    """Ground truth for one image.

    ``joints`` is an ``(M, N, 2)`` array of ``(x, y)`` pixel coordinates
    (zero-based, x rightward, y downward) with NaN rows for absent
    instruments.
    """

    __slots__ = ("image_size", "presence", "joints")

    def __init__(self, image_size: Tuple[int, int], presence: Sequence[bool], joints):
        w, h = (int(v) for v in image_size)
        self.image_size = (w, h)
        self.presence = np.asarray(presence, dtype=bool)
        M = self.presence.size
        if joints is None:
            raise ValueError("joints must be given (use None entries for absent instruments)")
        if isinstance(joints, np.ndarray):
            arr = np.array(joints, dtype=np.float64)
        else:
            rows = []
            for m, inst in enumerate(joints):
                rows.append(None if inst is None else [[np.nan, np.nan] if j is None else j for j in inst])
            N = max((len(r) for r in rows if r is not None), default=0)
            arr = np.full((M, N, 2), np.nan)
            for m, r in enumerate(rows):
                if r is not None:
                    arr[m, : len(r)] = np.asarray(r, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != M or arr.shape[2] != 2:
            raise ValueError(f"joints must have shape (M={M}, N, 2), got {arr.shape}")
        self.joints = arr
        self.validate()

    @property
    def num_instruments(self) -> int:
        return self.presence.size

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    def validate(self) -> None:
        w, h = self.image_size
        for m, present in enumerate(self.presence):
            pts = self.joints[m]
            if present:
                if np.isnan(pts).any():
                    raise ValueError(f"instrument {m} is present but has missing joint coordinates")
                x, y = pts[:, 0], pts[:, 1]
                bad = (x < 0) | (x >= w) | (y < 0) | (y >= h)
                if bad.any():
                    n = int(np.argmax(bad))
                    raise ValueError(
                        f"joint {n} of instrument {m} at {tuple(pts[n])} is outside the {w}x{h} image"
                    )
            elif not np.isnan(pts).all():
                raise ValueError(f"instrument {m} is absent but has joint coordinates")

    def copy(self) -> "SceneAnnotation":
        return SceneAnnotation(self.image_size, self.presence.copy(), self.joints.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneAnnotation):
            return NotImplemented
        return (
            self.image_size == other.image_size
            and np.array_equal(self.presence, other.presence)
            and np.array_equal(self.joints, other.joints, equal_nan=True)
        )

    def __repr__(self) -> str:
        return f"SceneAnnotation(size={self.image_size}, presence={self.presence.astype(int).tolist()})"


@dataclass
class TargetStack:
    """Presence targets ``(..., M)`` and joint maps ``(..., M, N, h, w)``."""

    presence_targets: np.ndarray
    joint_maps: np.ndarray
    sigma2: float = SIGMA2

    @classmethod
    def stack(cls, targets: Sequence["TargetStack"]) -> "TargetStack":
        return cls(
            np.stack([t.presence_targets for t in targets]),
            np.stack([t.joint_maps for t in targets]),
            targets[0].sigma2,
        )


@dataclass
class SceneOutput:
    """Network outputs: presence probabilities and softmax-normalized joint maps.

    Batched outputs carry a leading batch axis on both fields.
    """

    presence_probs: Tensor
    joint_maps: Tensor

    def sample(self, i: int) -> "SceneOutput":
        return SceneOutput(Tensor(self.presence_probs.data[i]), Tensor(self.joint_maps.data[i]))


def gaussian_map(x: float, y: float, width: int, height: int, sigma2: float = SIGMA2) -> np.ndarray:
    """Isotropic Gaussian at pixel centers, renormalized to sum to one.

    The density is separable, so each axis is normalized on its own with an
    exactly-rounded sum; this keeps mirrored joints producing mirrored maps.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    gx = np.exp(-((np.arange(width) - x) ** 2) / (2.0 * sigma2))
    gy = np.exp(-((np.arange(height) - y) ** 2) / (2.0 * sigma2))
    gx /= math.fsum(gx)
    gy /= math.fsum(gy)
    return np.outer(gy, gx)


def uniform_map(width: int, height: int) -> np.ndarray:
    return np.full((height, width), 1.0 / (width * height))


def synthesize_targets(annotation: SceneAnnotation, sigma2: float = SIGMA2) -> TargetStack:
    """Build the ground-truth distributions for one annotated image."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    annotation.validate()
    w, h = annotation.image_size
    M, N = annotation.num_instruments, annotation.num_joints
    maps = np.empty((M, N, h, w))
    for m in range(M):
        for n in range(N):
            if annotation.presence[m]:
                x, y = annotation.joints[m, n]
                maps[m, n] = gaussian_map(x, y, w, h, sigma2)
            else:
                maps[m, n] = uniform_map(w, h)
    return TargetStack(annotation.presence.astype(np.float64), maps, sigma2)


# ------------------------------------------------------------------- losses
def presence_ce(target, prob, eps: float = LOG_EPS) -> Tensor:
    """Binary cross-entropy ``-(t log p + (1 - t) log(1 - p))``, summed."""
    t = np.asarray(target, dtype=np.float64)
    p = clip(as_tensor(prob), eps, 1.0 - eps)
    return -(t * log(p) + (1.0 - t) * log(1.0 - p)).sum()


def map_ce(target_map, predicted_map, eps: float = LOG_EPS) -> Tensor:
    """Pixel-wise cross-entropy ``-sum(target * log(predicted))``."""
    t = np.asarray(target_map, dtype=np.float64)
    q = as_tensor(predicted_map)
    if t.shape != q.shape:
        raise ValueError(f"map shape mismatch: target {t.shape}, prediction {q.shape}")
    return -(t * log(clip(q, eps, 1.0))).sum()


class LossTerms(NamedTuple):
    total: Tensor
    presence: Tensor
    maps: Tensor


def loss_terms(
    outputs: SceneOutput,
    targets: TargetStack,
    presence_weight: float = 1.0,
    supervise_absent: bool = True,
    eps: float = LOG_EPS,
) -> LossTerms:
    """Composite loss split into its presence and joint-map sums.

    Batched inputs are averaged over the batch axis. When an instrument is
    absent its predicted map is pulled toward the uniform target unless
    ``supervise_absent`` is off, in which case that term is dropped.
    """
    probs, maps = as_tensor(outputs.presence_probs), as_tensor(outputs.joint_maps)
    t_pres = np.asarray(targets.presence_targets, dtype=np.float64)
    t_maps = np.asarray(targets.joint_maps, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs.reshape(1, *probs.shape)
        maps = maps.reshape(1, *maps.shape)
    if t_pres.ndim == 1:
        t_pres, t_maps = t_pres[None], t_maps[None]
    if probs.shape != t_pres.shape:
        raise ValueError(f"presence shape mismatch: outputs {probs.shape}, targets {t_pres.shape}")
    if maps.shape != t_maps.shape:
        raise ValueError(f"joint map shape mismatch: outputs {maps.shape}, targets {t_maps.shape}")
    B = probs.shape[0]

    p = clip(probs, eps, 1.0 - eps)
    pres = -(t_pres * log(p) + (1.0 - t_pres) * log(1.0 - p)).sum() * (1.0 / B)

    weighted = t_maps
    if not supervise_absent:
        weighted = t_maps * t_pres[:, :, None, None, None]
    per_map = -(weighted * log(clip(maps, eps, 1.0))).sum() * (1.0 / B)

    pres_w = pres * presence_weight if presence_weight != 1.0 else pres
    return LossTerms(pres_w + per_map, pres, per_map)


def composite_loss(
    outputs: SceneOutput,
    targets: TargetStack,
    presence_weight: float = 1.0,
    supervise_absent: bool = True,
) -> Tensor:
    """Sum of per-instrument presence terms and per-joint map terms."""
    return loss_terms(outputs, targets, presence_weight, supervise_absent).total


# ---------------------------------------------------------------- decoding
@dataclass
class DetectedInstrument:
    index: int
    present: bool
    probability: float
    joints: np.ndarray  # (N, 2) integer (x, y)


def argmax_joints(maps: np.ndarray) -> np.ndarray:
    """``(..., H, W)`` maps to ``(..., 2)`` integer ``(x, y)`` argmax pixels.

    Ties resolve to the first pixel in row-major order.
    """
    maps = np.asarray(maps)
    H, W = maps.shape[-2:]
    flat = maps.reshape(*maps.shape[:-2], H * W).argmax(axis=-1)
    return np.stack([flat % W, flat // W], axis=-1)


def extract_joints(
    outputs: SceneOutput, presence_threshold: float = PRESENCE_THRESHOLD
) -> List[DetectedInstrument]:
    """Decode one (unbatched) scene output into per-instrument detections."""
    if not 0.0 < presence_threshold < 1.0:
        raise ValueError("presence_threshold must lie in (0, 1)")
    probs = np.asarray(as_tensor(outputs.presence_probs).data)
    maps = np.asarray(as_tensor(outputs.joint_maps).data)
    coords = argmax_joints(maps)
    return [
        DetectedInstrument(m, bool(probs[m] >= presence_threshold), float(probs[m]), coords[m])
        for m in range(probs.shape[0])
    ]


def target_entropy(targets: TargetStack, supervise_absent: bool = True) -> float:
    """The prediction-independent floor of :func:`composite_loss` (batch mean)."""
    t_maps = np.asarray(targets.joint_maps)
    t_pres = np.asarray(targets.presence_targets)
    if t_pres.ndim == 1:
        t_pres, t_maps = t_pres[None], t_maps[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(t_maps > 0, t_maps * np.log(t_maps), 0.0).sum(axis=(-1, -2))
    if not supervise_absent:
        ent = ent * t_pres[:, :, None]
    return float(ent.sum() / t_pres.shape[0])
