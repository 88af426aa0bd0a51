"""Adam optimization, flip augmentation and the end-to-end training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import DetectorNet, load_checkpoint, save_checkpoint
from .scene import SIGMA2, SceneAnnotation, TargetStack, loss_terms, synthesize_targets
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during optimization."""


# --------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, Tensor],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Gradients come from ``grads`` or, by default, from each tensor's
    ``.grad`` (missing gradients count as zero). Every gradient is checked
    before any parameter moves, so a non-finite one leaves the model intact.
    """
    if grads is None:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}; step aborted")

    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------------- augmentation
def identity_perm(n: int) -> List[int]:
    return list(range(n))


def is_involution(perm: Sequence[int]) -> bool:
    n = len(perm)
    return sorted(perm) == list(range(n)) and all(perm[perm[i]] == i for i in range(n))


def augment(
    image: np.ndarray,
    annotation: SceneAnnotation,
    op: str,
    instrument_perm: Optional[Sequence[int]] = None,
    joint_perm: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, SceneAnnotation]:
    """Mirror an image and its annotation.

    ``op`` is ``"hflip"`` (x -> w - 1 - x) or ``"vflip"`` (y -> h - 1 - y).
    Instrument ``m`` becomes instrument ``instrument_perm[m]`` and joint
    ``n`` becomes ``joint_perm[n]``, so that e.g. a left tool turns into a
    right tool under a horizontal flip. Sub-pixel coordinates beyond the
    last pixel center would mirror to negative values and are clamped to 0.
    """
    w, h = annotation.image_size
    M, N = annotation.num_instruments, annotation.num_joints
    ip = identity_perm(M) if instrument_perm is None else list(instrument_perm)
    jp = identity_perm(N) if joint_perm is None else list(joint_perm)
    if not (is_involution(ip) and len(ip) == M and is_involution(jp) and len(jp) == N):
        raise ValueError("flip permutations must be involutions over the instrument/joint indices")

    joints = annotation.joints.copy()
    if op == "hflip":
        image = image[..., :, ::-1]
        joints[..., 0] = np.clip((w - 1) - joints[..., 0], 0.0, w - 1)
    elif op == "vflip":
        image = image[..., ::-1, :]
        joints[..., 1] = np.clip((h - 1) - joints[..., 1], 0.0, h - 1)
    else:
        raise ValueError(f"unknown augmentation {op!r}")

    presence = np.zeros(M, dtype=bool)
    out = np.full_like(joints, np.nan)
    for m in range(M):
        presence[ip[m]] = annotation.presence[m]
        for n in range(N):
            out[ip[m], jp[n]] = joints[m, n]
    return np.ascontiguousarray(image), SceneAnnotation((w, h), presence, out)


# ------------------------------------------------------------ training loop
@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hflip: bool = False
    vflip: bool = False
    hflip_instrument_perm: Optional[List[int]] = None
    hflip_joint_perm: Optional[List[int]] = None
    vflip_instrument_perm: Optional[List[int]] = None
    vflip_joint_perm: Optional[List[int]] = None
    sigma2: float = SIGMA2
    presence_weight: float = 1.0
    supervise_absent: bool = True
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        for name in ("hflip_instrument_perm", "hflip_joint_perm", "vflip_instrument_perm", "vflip_joint_perm"):
            perm = getattr(self, name)
            if perm is not None and not is_involution(list(perm)):
                raise ValueError(f"{name} must be an involution")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: bytes
    history: List[dict]


LOSS_COLUMNS = ("step", "epoch", "loss", "presence_term", "map_term")


def _check_dataset(model: DetectorNet, images: np.ndarray, annotations: Sequence[SceneAnnotation]) -> None:
    cfg = model.config
    w, h = cfg.input_size
    problems = []
    if len(images) != len(annotations):
        problems.append(f"{len(images)} images but {len(annotations)} annotations")
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, h, w):
        problems.append(f"images have shape {images.shape[1:]}, model expects {(cfg.in_channels, h, w)}")
    for i, ann in enumerate(annotations):
        if ann.image_size != (w, h):
            problems.append(f"annotation {i} is for a {ann.image_size} image")
        if ann.num_instruments != cfg.num_instruments or ann.num_joints != cfg.num_joints:
            problems.append(f"annotation {i} has M={ann.num_instruments}, N={ann.num_joints}")
    if not len(annotations):
        problems.append("dataset is empty")
    if problems:
        raise ValueError("dataset does not match the model: " + "; ".join(problems[:5]))


def train(
    model: DetectorNet,
    images: np.ndarray,
    annotations: Sequence[SceneAnnotation],
    config: TrainConfig,
    run_dir=None,
    resume: Optional[bytes] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Optimize ``model`` in place with Adam on the composite loss.

    Each epoch shuffles the data and draws per-sample flips from a generator
    seeded by ``(config.seed, epoch)``, so a run resumed from an epoch-end
    checkpoint (``resume``) continues exactly as the uninterrupted run would.
    With ``run_dir`` set, the per-step loss log and checkpoints are written
    there.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    _check_dataset(model, images, annotations)
    M, N = model.config.num_instruments, model.config.num_joints
    perms = {
        "hflip": (config.hflip_instrument_perm or identity_perm(M), config.hflip_joint_perm or identity_perm(N)),
        "vflip": (config.vflip_instrument_perm or identity_perm(M), config.vflip_joint_perm or identity_perm(N)),
    }

    adam = AdamState()
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.model.state_dict())
        start_epoch = int(ckpt.metadata.get("epoch", 0))
        adam.step = int(ckpt.metadata.get("adam_step", 0))
        for key, value in ckpt.extra.items():
            kind, name = key.split("/", 1)
            (adam.m if kind == "adam_m" else adam.v)[name] = value.copy()

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "loss.csv"
        fresh = resume is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOSS_COLUMNS)

    def snapshot(epoch: int) -> bytes:
        extra = {f"adam_m/{k}": v for k, v in adam.m.items()}
        extra.update({f"adam_v/{k}": v for k, v in adam.v.items()})
        meta = {"epoch": epoch, "adam_step": adam.step, "seed": config.seed, "train_config": config.to_dict()}
        return save_checkpoint(model, meta, extra)

    history: List[dict] = []
    S = len(images)
    try:
        for epoch in range(start_epoch, config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(S)
            epoch_losses = []
            for start in range(0, S, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch_x, batch_t = [], []
                for i in idx:
                    img, ann = images[i], annotations[i]
                    for op, enabled in (("hflip", config.hflip), ("vflip", config.vflip)):
                        if enabled and rng.uniform() < 0.5:
                            img, ann = augment(img, ann, op, *perms[op])
                    batch_x.append(img)
                    batch_t.append(synthesize_targets(ann, config.sigma2))
                out = model.forward(np.stack(batch_x), mode="train")
                terms = loss_terms(out, TargetStack.stack(batch_t), config.presence_weight, config.supervise_absent)
                loss = terms.total.item()
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at step {adam.step + 1} (epoch {epoch})")
                model.zero_grad()
                terms.total.backward()
                adam_step(model.params, adam, config.learning_rate, config.beta1, config.beta2, config.eps)
                record = {
                    "step": adam.step,
                    "epoch": epoch,
                    "loss": loss,
                    "presence_term": terms.presence.item(),
                    "map_term": terms.maps.item(),
                }
                history.append(record)
                epoch_losses.append(loss)
                if writer is not None:
                    writer.writerow([record[c] if c in ("step", "epoch") else repr(record[c]) for c in LOSS_COLUMNS])
            mean_loss = float(np.mean(epoch_losses))
            logger.info("epoch %d: mean loss %.6f", epoch, mean_loss)
            if on_epoch is not None:
                on_epoch(epoch, mean_loss)
            if run_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                (run_dir / f"epoch_{epoch + 1:04d}.ckpt").write_bytes(snapshot(epoch + 1))
    finally:
        if log_file is not None:
            log_file.close()

    final = snapshot(max(config.epochs, start_epoch))
    if run_dir is not None:
        (run_dir / "final.ckpt").write_bytes(final)
    return TrainResult(final, history)
