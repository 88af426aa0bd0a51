"""Single-pass multi-instrument detection and joint localization in numpy."""

from .data import DatasetManifest, SyntheticSceneSpec, generate_synthetic, load_manifest, save_manifest, split
from .evaluation import EvalReport, evaluate, emit_report
from .network import DetectorNet, NetworkConfig, load_checkpoint, save_checkpoint
from .scene import (
    SceneAnnotation,
    SceneOutput,
    TargetStack,
    composite_loss,
    extract_joints,
    synthesize_targets,
)
from .tensor import Tensor
from .training import TrainConfig, adam_step, augment, train

__version__ = "0.1.0"
