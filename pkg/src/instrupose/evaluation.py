"""Threshold-accuracy curves, mean pixel errors and presence rates."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .scene import PRESENCE_THRESHOLD

DEFAULT_MAX_RADIUS = 40
REPORT_RADIUS = 15


def joint_accuracy_curve(pred, gt, include=None, max_radius: int = DEFAULT_MAX_RADIUS) -> Optional[np.ndarray]:
    """Fraction of included frames whose error is ``<= r`` for ``r = 0..max_radius``.

    ``pred`` and ``gt`` are ``(F, 2)`` coordinate arrays; ``include`` masks
    the frames where the instrument is present in the ground truth. Returns
    ``None`` when no frame is included.
    """
    errors = _errors(pred, gt, include)
    if errors.size == 0:
        return None
    radii = np.arange(max_radius + 1)
    return (errors[None, :] <= radii[:, None]).mean(axis=1)


def mean_pixel_error(pred, gt, include=None) -> float:
    """Mean Euclidean distance over the included frames (NaN if none)."""
    errors = _errors(pred, gt, include)
    return float(errors.mean()) if errors.size else float("nan")


def presence_rate(pred_probs, gt_presence, threshold: float = PRESENCE_THRESHOLD) -> np.ndarray:
    """Per-instrument fraction of frames with correctly thresholded presence."""
    pred = np.asarray(pred_probs) >= threshold
    return (pred == np.asarray(gt_presence, dtype=bool)).mean(axis=0)


def _errors(pred, gt, include) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground truth misaligned: {pred.shape} vs {gt.shape}")
    d = np.linalg.norm(pred - gt, axis=-1)
    if include is not None:
        d = d[np.asarray(include, dtype=bool)]
    return d


@dataclass
class EvalReport:
    instruments: List[str]
    joints: List[str]
    max_radius: int
    curves: Dict[str, Optional[np.ndarray]]  # key "instrument/joint"
    mean_errors: Dict[str, float]
    presence_rates: Dict[str, float]
    frames: int
    included: Dict[str, int] = field(default_factory=dict)
    threshold: float = PRESENCE_THRESHOLD

    @property
    def keys(self) -> List[str]:
        return [f"{i}/{j}" for i in self.instruments for j in self.joints]

    def accuracy_at(self, radius: int) -> Dict[str, Optional[float]]:
        return {k: (None if c is None else float(c[radius])) for k, c in self.curves.items()}


def evaluate(
    pred_probs: np.ndarray,
    pred_joints: np.ndarray,
    gt_presence: np.ndarray,
    gt_joints: np.ndarray,
    instruments: Sequence[str],
    joints: Sequence[str],
    max_radius: int = DEFAULT_MAX_RADIUS,
    threshold: float = PRESENCE_THRESHOLD,
) -> EvalReport:
    """Score predictions ``(F, M)`` / ``(F, M, N, 2)`` against ground truth.

    Joint metrics use only frames where the instrument is present in the
    ground truth, whatever the predicted presence.
    """
    gt_presence = np.asarray(gt_presence, dtype=bool)
    F = gt_presence.shape[0]
    if F == 0:
        raise ValueError("nothing to evaluate")
    curves, errs, included = {}, {}, {}
    for m, iname in enumerate(instruments):
        mask = gt_presence[:, m]
        for n, jname in enumerate(joints):
            key = f"{iname}/{jname}"
            curves[key] = joint_accuracy_curve(pred_joints[:, m, n], np.nan_to_num(gt_joints[:, m, n]), mask, max_radius)
            errs[key] = mean_pixel_error(pred_joints[:, m, n], np.nan_to_num(gt_joints[:, m, n]), mask)
            included[key] = int(mask.sum())
    rates = presence_rate(pred_probs, gt_presence, threshold)
    return EvalReport(
        list(instruments), list(joints), max_radius, curves, errs,
        {name: float(r) for name, r in zip(instruments, rates)}, F, included, threshold,
    )


# ------------------------------------------------------------------ output
def write_curves_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold"] + report.keys)
        for r in range(report.max_radius + 1):
            w.writerow([r] + ["" if report.curves[k] is None else repr(float(report.curves[k][r])) for k in report.keys])


def read_curves_csv(path) -> Dict[str, Optional[np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for c, key in enumerate(header[1:], start=1):
        col = [row[c] for row in body]
        out[key] = None if all(v == "" for v in col) else np.array([float(v) for v in col])
    return out


def summary_text(report: EvalReport) -> str:
    lines = [f"frames evaluated: {report.frames}", f"presence threshold: {report.threshold}", ""]
    lines.append("presence classification rate:")
    for name, rate in report.presence_rates.items():
        lines.append(f"  {name}: {100 * rate:.2f}%")
    lines.append("")
    r = min(REPORT_RADIUS, report.max_radius)
    lines.append(f"joint accuracy at {r} px / mean pixel error / frames:")
    at = report.accuracy_at(r)
    for k in report.keys:
        acc = "n/a" if at[k] is None else f"{100 * at[k]:.2f}%"
        err = "n/a" if np.isnan(report.mean_errors[k]) else f"{report.mean_errors[k]:.2f} px"
        lines.append(f"  {k}: {acc} @ {r} px, mean error {err}, {report.included[k]} frames")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir, plot: bool = False) -> Dict[str, Path]:
    """Write ``curves.csv``, ``summary.txt``, ``summary.json`` (and ``curves.png``)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"curves": out / "curves.csv", "summary": out / "summary.txt", "json": out / "summary.json"}
        write_curves_csv(report, paths["curves"])
        paths["summary"].write_text(summary_text(report))
        r = min(REPORT_RADIUS, report.max_radius)
        doc = {
            "frames": report.frames,
            "presence_threshold": report.threshold,
            "presence_rates": report.presence_rates,
            "mean_errors": {k: (None if np.isnan(v) else v) for k, v in report.mean_errors.items()},
            f"accuracy_at_{r}px": report.accuracy_at(r),
            "included_frames": report.included,
            "max_radius": report.max_radius,
        }
        paths["json"].write_text(json.dumps(doc, indent=1, sort_keys=True))
        if plot:
            fig = plot_curves(report)
            paths["plot"] = out / "curves.png"
            fig.savefig(paths["plot"], dpi=100)
            import matplotlib.pyplot as plt

            plt.close(fig)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def plot_curves(report: EvalReport):
    """Accuracy-vs-threshold line chart, one line per joint."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    radii = np.arange(report.max_radius + 1)
    for k in report.keys:
        if report.curves[k] is not None:
            ax.plot(radii, 100 * report.curves[k], label=k)
    ax.set_xlabel("threshold [px]")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 101)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig
