"""Score noisy predictions and write the curve files."""

import tempfile
from pathlib import Path

import numpy as np

from instrupose import emit_report, evaluate
from instrupose.evaluation import summary_text

rng = np.random.default_rng(5)
frames = 40
gt_pres = rng.uniform(size=(frames, 2)) < 0.8
gt = rng.uniform(0, 64, size=(frames, 2, 3, 2))
gt[~gt_pres] = np.nan
pred = np.nan_to_num(gt) + rng.normal(0, 5, size=gt.shape)
probs = np.clip(gt_pres + rng.normal(0, 0.3, size=gt_pres.shape), 0, 1)

rep = evaluate(probs, pred, gt_pres, gt, ["left_tool", "right_tool"], ["shaft_end", "left_tip", "right_tip"])
print(summary_text(rep))

out = Path(tempfile.mkdtemp())
for kind, path in emit_report(rep, out, plot=True).items():
    print(f"{kind:8s} -> {path}")
