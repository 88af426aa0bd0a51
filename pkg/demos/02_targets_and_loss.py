"""What the network is asked to predict, and how far a guess is from it."""

import numpy as np

from instrupose import SceneAnnotation, SceneOutput, composite_loss, synthesize_targets
from instrupose.scene import loss_terms, target_entropy

# Two instruments with two joints each on a 9x7 image; only the first is visible.
ann = SceneAnnotation(
    image_size=(9, 7),
    presence=[True, False],
    joints=[[[2.0, 3.0], [6.5, 1.0]], None],
)
t = synthesize_targets(ann)
np.set_printoptions(precision=3, suppress=True)
print("presence targets:", t.presence_targets)
print("map for joint 0 of instrument 0:\n", t.joint_maps[0, 0])
print("absent instrument gets a flat map:", np.unique(t.joint_maps[1]))

# The cross-entropy of a perfect guess is the entropy of the targets, not zero.
batch = t.stack([t])
perfect = SceneOutput(batch.presence_targets, batch.joint_maps)
print("loss of the targets themselves:", composite_loss(perfect, batch).item())
print("target entropy:                ", target_entropy(batch))

# A flat guess scores worse, and the terms show where.
flat = SceneOutput(np.full((1, 2), 0.5), np.full((1, 2, 2, 7, 9), 1 / 63))
terms = loss_terms(flat, batch)
print(f"flat guess: total {terms.total.item():.3f} = presence {terms.presence.item():.3f} + maps {terms.maps.item():.3f}")
