"""Render a toy dataset, train briefly with flips, and watch the loss fall.

Runs in a few seconds on one core.
"""

import numpy as np

from instrupose import DetectorNet, NetworkConfig, SyntheticSceneSpec, TrainConfig, generate_synthetic, train
from instrupose.scene import argmax_joints

spec = SyntheticSceneSpec(image_size=(32, 32), seed=3)
ds = generate_synthetic(spec, 60)
train_set, test_set = ds.subset(range(48)), ds.subset(range(48, 60))
print("instruments", spec.sides, "joints", spec.joints)

net = DetectorNet.build(NetworkConfig(depth=2, base_features=8, input_size=(32, 32),
                                      num_instruments=2, num_joints=3), seed=0)
# hflip swaps left/right tools and their tips; vflip only swaps the tips
cfg = TrainConfig(learning_rate=3e-3, batch_size=4, epochs=8, seed=0, hflip=True, vflip=True,
                  hflip_instrument_perm=[1, 0], hflip_joint_perm=[0, 2, 1], vflip_joint_perm=[0, 2, 1])
result = train(net, train_set.load_images(), train_set.annotations, cfg)
per_epoch = np.array([h["loss"] for h in result.history]).reshape(cfg.epochs, -1).mean(axis=1)
print("mean loss per epoch:", np.round(per_epoch, 3))

probs, maps = net.predict(test_set.load_images())
gt_pres = np.stack([a.presence for a in test_set.annotations])
gt = np.stack([a.joints for a in test_set.annotations])
err = np.linalg.norm(argmax_joints(maps) - gt, axis=-1)[gt_pres]
print(f"held out: presence acc {((probs >= 0.5) == gt_pres).mean():.2f}, median joint error {np.median(err):.1f} px")
