"""Inspect the encoder/decoder and run it on a batch."""

import numpy as np

from instrupose import DetectorNet, NetworkConfig
from instrupose.network import output_shapes

cfg = NetworkConfig(depth=3, base_features=8, input_size=(64, 48), num_instruments=2, num_joints=3)
net = DetectorNet.build(cfg, seed=0)
print(f"{net.parameter_count()} parameters")
for name, p in list(net.params.items())[:6]:
    print(f"  {name:28s} {p.shape}")
print("  ...")

x = np.random.default_rng(1).uniform(size=(2, 1, 48, 64))
out = net.forward(x, mode="infer")
print("presence", out.presence_probs.shape, "maps", out.joint_maps.shape)
print("every map sums to one:", np.allclose(out.joint_maps.data.sum(axis=(-1, -2)), 1.0))

# Full-resolution shapes can be read off without running the network.
big = NetworkConfig(depth=5, base_features=64, input_size=(640, 480), num_instruments=2, num_joints=3)
print(output_shapes(big, batch=4))
