"""Build a tiny graph by hand, backpropagate, and compare with finite differences."""

import numpy as np

from instrupose import functional as F
from instrupose.gradcheck import check_gradients
from instrupose.tensor import Tensor

rng = np.random.default_rng(0)

# A scalar expression: d/dx (x*x + 3x) at x=2 is 7.
x = Tensor(np.array([2.0]), requires_grad=True)
y = (x * x + x * 3.0).sum()
y.backward()
print("value", y.item(), "grad", x.grad)

# Graphs are single use; rebuild them for every backward pass.
try:
    y.backward()
except Exception as err:
    print("second backward:", type(err).__name__)

# conv -> relu -> pool -> dense, checked entry by entry against central differences
img = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
k = Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.3, requires_grad=True)
w = Tensor(rng.standard_normal((4 * 4 * 4, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)


def loss():
    h = F.max_pool2(F.relu(F.conv2d(img, k)))
    return F.dense(h.reshape(2, -1), w, b).exp().sum()


print("worst relative error:", check_gradients(loss, [img, k, w, b], samples=30))
