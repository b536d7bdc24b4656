"""Verifying every layer's analytic gradient against finite differences.

Each layer's backward pass is compared with central differences in
64-bit mode; the worst relative error per layer is printed.
"""

import numpy as np

from headseg import nn

rng = np.random.default_rng(1)

checks = [
    ("conv2d 3x3", nn.Conv2D(2, 3, 3, np.random.default_rng(2)), rng.standard_normal((2, 6, 6))),
    ("conv2d 1x1", nn.Conv2D(3, 2, 1, np.random.default_rng(3)), rng.standard_normal((3, 6, 6))),
    ("transposed conv", nn.ConvTranspose2D(2, 2, np.random.default_rng(4)), rng.standard_normal((2, 4, 4))),
    ("max pool", nn.MaxPool2(), rng.permutation(64).reshape(1, 8, 8) * 0.1),
    ("relu", nn.ReLU(), rng.standard_normal((2, 5, 5)) + 0.05),
    ("softmax", nn.SoftmaxChannels(), rng.standard_normal((7, 4, 4))),
    ("pointwise 3d", nn.PointwiseConv3D(6, 3, rng=np.random.default_rng(5)), rng.standard_normal((6, 3, 3, 3))),
]
for name, layer, x in checks:
    err = nn.finite_difference_check(layer, x, seed=6)
    print(f"{name:16s} max relative error {err:.2e}")

probs = rng.dirichlet(np.ones(7), size=(5, 5)).transpose(2, 0, 1)
truth = np.eye(7)[rng.integers(0, 7, (5, 5))].transpose(2, 0, 1)
loss, grad = nn.dice_loss(probs, truth)
err = nn.finite_difference_loss(lambda p: nn.dice_loss(p, truth)[0], probs, grad, step=1e-6)
print(f"{'dice loss':16s} max relative error {err:.2e}  (loss {loss:.4f})")
