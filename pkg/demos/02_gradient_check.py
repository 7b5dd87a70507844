"""Finite-difference check of a tiny U-Net against its backward pass.

Everything runs in float64 so the central difference is accurate to about
1e-8 relative.
"""

import numpy as np

from riunet import tensor as T
from riunet.loss import masked_weighted_cross_entropy
from riunet.model import ModelConfig, build

rng = np.random.default_rng(0)
model = build(ModelConfig(depth_levels=1, base_features=2, num_classes=2, input_height=8, input_width=16), dtype=np.float64)
x = rng.standard_normal((1, 2, 8, 16))
labels = rng.integers(0, 2, (1, 8, 16))
mask = np.ones((1, 8, 16))


def loss_value():
    with T.no_grad():
        return masked_weighted_cross_entropy(model.forward(x, "train"), labels, mask).item()


params = model.parameters()
T.backward(masked_weighted_cross_entropy(model.forward(x, "train"), labels, mask).value, params)

eps = 1e-6
for p in params:
    flat = p.data.reshape(-1)
    i = int(rng.integers(flat.size))
    old = flat[i]
    flat[i] = old + eps
    up = loss_value()
    flat[i] = old - eps
    down = loss_value()
    flat[i] = old
    numeric = (up - down) / (2 * eps)
    analytic = p.grad.reshape(-1)[i]
    print(f"{p.name:28s} analytic {analytic:+.8e}  numeric {numeric:+.8e}")

# Conv biases sit right before batchnorm, which subtracts the batch mean, so
# their true gradient is zero; both columns show round-off there.
