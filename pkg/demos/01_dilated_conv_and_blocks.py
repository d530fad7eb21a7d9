"""
Dilated convolutions and the attention blocks
=============================================

A walk through the building blocks on small arrays. Run with
``python demos/01_dilated_conv_and_blocks.py``.
"""

import numpy as np

from dcap import tensor as T
from dcap.blocks import MDRCBlock, SEAttention, SSCABlock
from dcap.tensor import Tensor

rng = np.random.default_rng(0)

# A single bright pixel shows which inputs a 3x3 kernel reads. With dilation
# d the taps sit d pixels apart, so the footprint grows to 2d+1 without
# adding weights.
impulse = np.zeros((1, 1, 9, 9))
impulse[0, 0, 4, 4] = 1.0
ones = Tensor(np.ones((1, 1, 3, 3)))
for d in (1, 2, 3):
    response = T.conv2d(Tensor(impulse), ones, None, stride=1, padding=d, dilation=d).data[0, 0]
    print(f"dilation {d}: footprint rows {np.flatnonzero(response.any(axis=1)).tolist()}")

# im2col and direct summation are two routes to the same numbers.
x = rng.normal(size=(2, 3, 11, 11))
w = rng.normal(size=(4, 3, 3, 3))
fast = T.conv2d(Tensor(x), Tensor(w), None, 1, 2, 2).data
slow = T.conv2d_direct(x, w, None, 1, 2, 2)
print("im2col vs direct, max |diff|:", np.abs(fast - slow).max())

# An MDRC block with equal channels adds its input back. Zero every weight and
# the branch contributes nothing, leaving the identity.
block = MDRCBlock.create(3, 3, rng, dtype=np.float64)
block.zero_()
x = rng.normal(size=(1, 3, 8, 8))
print("zeroed MDRC is identity:", np.array_equal(block(Tensor(x)).data, x))

# Sigmoid of zero is one half. A zeroed SE gate therefore halves its input,
# and SSCA, which multiplies a spatial gate by a channel gate, quarters it.
se = SEAttention.create(3, rng, dtype=np.float64)
se.zero_()
ssca = SSCABlock.create(3, rng, dtype=np.float64)
ssca.zero_()
print("zeroed SE gives 0.5 X:", np.array_equal(se(Tensor(x)).data, 0.5 * x))
print("zeroed SSCA gives 0.25 X:", np.array_equal(ssca(Tensor(x)).data, 0.25 * x))

# SPPF chains three 5x5 max pools. Two in a row see a 9x9 window and three
# see 13x13, so the chain reproduces the parallel SPP pyramid exactly.
x = Tensor(rng.normal(size=(1, 2, 12, 12)))
p5 = T.maxpool2d(x, 5, 1, 2)
p9 = T.maxpool2d(p5, 5, 1, 2)
p13 = T.maxpool2d(p9, 5, 1, 2)
print("chained 5-pool == 9-pool:", np.array_equal(p9.data, T.maxpool2d(x, 9, 1, 4).data))
print("chained 5-pool == 13-pool:", np.array_equal(p13.data, T.maxpool2d(x, 13, 1, 6).data))
