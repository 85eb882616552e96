"""
Folding batch norm into a TDNN layer
====================================

A batch norm at inference time is an affine map per channel, so it can be
absorbed into an adjacent convolution. Which axis it scales depends on which
side of the conv it sits on.
"""

# %%
import numpy as np

from csrep import runtime as rt
from csrep.runtime import BatchNormParams, TdnnLayer
from csrep.transform import fuse_bn_first, fuse_conv_first

rng = np.random.default_rng(0)

# %%
# A scalar case first. W=2, mean=1, std=2, scale=4, shift=0.5.
bn = BatchNormParams([1.0], [2.0], [4.0], [0.5])
conv = TdnnLayer(np.array([[[2.0]]]), np.zeros(1))

after = fuse_conv_first(conv, bn)    # bn(conv(x))
before = fuse_bn_first(bn, conv)     # conv(bn(x))
print("conv-first:", after.weight.ravel(), after.bias)    # 4x - 1.5
print("bn-first:  ", before.weight.ravel(), before.bias)  # 4x - 3

# %%
# Now a grouped, three-tap layer. A batch norm in front scales the *input*
# channels of the kernel; one behind it scales the output rows.
conv = TdnnLayer(rng.standard_normal((4, 2, 3)), rng.standard_normal(4), groups=2)
bn_in = BatchNormParams(rng.normal(0, 0.5, 4), rng.uniform(0.5, 2, 4), rng.uniform(0.5, 1.5, 4),
                        rng.normal(0, 0.5, 4))
x = rng.standard_normal((1, 4, 8))

reference = rt.conv1d(rt.batchnorm_infer(x, bn_in), conv)
fused = fuse_bn_first(bn_in, conv)
print("max |diff|, all frames:", np.abs(rt.conv1d(x, fused) - reference).max())

# %%
# Why the fused layer carries a pad value: the original conv pads the
# *normalized* signal with zeros. Padding the raw signal with zeros instead
# only differs at the edges, where the kernel reaches past the input.
zero_padded = TdnnLayer(fused.weight, fused.bias, groups=2)
edge = np.abs(rt.conv1d(x, zero_padded) - reference).max(axis=1)[0]
print("per-frame error with zero padding:", np.round(edge, 3))
print("pad value (raw input that normalizes to 0):", np.round(fused.pad_value, 3))
