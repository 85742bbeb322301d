"""Block-wise standardization and the channel-wise affine transform.

Feature normalization = standardize over a block partition, then
re-calibrate per channel.  Batch norm pools one channel across the whole
mini-batch; group norm pools channel groups within each instance.
"""

import numpy as np

from attnorm import (BatchNorm2d, GroupNorm2d, batch_blocks,
                     compute_block_moments, group_blocks, standardize)

rng = np.random.default_rng(0)
x = rng.standard_normal((8, 16, 10, 10)) * 3.0 + 2.0  # shifted, scaled

# --- raw moments per channel block -----------------------------------------
stats = compute_block_moments(x, batch_blocks(), eps=1e-5)
print("channel means  :", np.round(stats.block_mu[:4], 3))
print("channel stds   :", np.round(np.sqrt(stats.block_var[:4]), 3))

xhat = standardize(x, stats)
print("after standardization: mean ~ 0, var ~ 1")
print("  mean:", np.round(xhat.mean(axis=(0, 2, 3))[:4], 6))
print("  var :", np.round(xhat.var(axis=(0, 2, 3))[:4], 6))

# the variance is var/(var+eps), slightly below 1 by construction
predicted = stats.block_var / (stats.block_var + 1e-5)
print("  predicted var:", np.round(predicted[:4], 6))

# --- the layers -------------------------------------------------------------
bn = BatchNorm2d(16)
out = bn.forward(x.astype(np.float32), "train")
print("\nbatch norm train-mode output, channel means ~0:",
      np.round(out.mean(axis=(0, 2, 3))[:4], 5))

# eval mode uses running statistics accumulated during training
for _ in range(300):
    bn.forward(x.astype(np.float32), "train")
out_eval = bn.forward(x.astype(np.float32), "eval")
print("train vs eval after stats converge:",
      float(np.abs(out - out_eval).max()))

# group norm is batch-independent: instance 0 is normalized the same way
# whatever else is in the batch
gn = GroupNorm2d(16, groups=4)
a = gn.forward(x[:1].astype(np.float32))
b = gn.forward(np.concatenate([x[:1], x[1:] * 50]).astype(np.float32))
print("\ngroup norm batch-composition invariance:",
      float(np.abs(a[0] - b[0]).max()))
