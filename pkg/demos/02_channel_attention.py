"""Channel summaries, the hard sigmoid, and squeeze-excite gating.

A channel's importance for an instance is summarized from its spatial
statistics: its mean, its (mean, std) pair, or the reversed relative
standard deviation mu/(sigma + eps).  Squeeze-excite turns pooled means
into per-channel sigmoid gates.
"""

import numpy as np

from attnorm import SqueezeExcite, channel_summary, hsigmoid

rng = np.random.default_rng(1)
x = rng.standard_normal((2, 6, 8, 8))
x[0, 0] += 4.0        # bright channel
x[0, 1] *= 0.05       # nearly constant channel

print("mean summary, instance 0   :", np.round(channel_summary(x, "mean")[0], 2))
print("rsd summary, instance 0    :", np.round(channel_summary(x, "rsd")[0], 2))
print("(the near-constant channel gets an extreme rsd: tiny spread)")

ms = channel_summary(x, "meanstd")
print("meanstd width doubles      :", ms.shape)

# --- hard sigmoid ------------------------------------------------------------
a = np.linspace(-4, 4, 9)
print("\nhsigmoid on", a)
print("         ->", np.round(hsigmoid(a), 3))

# --- squeeze-excite ----------------------------------------------------------
se = SqueezeExcite(6, r=2, rng=rng, dtype=np.float64)
out = se.forward(x)
print("\nsqueeze-excite gates, instance 0:", np.round(se.gate()[0], 3))
print("output = gate * input, channel-wise:",
      float(np.abs(out[0, 2] - se.gate()[0, 2] * x[0, 2]).max()))
