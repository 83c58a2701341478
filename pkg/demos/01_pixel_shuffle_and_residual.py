"""
Pixel shuffle and the average-pooling shortcut
==============================================

Folds each r x r window of a token grid into the channel axis, then shows
that averaging those channel groups is the same as average pooling.
"""

import numpy as np

from layercomp import TokenGrid, pixel_shuffle, pixel_unshuffle, residual_shortcut
from layercomp.grid import avg_pool_oracle

# a 4x4 grid with one channel, values 0..15 in row-major order
g = TokenGrid.from_array(np.arange(16.0).reshape(4, 4, 1))
print("input grid:\n", g.numpy()[..., 0])

# every 2x2 window becomes one token with 4 channels
s = pixel_shuffle(g, 2)
print("shuffled shape:", s.numpy().shape)
print("token (0, 0) carries window [[0, 1], [4, 5]] as", s.numpy()[0, 0])

# unshuffle restores the grid bit for bit
assert pixel_unshuffle(s, 2).numpy().tobytes() == g.numpy().tobytes()
print("round trip is exact")

# the residual path averages the r^2 channel groups
res = residual_shortcut(g, 2).numpy()[..., 0]
print("residual shortcut:\n", res)
print("window-loop average pool:\n", avg_pool_oracle(g, 2).numpy()[..., 0])

# a wider random grid, to see the token count fall by r^2
rng = np.random.default_rng(0)
big = TokenGrid.from_array(rng.normal(size=(24, 24, 16)))
for r in (1, 2, 3, 4):
    out = residual_shortcut(big, r)
    err = np.abs(out.numpy() - avg_pool_oracle(big, r).numpy()).max()
    print(f"r={r}: {big.num_tokens} -> {out.num_tokens} tokens, max |shortcut - pool| = {err:.1e}")
