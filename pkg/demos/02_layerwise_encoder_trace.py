"""
Where the merger sits inside the encoder
========================================

Runs a small vision encoder with the merger after block k and prints how
many tokens each block sees. At initialisation the combined merger behaves
exactly like average pooling.
"""

import numpy as np

from layercomp import EncoderConfig, MergerVariant, Tensor, encode, init_encoder_params, shape_trace

cfg = EncoderConfig(L=6, d=32, heads=4, patch=4, image_edge=32)  # 8x8 = 64 patch tokens
params = init_encoder_params(cfg, r=2, seed=0)
image = Tensor(np.random.default_rng(1).random((32, 32, 3)))

print(f"{cfg.num_tokens} tokens enter the first block")
for k in range(cfg.L + 1):
    trace = []
    out = encode(image, params, cfg, k, 2, trace=trace)
    print(f"k={k}: tokens per block {trace}, output {out.num_tokens} tokens")

# analytic trace for a large backbone, no forward pass needed
big = EncoderConfig(L=24, d=1024, heads=16, patch=14, image_edge=336)
print("L=24, N=576, k=6:", shape_trace(big, 6, 2))

# zero-initialised second layer: the combined merger starts as average pooling
combined = encode(image, params, cfg, 2, 2, MergerVariant.PML_WITH_RESIDUAL).numpy()
pooled = encode(image, params, cfg, 2, 2, MergerVariant.AVG_POOL).numpy()
print("combined == avg pool at init:", np.array_equal(combined, pooled))

# merging after the last block gives the same output whatever k says
ext = encode(image, params, cfg, 1, 2, MergerVariant.EXTERNAL).numpy()
last = encode(image, params, cfg, cfg.L, 2).numpy()
print("external == merge after block L:", np.array_equal(ext, last))
