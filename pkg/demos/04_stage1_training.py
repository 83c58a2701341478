"""
Training only the merger
========================

Freezes the encoder and trains the merger and a linear projector to
reproduce pooled patch embeddings. Compares merger variants on the same
fixed batch.
"""

import numpy as np

from layercomp import EncoderConfig, MergerVariant, TrainConfig, init_encoder_params, train_stage1
from layercomp.errors import EvaluationError

cfg = EncoderConfig(L=2, d=8, heads=2, patch=4, image_edge=16)
tcfg = TrainConfig(steps=200, lr=0.05, seed=7)

for variant in (MergerVariant.PML_WITH_RESIDUAL, MergerVariant.RESIDUAL_ONLY, MergerVariant.PML_ONLY):
    params = init_encoder_params(cfg, 2, seed=7)
    frozen = [t.data.copy() for t in params.encoder_tensors()]
    try:
        with np.errstate(all="ignore"):
            log = train_stage1(params, tcfg, cfg, 1, 2, variant)
    except EvaluationError as exc:
        # the pml-only merger outputs zeros at init, which the next layer norm amplifies
        print(f"{variant.value:14s} aborted: {exc}")
        continue
    unchanged = all(a.tobytes() == t.data.tobytes() for a, t in zip(frozen, params.encoder_tensors()))
    print(f"{variant.value:14s} loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}, "
          f"first merger grad norm {log.pml_grad_norms[0]:.3g}, encoder unchanged: {unchanged}")

# without the shortcut, layer norm sees a constant grid at init and its
# gradients are huge; plain descent only makes progress with a tiny step
params = init_encoder_params(cfg, 2, seed=7)
log = train_stage1(params, TrainConfig(steps=200, lr=1e-7, seed=7), cfg, 1, 2, MergerVariant.PML_ONLY)
print(f"pml_only at lr=1e-7: loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}, "
      f"first merger grad norm {log.pml_grad_norms[0]:.3g}")
