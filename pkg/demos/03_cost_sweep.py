"""
Cost of merging earlier
=======================

Sweeps the insertion depth, prints analytic FLOPs per point and writes a
gnuplot data file plus script. A second, smaller sweep also times the
forward pass.
"""

import sys
from pathlib import Path

from layercomp import EncoderConfig, estimate_flops, sweep
from layercomp.reports import emit_plot

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out")
out_dir.mkdir(exist_ok=True)

cfg = EncoderConfig(L=24, d=1024, heads=16, patch=14, image_edge=336)
fractions = [1 / 12, 1 / 6, 1 / 4, 1 / 2, 1]
reports = sweep(cfg, fractions, r=2)
full = estimate_flops(cfg, cfg.L, 2).total_flops
for rep in reports:
    k = rep.metadata["k"]
    print(f"k={k:2d}: {rep.total_flops / 1e9:7.1f} GFLOPs ({rep.total_flops / full:.0%} of merging at the end)")

# per-block breakdown at k=6: attention drops 16x in its quadratic term
rep = estimate_flops(cfg, 6, 2)
for c in rep.layers[4:8]:
    print(f"  block {c.layer}: {c.tokens} tokens, attn {c.attn_flops:.3e}, merger {c.merger_flops:.3e}")

data, script = emit_plot(reports, out_dir / "flops_vs_depth")
print("wrote", data, "and", script)

# measured latency on a desk-sized encoder
small = EncoderConfig(L=12, d=192, heads=3, patch=4, image_edge=64)
timed = sweep(small, [1 / 4, 1 / 2, 1], r=2, measure=True, trials=5, warmup=1)
for rep in timed:
    print(f"k={rep.metadata['k']:2d}: median {rep.latency.median_s * 1e3:.1f} ms "
          f"(min {rep.latency.min_s * 1e3:.1f}, max {rep.latency.max_s * 1e3:.1f})")
