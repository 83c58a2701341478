import time

import pytest

from layercomp.cost import (
    CostReport,
    attention_flops,
    estimate_flops,
    measure_latency,
    merger_flops,
    mlp_flops,
    sweep,
)
from layercomp.encoder import EncoderConfig
from layercomp.pml import MergerVariant

V = MergerVariant
BIG = EncoderConfig(L=24, d=1024, heads=16, patch=14, image_edge=336)  # N = 576
TINY = EncoderConfig(L=2, d=8, heads=2, patch=4, image_edge=16)
FRACTIONS = [1 / 12, 1 / 6, 1 / 4, 1 / 2, 1.0]


def uncompressed_total(cfg):
    n = cfg.num_tokens
    return cfg.L * (attention_flops(n, cfg.d) + mlp_flops(n, cfg.d, cfg.mlp_width))


def test_layer_formulas():
    assert attention_flops(10, 4) == 4 * 10 * 16 + 2 * 100 * 4
    assert mlp_flops(10, 4, 16) == 2 * 10 * 4 * 16 * 2
    rep = estimate_flops(BIG, 6, 2)
    first, last = rep.layers[0], rep.layers[-1]
    assert (first.tokens, last.tokens) == (576, 144)
    assert first.attn_flops == 4 * 576 * 1024**2 + 2 * 576**2 * 1024
    assert last.mlp_flops == 4 * 144 * 1024 * 4096
    assert rep.total_flops == sum(c.attn_flops + c.mlp_flops + c.merger_flops for c in rep.layers)


def test_merger_cost_formula_and_placement():
    rep = estimate_flops(BIG, 6, 2, hidden=4096)
    expected = 2 * 144 * (4096 * 4096 + 4096 * 1024) + 144 * 4 * 1024
    assert [c.merger_flops for c in rep.layers] == [0] * 5 + [expected] + [0] * 18
    assert merger_flops(576, 1024, 2, 4096, V.RESIDUAL_ONLY) == 144 * 4 * 1024
    assert merger_flops(576, 1024, 2, 4096, V.PML_ONLY) == 2 * 144 * (4096 * 4096 + 4096 * 1024)


def test_r1_costs_the_uncompressed_encoder():
    rep = estimate_flops(BIG, 6, 1)
    assert rep.merger_flops == 0
    assert rep.total_flops == uncompressed_total(BIG)


def test_k0_bills_every_block_at_reduced_tokens():
    rep = estimate_flops(BIG, 0, 2)
    assert all(c.tokens == 144 for c in rep.layers)
    assert rep.layers[0].merger_flops > 0


def test_total_ordering_k6_k12_k24():
    totals = [estimate_flops(BIG, k, 2).total_flops for k in (6, 12, 24)]
    assert totals[0] < totals[1] < totals[2]


@pytest.mark.parametrize("variant", [v for v in V if v is not V.EXTERNAL])
def test_strictly_monotone_in_k(variant):
    totals = [estimate_flops(BIG, k, 2, variant).total_flops for k in range(BIG.L + 1)]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_quadratic_term_shrinks_sixteenfold():
    n, d = 576, 1024
    full = 2 * n * n * d
    merged = 2 * (n // 4) ** 2 * d
    assert full == 16 * merged
    before = estimate_flops(BIG, 6, 2).layers[0]
    after = estimate_flops(BIG, 6, 2).layers[-1]
    assert after.attn_flops - 4 * 144 * d * d == (before.attn_flops - 4 * 576 * d * d) // 16


def test_sweep_is_increasing():
    reps = sweep(BIG, FRACTIONS, 2)
    assert [r.metadata["k"] for r in reps] == [2, 4, 6, 12, 24]
    totals = [r.total_flops for r in reps]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_sweep_empty_and_external():
    assert sweep(BIG, [], 2) == []
    reps = sweep(BIG, FRACTIONS, 2, [V.EXTERNAL])
    assert len({r.total_flops for r in reps}) == 1


def test_sweep_ordering_is_fraction_major():
    reps = sweep(BIG, [0.25, 0.5], 2, [V.PML_WITH_RESIDUAL, V.AVG_POOL])
    assert [(r.metadata["fraction"], r.metadata["variant"]) for r in reps] == [
        (0.25, "pml_residual"), (0.25, "avg_pool"), (0.5, "pml_residual"), (0.5, "avg_pool"),
    ]


def test_sweep_reports_errors_per_entry():
    reps = sweep(BIG, [0.25, 0.5], 5)  # 5 does not divide the 24x24 grid
    assert len(reps) == 2
    assert all(r.error and "divisible" in r.error for r in reps)


def test_sweep_parallel_equals_sequential():
    seq = sweep(BIG, FRACTIONS, 2, list(V), workers=1)
    par = sweep(BIG, FRACTIONS, 2, list(V), workers=4)
    assert [r.to_dict() for r in seq] == [r.to_dict() for r in par]


def test_report_dict_roundtrip():
    rep = estimate_flops(BIG, 6, 2, seed=3, fraction=0.25)
    assert CostReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()
    doc = rep.to_dict()
    doc["total_flops"] += 1
    with pytest.raises(ValueError):
        CostReport.from_dict(doc)


def test_measure_latency_preconditions():
    with pytest.raises(ValueError):
        measure_latency(TINY, 1, 2, trials=4)
    with pytest.raises(ValueError):
        measure_latency(TINY, 1, 2, warmup=0)


def test_tiny_latency_is_fast_and_positive():
    t0 = time.perf_counter()
    stats = measure_latency(TINY, 1, 2, trials=5, warmup=1)
    assert time.perf_counter() - t0 < 10.0
    assert 0 < stats.min_s <= stats.median_s <= stats.max_s
    assert stats.trials == 5


def test_latency_stability_smoke():
    cfg = EncoderConfig(L=4, d=64, heads=2, patch=4, image_edge=32)
    a = measure_latency(cfg, 1, 2, trials=9, warmup=2).median_s
    b = measure_latency(cfg, 1, 2, trials=9, warmup=2).median_s
    assert abs(a - b) <= 0.2 * max(a, b)


def test_earlier_insertion_is_faster():
    cfg = EncoderConfig(L=12, d=192, heads=3, patch=4, image_edge=64)
    early = measure_latency(cfg, 3, 2, trials=5, warmup=1).median_s
    late = measure_latency(cfg, 12, 2, trials=5, warmup=1).median_s
    assert early < late
