"""Analytic FLOP accounting and a wall-clock harness for encoder runs.

FLOPs count a multiply-accumulate as 2. The model is meant for comparing
insertion points against each other, not for predicting absolute runtimes.
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, encode, init_encoder_params, resolve_k, shape_trace
from .errors import LayerCompError
from .grid import check_ratio
from .pml import MergerVariant
from .tensor import Tensor

LATENCY_METHOD = (
    "median wall-clock of encode() on one fixed random image, batch 1, float64 numpy, "
    "single thread of trials, no gradient tape, merger included"
)


@dataclass(frozen=True)
class LayerCost:
    layer: int
    tokens: int
    attn_flops: int
    mlp_flops: int
    merger_flops: int = 0

    @property
    def total(self) -> int:
        return self.attn_flops + self.mlp_flops + self.merger_flops


@dataclass(frozen=True)
class LatencyStats:
    median_s: float
    min_s: float
    max_s: float
    trials: int
    warmup: int
    warning: str | None = None


@dataclass
class CostReport:
    layers: list[LayerCost]
    tokens_out: int
    metadata: dict = field(default_factory=dict)
    latency: LatencyStats | None = None
    error: str | None = None

    @property
    def total_flops(self) -> int:
        return sum(c.total for c in self.layers)

    @property
    def merger_flops(self) -> int:
        return sum(c.merger_flops for c in self.layers)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "tokens_out": self.tokens_out,
            "total_flops": self.total_flops,
            "layers": [dataclasses.asdict(c) for c in self.layers],
            "error": self.error,
            "latency": None if self.latency is None else dataclasses.asdict(self.latency),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CostReport":
        layers = [LayerCost(**c) for c in doc["layers"]]
        latency = None if doc.get("latency") is None else LatencyStats(**doc["latency"])
        report = cls(layers, doc["tokens_out"], doc.get("metadata", {}), latency, doc.get("error"))
        if "total_flops" in doc and doc["total_flops"] != report.total_flops:
            raise ValueError(
                f"total_flops {doc['total_flops']} disagrees with per-layer sum {report.total_flops}"
            )
        return report


def attention_flops(n: int, d: int) -> int:
    """QKV and output projections (``4 N d^2``) plus scores and mixing (``2 N^2 d``)."""
    return 4 * n * d * d + 2 * n * n * d


def mlp_flops(n: int, d: int, mlp_width: int) -> int:
    return 2 * n * d * mlp_width * 2


def merger_flops(n: int, channels: int, r: int, hidden: int, variant: MergerVariant) -> int:
    """Cost of one merge of ``n`` tokens. Pixel shuffle is a permutation and costs 0."""
    if r == 1:
        return 0
    merged = n // (r * r)
    mlp = 2 * merged * (r * r * channels * hidden + hidden * channels)
    averaging = merged * r * r * channels
    if variant is MergerVariant.PML_ONLY:
        return mlp
    if variant in (MergerVariant.RESIDUAL_ONLY, MergerVariant.AVG_POOL):
        return averaging
    return mlp + averaging


def _metadata(cfg, k, r, variant, hidden, **extra) -> dict:
    meta = {
        "config": dataclasses.asdict(cfg),
        "k": k,
        "r": r,
        "variant": variant.value,
        "hidden": hidden,
    }
    meta.update(extra)
    return meta


def estimate_flops(
    cfg: EncoderConfig, k: int, r: int, variant=MergerVariant.PML_WITH_RESIDUAL,
    hidden: int | None = None, **metadata,
) -> CostReport:
    """Per-block FLOPs along :func:`shape_trace`, with the merger billed to block ``max(k, 1)``."""
    r = check_ratio(r)
    variant = MergerVariant.parse(variant)
    hidden = r * r * cfg.d if hidden is None else hidden
    trace = shape_trace(cfg, k, r, variant)
    k_eff = cfg.L if variant is MergerVariant.EXTERNAL else k
    merge_cost = merger_flops(cfg.num_tokens, cfg.d, r, hidden, variant)
    layers = [
        LayerCost(
            layer=i,
            tokens=n,
            attn_flops=attention_flops(n, cfg.d),
            mlp_flops=mlp_flops(n, cfg.d, cfg.mlp_width),
            merger_flops=merge_cost if i == max(k_eff, 1) else 0,
        )
        for i, n in enumerate(trace, start=1)
    ]
    return CostReport(
        layers=layers,
        tokens_out=cfg.num_tokens // (r * r),
        metadata=_metadata(cfg, k, r, variant, hidden, **metadata),
    )


def measure_latency(
    cfg: EncoderConfig, k: int, r: int, variant=MergerVariant.PML_WITH_RESIDUAL,
    trials: int = 5, warmup: int = 1, seed: int = 0,
) -> LatencyStats:
    """Median wall-clock time of one forward ``encode`` after ``warmup`` untimed runs."""
    if trials < 5:
        raise ValueError(f"need at least 5 timed trials, got {trials}")
    if warmup < 1:
        raise ValueError(f"need at least 1 warmup run, got {warmup}")
    params = init_encoder_params(cfg, r, seed=seed)
    image = Tensor(np.random.default_rng(seed).random((cfg.image_edge, cfg.image_edge, 3)))
    for _ in range(warmup):
        encode(image, params, cfg, k, r, variant)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        encode(image, params, cfg, k, r, variant)
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    resolution = time.get_clock_info("perf_counter").resolution
    warning = None
    if resolution > 0.01 * median:
        warning = f"timer resolution {resolution:.3g}s exceeds 1% of the median {median:.3g}s"
    return LatencyStats(median, min(times), max(times), trials, warmup, warning)


def bench(
    cfg: EncoderConfig, k: int, r: int, variant=MergerVariant.PML_WITH_RESIDUAL,
    trials: int = 5, warmup: int = 1, seed: int = 0, **metadata,
) -> CostReport:
    """Analytic report plus measured latency."""
    report = estimate_flops(cfg, k, r, variant, seed=seed, latency_method=LATENCY_METHOD, **metadata)
    report.latency = measure_latency(cfg, k, r, variant, trials, warmup, seed)
    return report


def sweep(
    cfg: EncoderConfig,
    fractions: Sequence[float],
    r: int,
    variants: Sequence = (MergerVariant.PML_WITH_RESIDUAL,),
    measure: bool = False,
    trials: int = 5,
    warmup: int = 1,
    seed: int = 0,
    workers: int = 1,
) -> list[CostReport]:
    """One report per ``(fraction, variant)``, fraction-major.

    A failing point yields a report with ``error`` set instead of aborting the
    sweep. Timed sweeps always run sequentially; ``workers`` only applies to
    analytic ones.
    """
    points = [(f, MergerVariant.parse(v)) for f in fractions for v in variants]

    def run_point(point):
        fraction, variant = point
        try:
            k = resolve_k(cfg.L, fraction)
            if measure:
                return bench(cfg, k, r, variant, trials, warmup, seed, fraction=fraction)
            return estimate_flops(cfg, k, r, variant, seed=seed, fraction=fraction)
        except LayerCompError as exc:
            return CostReport(
                layers=[], tokens_out=0,
                metadata={"config": dataclasses.asdict(cfg), "fraction": fraction, "r": r,
                          "variant": variant.value, "seed": seed},
                error=str(exc),
            )

    if measure or workers <= 1 or len(points) <= 1:
        return [run_point(p) for p in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_point, points))
