"""Finite-difference gradient checks for the merger and the full encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, encode, init_encoder_params
from .grid import TokenGrid
from .pml import MergerVariant, init_params, pml_forward
from .tensor import Tensor, gradient_check

PML_TOLERANCE = 1e-5
ENCODE_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    coordinates: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "coordinates": self.coordinates,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _perturb(tensors, rng, scale=0.3):
    # random non-zero values everywhere, so zero-initialised layers get exercised
    for t in tensors:
        t.data = t.data + rng.normal(0.0, scale, size=t.shape)


def _probe(out: Tensor, rng) -> Tensor:
    return Tensor(rng.normal(size=out.shape))


def pml_gradcheck(
    height: int = 4, width: int = 4, channels: int = 2, r: int = 2, hidden: int = 8,
    seed: int = 0, coords: int | None = 100, step: float = 1e-5,
) -> CheckResult:
    """Check ``pml_forward`` gradients w.r.t. its params and the input grid."""
    rng = np.random.default_rng(seed)
    params = init_params(channels, r, hidden, seed=seed)
    _perturb(params.tensors(), rng)
    grid = Tensor(rng.normal(size=(height, width, channels)), requires_grad=True)
    out_shape = (height // r, width // r, channels)
    probe = Tensor(rng.normal(size=out_shape))

    def f():
        return (pml_forward(TokenGrid(grid), params, r).values * probe).sum()

    tensors = params.tensors() + [grid]
    total = sum(t.size for t in tensors)
    err = gradient_check(f, tensors, step=step, max_coords=coords, seed=seed)
    return CheckResult("pml_forward", err, min(total, coords or total), PML_TOLERANCE)


def encode_gradcheck(
    cfg: EncoderConfig, k: int, r: int, variant=MergerVariant.PML_WITH_RESIDUAL,
    seed: int = 0, coords: int | None = 100, step: float = 1e-5,
) -> CheckResult:
    """Check full-encoder gradients on randomly sampled parameter coordinates."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, r, seed=seed)
    # w1 stays at its Glorot init: inflating it saturates GELU on the deep
    # residual stream and leaves gradients at the 1e-8 noise floor
    pml = params.pml
    _perturb([pml.b1, pml.w2, pml.b2], rng)
    for b in params.blocks:
        _perturb([b.ln1_g, b.ln1_b, b.bq, b.bv, b.bo, b.ln2_g, b.ln2_b, b.b_fc1, b.b_fc2], rng, 0.1)
    _perturb([params.patch_b], rng, 0.1)
    image = Tensor(rng.random((cfg.image_edge, cfg.image_edge, 3)))
    probe = Tensor(rng.normal(size=(cfg.grid_edge // r, cfg.grid_edge // r, cfg.d)))

    def f():
        return (encode(image, params, cfg, k, r, variant).values * probe).sum()

    tensors = params.tensors()
    total = sum(t.size for t in tensors)
    err = gradient_check(f, tensors, step=step, max_coords=coords, seed=seed)
    return CheckResult("encode", err, min(total, coords or total), ENCODE_TOLERANCE)
