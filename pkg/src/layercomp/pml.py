"""Patch merge layer: pixel shuffle + two-layer MLP, with an optional pooling residual."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .grid import TokenGrid, avg_pool2d, check_ratio, pixel_shuffle, residual_shortcut
from .tensor import Tensor, gelu

PARAMS_FORMAT = "layercomp-pml-params"
PARAMS_VERSION = 1


class MergerVariant(str, enum.Enum):
    PML_WITH_RESIDUAL = "pml_residual"
    PML_ONLY = "pml_only"
    RESIDUAL_ONLY = "residual_only"
    AVG_POOL = "avg_pool"
    EXTERNAL = "external"

    @classmethod
    def parse(cls, value) -> "MergerVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown merger variant {value!r} (expected one of {names})") from None

    @property
    def uses_params(self) -> bool:
        return self in (MergerVariant.PML_WITH_RESIDUAL, MergerVariant.PML_ONLY, MergerVariant.EXTERNAL)


@dataclass
class PMLParams:
    w1: Tensor  # (r^2 C, Hm)
    b1: Tensor  # (Hm,)
    w2: Tensor  # (Hm, C)
    b2: Tensor  # (C,)

    @property
    def in_width(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_width(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def check(self, r: int, channels: int) -> None:
        expected_in = r * r * channels
        hm = self.hidden
        ok = (
            self.w1.shape == (expected_in, hm)
            and self.b1.shape == (hm,)
            and self.w2.shape == (hm, channels)
            and self.b2.shape == (channels,)
        )
        if not ok:
            raise ConfigurationError(
                f"merger params w1{self.w1.shape} b1{self.b1.shape} w2{self.w2.shape} "
                f"b2{self.b2.shape} do not fit r={r}, C={channels} (need w1 of shape "
                f"({expected_in}, Hm) and w2 of shape (Hm, {channels}))"
            )


def init_params(channels: int, r: int, hidden: int | None = None, seed: int = 0) -> PMLParams:
    """Glorot-uniform first layer, zeroed second layer.

    With the second layer at zero the combined merger starts out as exact
    average pooling. ``hidden`` defaults to ``r^2 * channels``.
    """
    r = check_ratio(r)
    fan_in = r * r * channels
    hidden = fan_in if hidden is None else hidden
    if hidden < 1:
        raise ConfigurationError(f"hidden width must be >= 1, got {hidden}")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (fan_in + hidden))
    return PMLParams(
        w1=Tensor(rng.uniform(-bound, bound, size=(fan_in, hidden)), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(np.zeros((hidden, channels)), requires_grad=True),
        b2=Tensor(np.zeros(channels), requires_grad=True),
    )


def pml_forward(g: TokenGrid, params: PMLParams, r: int) -> TokenGrid:
    r = check_ratio(r)
    params.check(r, g.channels)
    merged = pixel_shuffle(g, r)
    x = merged.tokens()
    x = gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2
    return TokenGrid.from_tokens(x, merged.height, merged.width)


def merge_forward(g: TokenGrid, params: PMLParams | None, r: int, variant) -> TokenGrid:
    """Apply one merge step of the selected ``variant``.

    ``EXTERNAL`` is the identity here: the encoder runs the combined merger
    after its last block instead.
    """
    variant = MergerVariant.parse(variant)
    if variant is MergerVariant.EXTERNAL:
        return g
    if variant is MergerVariant.RESIDUAL_ONLY:
        return residual_shortcut(g, r)
    if variant is MergerVariant.AVG_POOL:
        return avg_pool2d(g, r)
    if params is None:
        raise ConfigurationError(f"variant {variant.value} needs merger params")
    out = pml_forward(g, params, r)
    if variant is MergerVariant.PML_WITH_RESIDUAL:
        out = TokenGrid(out.values + residual_shortcut(g, r).values)
    return out


def save_params(params: PMLParams, path) -> None:
    """Write shapes and row-major values as JSON (floats round-trip exactly)."""
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "tensors": [
            {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in zip(("w1", "b1", "w2", "b2"), params.tensors())
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_params(path) -> PMLParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT or doc.get("version") != PARAMS_VERSION:
        raise ConfigurationError(
            f"{path}: not a {PARAMS_FORMAT} v{PARAMS_VERSION} file "
            f"(got {doc.get('format')!r} v{doc.get('version')!r})"
        )
    tensors = {}
    for entry in doc["tensors"]:
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(arr, requires_grad=True)
    return PMLParams(**tensors)
