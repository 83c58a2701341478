"""A small pre-norm ViT encoder with a token merger after block ``k``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, DivisibilityError
from .grid import TokenGrid, check_ratio, pixel_shuffle
from .pml import MergerVariant, PMLParams, init_params, merge_forward
from .tensor import Tensor, layer_norm, gelu, softmax_last_axis, transpose


@dataclass(frozen=True)
class EncoderConfig:
    L: int = 12
    d: int = 64
    heads: int = 2
    mlp_width: int | None = None  # defaults to 4 * d
    patch: int = 4
    image_edge: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.mlp_width is None:
            object.__setattr__(self, "mlp_width", 4 * self.d)
        for name in ("L", "d", "heads", "mlp_width", "patch", "image_edge"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.d % self.heads:
            raise ConfigurationError(f"heads={self.heads} does not divide model width d={self.d}")
        if self.image_edge % self.patch:
            raise ConfigurationError(
                f"image_edge={self.image_edge} is not a multiple of patch={self.patch}"
            )

    @property
    def grid_edge(self) -> int:
        return self.image_edge // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid_edge ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor  # no key bias: it shifts every score in a row equally, so softmax ignores it
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    def tensors(self) -> list[Tensor]:
        return list(vars(self).values())


@dataclass
class EncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[BlockParams]
    pml: PMLParams

    def encoder_tensors(self) -> list[Tensor]:
        """Everything except the merger."""
        out = [self.patch_w, self.patch_b, self.pos]
        for b in self.blocks:
            out.extend(b.tensors())
        return out

    def tensors(self) -> list[Tensor]:
        return self.encoder_tensors() + self.pml.tensors()


def init_encoder_params(
    cfg: EncoderConfig, r: int, seed: int = 0, hidden: int | None = None
) -> EncoderParams:
    """Fan-in scaled normal weights, zero biases, unit layer-norm gains.

    The merger is initialised with :func:`init_params` (zeroed second layer).
    """
    r = check_ratio(r)
    rng = np.random.default_rng(seed)

    def weight(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    d, m = cfg.d, cfg.mlp_width
    patch_w = weight(cfg.patch_dim, d)
    patch_b = zeros(d)
    pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)), requires_grad=True)
    blocks = [
        BlockParams(
            ln1_g=ones(d), ln1_b=zeros(d),
            wq=weight(d, d), bq=zeros(d), wk=weight(d, d), wv=weight(d, d), bv=zeros(d),
            wo=weight(d, d), bo=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            w_fc1=weight(d, m), b_fc1=zeros(m), w_fc2=weight(m, d), b_fc2=zeros(d),
        )
        for _ in range(cfg.L)
    ]
    pml_seed = int(rng.integers(2**31))
    return EncoderParams(patch_w, patch_b, pos, blocks, init_params(d, r, hidden, seed=pml_seed))


def patch_embed(image: Tensor, patch_w: Tensor, patch_b: Tensor, patch: int) -> TokenGrid:
    """Project non-overlapping ``patch x patch x 3`` patches to width ``d``.

    Pixels of a patch are flattened row-major (row, column, colour), which is
    exactly a pixel shuffle of the image with ratio ``patch``.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ConfigurationError(f"expected a square RGB image (E, E, 3), got {image.shape}")
    if image.shape[0] % patch:
        raise ConfigurationError(f"image edge {image.shape[0]} is not a multiple of patch={patch}")
    if patch_w.shape[0] != patch * patch * 3:
        raise ConfigurationError(
            f"patch projection expects {patch_w.shape[0]} inputs, patch={patch} gives {patch * patch * 3}"
        )
    patches = pixel_shuffle(TokenGrid(image), patch)
    x = patches.tokens() @ patch_w + patch_b
    return TokenGrid.from_tokens(x, patches.height, patches.width)


def _attention(h: Tensor, bp: BlockParams, heads: int) -> Tensor:
    n, d = h.shape
    dh = d // heads
    q = (h @ bp.wq + bp.bq).reshape(n, heads, dh).transpose((1, 0, 2))
    k = (h @ bp.wk).reshape(n, heads, dh).transpose((1, 0, 2))
    v = (h @ bp.wv + bp.bv).reshape(n, heads, dh).transpose((1, 0, 2))
    scores = (q @ transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    ctx = softmax_last_axis(scores) @ v
    ctx = ctx.transpose((1, 0, 2)).reshape(n, d)
    return ctx @ bp.wo + bp.bo


def _block_tokens(x: Tensor, bp: BlockParams, heads: int, eps: float) -> Tensor:
    x = x + _attention(layer_norm(x, bp.ln1_g, bp.ln1_b, eps), bp, heads)
    h = layer_norm(x, bp.ln2_g, bp.ln2_b, eps)
    return x + gelu(h @ bp.w_fc1 + bp.b_fc1) @ bp.w_fc2 + bp.b_fc2


def encoder_block(g: TokenGrid, bp: BlockParams, heads: int, eps: float = 1e-5) -> TokenGrid:
    """``x + MHSA(LN(x))`` followed by ``x + MLP(LN(x))``; grid shape is preserved."""
    if g.channels != bp.wq.shape[0]:
        raise DimensionError(f"token width {g.channels} does not match block width {bp.wq.shape[0]}")
    out = _block_tokens(g.tokens(), bp, heads, eps)
    return TokenGrid.from_tokens(out, g.height, g.width)


def resolve_k(L: int, fraction: float) -> int:
    """Insertion block for a depth fraction: ``round(L * fraction)`` (half up), at least 1."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"depth fraction must lie in (0, 1], got {fraction}")
    return max(1, math.floor(L * fraction + 0.5))


def _check_insertion(cfg: EncoderConfig, k: int, r: int) -> None:
    if not isinstance(k, int) or isinstance(k, bool) or not 0 <= k <= cfg.L:
        raise ConfigurationError(f"insertion point k={k!r} must be an integer in [0, L={cfg.L}]")
    if cfg.grid_edge % r:
        raise DivisibilityError(
            f"grid H=W={cfg.grid_edge} is not divisible by ratio r={r} at insertion point k={k}"
        )


def shape_trace(cfg: EncoderConfig, k: int, r: int, variant=MergerVariant.PML_WITH_RESIDUAL) -> list[int]:
    """Token count seen by each of the ``L`` blocks."""
    r = check_ratio(r)
    _check_insertion(cfg, k, r)
    if MergerVariant.parse(variant) is MergerVariant.EXTERNAL:
        k = cfg.L
    n = cfg.num_tokens
    return [n if layer <= k else n // (r * r) for layer in range(1, cfg.L + 1)]


def encode(
    image: Tensor,
    params: EncoderParams,
    cfg: EncoderConfig,
    k: int,
    r: int,
    variant=MergerVariant.PML_WITH_RESIDUAL,
    trace: list[int] | None = None,
) -> TokenGrid:
    """Run blocks ``1..k``, merge once, then run blocks ``k+1..L`` on the smaller grid.

    ``EXTERNAL`` ignores ``k`` and applies the combined merger after block ``L``.
    If ``trace`` is given, the token count entering each block is appended to it.
    """
    r = check_ratio(r)
    variant = MergerVariant.parse(variant)
    _check_insertion(cfg, k, r)
    if variant is MergerVariant.EXTERNAL:
        k, variant = cfg.L, MergerVariant.PML_WITH_RESIDUAL

    g = patch_embed(image, params.patch_w, params.patch_b, cfg.patch)
    g = TokenGrid(g.values + params.pos.reshape(g.height, g.width, cfg.d))
    for layer, bp in enumerate(params.blocks, start=1):
        if layer == k + 1:
            g = merge_forward(g, params.pml, r, variant)
        if trace is not None:
            trace.append(g.num_tokens)
        g = encoder_block(g, bp, cfg.heads, cfg.ln_eps)
    if k == cfg.L:
        g = merge_forward(g, params.pml, r, variant)
    return g
