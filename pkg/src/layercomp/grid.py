"""Spatial token grids and the non-parametric space/channel transforms.

Index convention for space-to-channel (fixed across the package): output
token ``(i, j)``, channel ``(u*r + v)*C + c`` holds input token
``(r*i + u, r*j + v)``, channel ``c``, for ``u, v`` in ``[0, r)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DivisibilityError
from .tensor import Tensor, reshape, transpose


@dataclass(frozen=True)
class TokenGrid:
    """An ``H x W`` grid of ``C``-dimensional tokens stored as ``Tensor[H, W, C]``."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError(f"TokenGrid needs a rank-3 tensor, got shape {self.values.shape}")

    @classmethod
    def from_array(cls, arr, requires_grad: bool = False) -> "TokenGrid":
        return cls(Tensor(arr, requires_grad=requires_grad))

    @classmethod
    def from_tokens(cls, tokens: Tensor, height: int, width: int) -> "TokenGrid":
        """Unflatten an ``N x C`` token matrix in row-major order."""
        if tokens.ndim != 2 or tokens.shape[0] != height * width:
            raise DimensionError(
                f"cannot lay out tokens of shape {tokens.shape} on a {height}x{width} grid"
            )
        return cls(reshape(tokens, (height, width, tokens.shape[1])))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def tokens(self) -> Tensor:
        """Flatten to ``N x C`` (row-major)."""
        return reshape(self.values, (self.num_tokens, self.channels))

    def numpy(self) -> np.ndarray:
        return self.values.numpy()


def check_ratio(r: int) -> int:
    if isinstance(r, bool) or int(r) != r or r < 1:
        raise ValueError(f"compression ratio must be an integer >= 1, got {r!r}")
    return int(r)


def _check_spatial(g: TokenGrid, r: int) -> None:
    if g.height % r or g.width % r:
        raise DivisibilityError(
            f"grid H={g.height}, W={g.width} is not divisible by ratio r={r}"
        )


def _check_channels(g: TokenGrid, r: int) -> int:
    if g.channels % (r * r):
        raise DivisibilityError(
            f"channel count {g.channels} is not divisible by r^2={r * r} (r={r})"
        )
    return g.channels // (r * r)


def pixel_shuffle(g: TokenGrid, r: int) -> TokenGrid:
    """Fold each ``r x r`` block of tokens into one token with ``r^2 C`` channels."""
    r = check_ratio(r)
    _check_spatial(g, r)
    h, w, c = g.height // r, g.width // r, g.channels
    x = reshape(g.values, (h, r, w, r, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return TokenGrid(reshape(x, (h, w, r * r * c)))


def pixel_unshuffle(g: TokenGrid, r: int) -> TokenGrid:
    """Exact inverse of :func:`pixel_shuffle`."""
    r = check_ratio(r)
    c = _check_channels(g, r)
    h, w = g.height, g.width
    x = reshape(g.values, (h, w, r, r, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return TokenGrid(reshape(x, (h * r, w * r, c)))


def channel_average(g: TokenGrid, r: int) -> TokenGrid:
    """Average the ``r^2`` merged positions of each original channel."""
    r = check_ratio(r)
    c = _check_channels(g, r)
    x = reshape(g.values, (g.height, g.width, r * r, c))
    return TokenGrid(x.mean(axis=2))


def residual_shortcut(g: TokenGrid, r: int) -> TokenGrid:
    """Parameter-free merge path: pixel shuffle followed by channel averaging.

    Under the package's grouping convention this is ``r x r`` average pooling.
    """
    return channel_average(pixel_shuffle(g, r), r)


def avg_pool2d(g: TokenGrid, r: int) -> TokenGrid:
    """Differentiable non-overlapping ``r x r`` average pooling over the grid."""
    r = check_ratio(r)
    _check_spatial(g, r)
    h, w, c = g.height // r, g.width // r, g.channels
    x = reshape(g.values, (h, r, w, r, c))
    return TokenGrid(x.mean(axis=(1, 3)))


def avg_pool_oracle(g: TokenGrid, r: int) -> TokenGrid:
    """Average pooling by explicit window iteration (reference implementation)."""
    r = check_ratio(r)
    _check_spatial(g, r)
    src = g.values.data
    h, w = g.height // r, g.width // r
    out = np.zeros((h, w, g.channels))
    for i in range(h):
        for j in range(w):
            window = src[i * r:(i + 1) * r, j * r:(j + 1) * r, :]
            acc = np.zeros(g.channels)
            for u in range(r):
                for v in range(r):
                    acc += window[u, v]
            out[i, j] = acc / (r * r)
    return TokenGrid(Tensor(out))
