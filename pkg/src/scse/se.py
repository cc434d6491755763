"""Squeeze & excitation recalibration blocks: cSE, sSE and scSE.

All blocks take a feature map U of shape (N, C, H, W) and return a tensor of
the same shape. None of the blocks carry bias terms, so a cSE block with
reduction 2 holds exactly C**2 weights and an sSE block exactly C.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    fully_connected,
    glorot_uniform,
    param_rng,
    relu,
    reshape,
    sigmoid,
    tmean,
)


class SEVariant(str, enum.Enum):
    NONE = "none"
    CSE = "cse"
    SSE = "sse"
    SCSE = "scse"

    @classmethod
    def parse(cls, value) -> "SEVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown SE variant {value!r}; expected one of: {choices}") from None


def reduced_width(channels: int, reduction: int) -> int:
    if reduction < 1 or channels < reduction:
        raise ValueError(f"SE block needs channels >= reduction >= 1, got C={channels}, r={reduction}")
    return channels // reduction


@dataclass
class SEParams:
    """Weights of one SE block.

    ``w2`` squeezes C -> C/r, ``w1`` expands back C/r -> C, ``w_sq`` is the
    (1, C, 1, 1) kernel of the spatial-squeeze convolution. Fields the variant
    does not use are ``None``.
    """

    variant: SEVariant
    channels: int
    reduction: int = 2
    w1: Optional[Tensor] = None
    w2: Optional[Tensor] = None
    w_sq: Optional[Tensor] = None

    def tensors(self) -> dict:
        named = {"w1": self.w1, "w2": self.w2, "w_sq": self.w_sq}
        return {k: v for k, v in named.items() if v is not None}

    def num_weights(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def channel_part(self) -> "SEParams":
        return SEParams(SEVariant.CSE, self.channels, self.reduction, w1=self.w1, w2=self.w2)

    def spatial_part(self) -> "SEParams":
        return SEParams(SEVariant.SSE, self.channels, self.reduction, w_sq=self.w_sq)


def init_se_params(
    variant,
    channels: int,
    reduction: int = 2,
    seed: int = 0,
    zero: bool = False,
    prefix: str = "se",
) -> Optional[SEParams]:
    """Create the weights of one SE block.

    Uniform Glorot initialization from a generator keyed on ``(seed, name)``,
    or all zeros when ``zero`` is set (which makes scSE the identity map).
    Returns ``None`` for the ``none`` variant.
    """
    variant = SEVariant.parse(variant)
    if variant is SEVariant.NONE:
        return None
    p = SEParams(variant, channels, reduction)

    def make(name, shape, fan_in, fan_out):
        full = f"{prefix}.{name}"
        data = np.zeros(shape) if zero else glorot_uniform(shape, fan_in, fan_out, param_rng(seed, full))
        return Tensor(data, requires_grad=True, name=full)

    if variant in (SEVariant.CSE, SEVariant.SCSE):
        mid = reduced_width(channels, reduction)
        p.w2 = make("w2", (mid, channels), channels, mid)
        p.w1 = make("w1", (channels, mid), mid, channels)
    if variant in (SEVariant.SSE, SEVariant.SCSE):
        p.w_sq = make("w_sq", (1, channels, 1, 1), channels, 1)
    return p


def _check_channels(u: Tensor, p: SEParams, expect: SEVariant) -> None:
    if u.ndim != 4:
        raise ShapeError(f"SE block input must be (N, C, H, W), got shape {u.shape}")
    if p.variant is not expect:
        raise ValueError(f"expected {expect.value} parameters, got {p.variant.value}")
    if u.shape[1] != p.channels:
        raise ShapeError(f"SE block built for {p.channels} channels received {u.shape[1]} (input {u.shape})")


def channel_squeeze(u: Tensor) -> Tensor:
    """Global average pool: (N, C, H, W) -> (N, C)."""
    if u.ndim != 4:
        raise ShapeError(f"channel_squeeze input must be (N, C, H, W), got shape {u.shape}")
    return tmean(u, axis=(2, 3))


def channel_gate(u: Tensor, p: SEParams) -> Tensor:
    """sigma(W1 relu(W2 z)) as an (N, C) tensor."""
    z = channel_squeeze(u)
    z_hat = fully_connected(relu(fully_connected(z, p.w2)), p.w1)
    return sigmoid(z_hat)


def cse_forward(u: Tensor, p: SEParams) -> Tensor:
    _check_channels(u, p, SEVariant.CSE)
    n, c = u.shape[:2]
    return u * reshape(channel_gate(u, p), (n, c, 1, 1))


def spatial_gate(u: Tensor, p: SEParams) -> Tensor:
    """sigma(W_sq * U) per sample and pixel, shape (N, 1, H, W)."""
    return sigmoid(conv2d(u, p.w_sq))


def sse_forward(u: Tensor, p: SEParams) -> Tensor:
    _check_channels(u, p, SEVariant.SSE)
    return u * spatial_gate(u, p)


def scse_forward(u: Tensor, p_c: SEParams, p_s: SEParams) -> Tensor:
    return cse_forward(u, p_c) + sse_forward(u, p_s)


def apply_se(u: Tensor, p: Optional[SEParams]) -> Tensor:
    """Dispatch on ``p.variant``; ``None`` parameters mean the identity."""
    if p is None or p.variant is SEVariant.NONE:
        return u
    if p.variant is SEVariant.CSE:
        return cse_forward(u, p)
    if p.variant is SEVariant.SSE:
        return sse_forward(u, p)
    return scse_forward(u, p.channel_part(), p.spatial_part())


def se_param_count(variant, channels: int, reduction: int = 2) -> int:
    variant = SEVariant.parse(variant)
    if variant is SEVariant.NONE:
        reduced_width(channels, reduction)
        return 0
    cse = 2 * channels * reduced_width(channels, reduction)
    if variant is SEVariant.CSE:
        return cse
    if variant is SEVariant.SSE:
        return channels
    return cse + channels


def network_se_overhead(block_channels: Iterable[int], variant, reduction: int = 2) -> int:
    """Total SE weights added over encoder/decoder blocks with the given widths."""
    block_channels = list(block_channels)
    if not block_channels:
        raise ValueError("network_se_overhead needs at least one block")
    return sum(se_param_count(variant, c, reduction) for c in block_channels)
