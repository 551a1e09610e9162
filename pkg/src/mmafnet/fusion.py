"""Attention-based fusion of paired RGB and depth feature maps.

The block concatenates the two modality maps, reweights channels with a
shared-MLP channel attention gate, reweights positions with a convolutional
spatial attention gate, and finally collapses modality-aligned channel pairs
with an elementwise maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor, concat_channels, maximum, add, mul_channel_gate, mul_spatial_gate, slice_channels
from .errors import ConfigError, ContractError
from .layers import Conv2d, Linear, Module

PAIRINGS = ("aligned", "adjacent")


class AfbParams(Module):
    """Parameters of one attention fusion block at modality width ``channels``.

    The MLP (``mlp_w0`` then relu then ``mlp_w1``) is shared between the
    average-pooled and max-pooled channel statistics. ``reduction`` shrinks
    the MLP hidden width; ``spatial_kernel`` is the (odd) kernel of the
    spatial gate convolution.
    """

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7,
                 mlp_bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if channels < 1 or reduction < 1 or spatial_kernel < 1:
            raise ConfigError("AfbParams: channels, reduction, spatial_kernel must be positive")
        if spatial_kernel % 2 == 0:
            raise ConfigError(f"AfbParams: spatial kernel must be odd, got {spatial_kernel}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = int(channels)
        self.reduction = int(reduction)
        self.spatial_kernel = int(spatial_kernel)
        full = 2 * self.channels
        hidden = max(1, math.ceil(full / self.reduction))
        self.hidden = hidden
        self.mlp_w0 = Linear(full, hidden, bias=mlp_bias, rng=rng, dtype=dtype)
        self.mlp_w1 = Linear(hidden, full, bias=mlp_bias, rng=rng, dtype=dtype)
        self.spatial_conv = Conv2d(2, 1, spatial_kernel, stride=1,
                                   padding=(spatial_kernel - 1) // 2, bias=True,
                                   rng=rng, dtype=dtype)

    def zero_(self) -> "AfbParams":
        """Set every weight and bias to zero (degenerate sigma(0) state)."""
        for p in self.parameters():
            p.data[...] = 0.0
        return self

    def forward(self, f_rgb: Tensor, f_d: Tensor, pairing: str = "aligned") -> "FusedFeatures":
        return afb(f_rgb, f_d, self, pairing=pairing)


@dataclass
class FusedFeatures:
    """All intermediates of one fusion pass, kept for inspection and tests."""

    f_concat: Tensor        # (n, 2c, h, w)
    m_c: Tensor             # (n, 2c, 1, 1) channel gate
    f_prime: Tensor         # (n, 2c, h, w)
    m_s: Tensor             # (n, 1, h, w) spatial gate
    f_double_prime: Tensor  # (n, 2c, h, w)
    f_fused: Tensor         # (n, c, h, w)


def concat_modalities(f_rgb: Tensor, f_d: Tensor) -> Tensor:
    """Stack the RGB map over the depth map along the channel axis."""
    if f_rgb.shape != f_d.shape:
        raise ContractError(f"concat_modalities: shape mismatch {f_rgb.shape} vs {f_d.shape}")
    return concat_channels(f_rgb, f_d)


def _mlp(params: AfbParams, stat: Tensor) -> Tensor:
    return params.mlp_w1(ops.relu(params.mlp_w0(stat)))


def channel_attention(f: Tensor, params: AfbParams) -> Tensor:
    """Sigmoid of the shared MLP applied to global average and max statistics."""
    if f.shape[1] != 2 * params.channels:
        raise ContractError(
            f"channel_attention: expected {2 * params.channels} channels, got {f.shape[1]}")
    avg_path = _mlp(params, ops.global_pool(f, "avg"))
    max_path = _mlp(params, ops.global_pool(f, "max"))
    return ops.sigmoid(add(avg_path, max_path))


def spatial_attention(f_prime: Tensor, params: AfbParams) -> Tensor:
    """Sigmoid of a conv over the per-position channel average and maximum."""
    stacked = concat_channels(ops.channel_pool(f_prime, "avg"),
                              ops.channel_pool(f_prime, "max"))
    return ops.sigmoid(params.spatial_conv(stacked))


def modality_max_fuse(f_double_prime: Tensor, pairing: str = "aligned") -> Tensor:
    """Collapse 2c channels to c by elementwise maximum over channel pairs.

    ``aligned`` pairs channel k with k+c (RGB channel with its depth
    counterpart); ``adjacent`` pairs 2k with 2k+1 (kept for ablation).
    """
    if pairing not in PAIRINGS:
        raise ContractError(f"modality_max_fuse: pairing must be one of {PAIRINGS}")
    two_c = f_double_prime.shape[1]
    if two_c % 2 != 0:
        raise ContractError(f"modality_max_fuse: channel count {two_c} must be even")
    c = two_c // 2
    if pairing == "aligned":
        first = slice_channels(f_double_prime, 0, c)
        second = slice_channels(f_double_prime, c, two_c)
        return maximum(first, second)
    halves = [slice_channels(f_double_prime, 2 * k, 2 * k + 2) for k in range(c)]
    fused = [maximum(slice_channels(h, 0, 1), slice_channels(h, 1, 2)) for h in halves]
    out = fused[0]
    for nxt in fused[1:]:
        out = concat_channels(out, nxt)
    return out


def afb(f_rgb: Tensor, f_d: Tensor, params: AfbParams, pairing: str = "aligned") -> FusedFeatures:
    """Full fusion pass; returns every intermediate alongside the fused map."""
    f = concat_modalities(f_rgb, f_d)
    m_c = channel_attention(f, params)
    f_prime = mul_channel_gate(m_c, f)
    m_s = spatial_attention(f_prime, params)
    f_double_prime = mul_spatial_gate(m_s, f_prime)
    f_fused = modality_max_fuse(f_double_prime, pairing=pairing)
    return FusedFeatures(f_concat=f, m_c=m_c, f_prime=f_prime, m_s=m_s,
                         f_double_prime=f_double_prime, f_fused=f_fused)


def afb_param_count(c: int, r: int = 16, k: int = 7) -> int:
    """Closed-form parameter count of one block at modality width ``c``.

    Shared MLP (both linears with biases) plus the spatial conv with bias.
    """
    if c < 1 or r < 1 or k < 1:
        raise ContractError("afb_param_count: c, r, k must be positive")
    if k % 2 == 0:
        raise ContractError(f"afb_param_count: k must be odd, got {k}")
    full = 2 * c
    hidden = max(1, math.ceil(full / r))
    return full * hidden + hidden + hidden * full + full + 2 * k * k + 1
