"""Pre-norm residual blocks: self-attention, cross-attention and Conv-FFN."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .attention import AttentionParams, view_mixed_attention
from .errors import DimensionError
from .instrument import scope
from .ptre import TokenSequence, flatten, unflatten
from .tensor import batch_norm_infer, conv2d, relu

BN_EPS = 1e-5


@dataclass
class BatchNorm:
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = field(default=BN_EPS, metadata={"static": True})

    @classmethod
    def identity(cls, channels: int) -> "BatchNorm":
        return cls(np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return batch_norm_infer(x, self.mean, self.var, self.gamma, self.beta, self.eps)


@dataclass
class Conv:
    weight: np.ndarray  # Cout x Cin x k x k
    bias: np.ndarray

    @classmethod
    def zeros(cls, cout: int, cin: int, k: int) -> "Conv":
        return cls(np.zeros((cout, cin, k, k)), np.zeros(cout))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return conv2d(x, self.weight, self.bias)


@dataclass
class ConvFfnParams:
    """3x3 conv -> BN -> ReLU -> 1x1 conv."""

    conv3: Conv
    bn: BatchNorm
    conv1: Conv

    def __post_init__(self):
        hidden = self.conv3.out_channels
        if self.conv3.weight.shape[2:] != (3, 3) or self.conv1.weight.shape[2:] != (1, 1):
            raise DimensionError("Conv-FFN needs a 3x3 then a 1x1 kernel")
        if self.bn.channels != hidden or self.conv1.in_channels != hidden:
            raise DimensionError(f"Conv-FFN hidden width {hidden} is not used consistently")

    @classmethod
    def zeros(cls, d_in: int, d_out: int, hidden: int) -> "ConvFfnParams":
        return cls(Conv.zeros(hidden, d_in, 3), BatchNorm.identity(hidden), Conv.zeros(d_out, hidden, 1))


@dataclass
class SelfAttentionBlockParams:
    norm1: BatchNorm
    attn: AttentionParams
    norm2: BatchNorm
    ffn: ConvFfnParams

    def __post_init__(self):
        d = self.attn.dim
        if (self.norm1.channels, self.norm2.channels, self.ffn.conv3.in_channels, self.ffn.conv1.out_channels) != (d,) * 4:
            raise DimensionError(f"self-attention block parts disagree on D={d}")

    @classmethod
    def zeros(cls, dim: int, n_heads: int, patch_side: int, hidden: int | None = None) -> "SelfAttentionBlockParams":
        return cls(
            BatchNorm.identity(dim),
            AttentionParams.zeros(dim, n_heads, patch_side),
            BatchNorm.identity(dim),
            ConvFfnParams.zeros(dim, dim, hidden or dim),
        )


@dataclass
class CrossAttentionBlockParams:
    norm_rgb: BatchNorm
    norm_dt: BatchNorm
    attn_rgb_query: AttentionParams
    attn_dt_query: AttentionParams
    norm_fused: BatchNorm
    ffn: ConvFfnParams

    def __post_init__(self):
        d = self.attn_rgb_query.dim
        if self.attn_dt_query.dim != d or self.norm_rgb.channels != d or self.norm_dt.channels != d:
            raise DimensionError(f"cross-attention streams disagree on D={d}")
        if self.norm_fused.channels != 2 * d or self.ffn.conv3.in_channels != 2 * d:
            raise DimensionError(f"fused path must consume 2D={2 * d} channels")
        if self.ffn.conv1.out_channels != d:
            raise DimensionError(f"fused Conv-FFN must emit D={d} channels")

    @classmethod
    def zeros(cls, dim: int, n_heads: int, patch_side: int, hidden: int | None = None) -> "CrossAttentionBlockParams":
        return cls(
            BatchNorm.identity(dim),
            BatchNorm.identity(dim),
            AttentionParams.zeros(dim, n_heads, patch_side),
            AttentionParams.zeros(dim, n_heads, patch_side),
            BatchNorm.identity(2 * dim),
            ConvFfnParams.zeros(2 * dim, dim, hidden or dim),
        )


def conv_ffn(x: np.ndarray, params: ConvFfnParams) -> np.ndarray:
    with scope("ffn"):
        hidden = relu(params.bn(params.conv3(x)))
        out = params.conv1(hidden)
        instrument.trace_shapes((x.shape,), out.shape)
    return out


def norm_tokens(x: TokenSequence, bn: BatchNorm) -> TokenSequence:
    """Batch norm applied to the 2-D form of a token sequence."""
    return flatten(bn(unflatten(x)))


def self_attention_block(x: TokenSequence, params: SelfAttentionBlockParams) -> TokenSequence:
    normed = norm_tokens(x, params.norm1)
    with scope("attn"):
        attended = view_mixed_attention(normed, normed, params.attn)
    x1 = x.with_data(x.data + attended.data)
    local = conv_ffn(unflatten(norm_tokens(x1, params.norm2)), params.ffn)
    out = x1.with_data(x1.data + flatten(local).data)
    instrument.trace_shapes((x.data.shape,), out.data.shape)
    return out


def cross_attention_block(
    f_rgb: TokenSequence, f_dt: TokenSequence, params: CrossAttentionBlockParams
) -> TokenSequence:
    """Two-stream cross-attention followed by a fused Conv-FFN.

    Output is ``Z_rgb + Z_dt + ConvFFN(Norm([Z_rgb, Z_dt]))``.
    """
    if f_rgb.data.shape != f_dt.data.shape or (f_rgb.h, f_rgb.w) != (f_dt.h, f_dt.w):
        raise DimensionError(
            f"stream shapes differ: rgb {f_rgb.h}x{f_rgb.w}x{f_rgb.dim}, dt {f_dt.h}x{f_dt.w}x{f_dt.dim}"
        )
    n_rgb = norm_tokens(f_rgb, params.norm_rgb)
    n_dt = norm_tokens(f_dt, params.norm_dt)
    with scope("attn_rgb"):
        z_rgb = view_mixed_attention(n_rgb, n_dt, params.attn_rgb_query)
    with scope("attn_dt"):
        z_dt = view_mixed_attention(n_dt, n_rgb, params.attn_dt_query)
    fused_in = f_rgb.with_data(np.concatenate([z_rgb.data, z_dt.data], axis=1))
    fused = conv_ffn(unflatten(norm_tokens(fused_in, params.norm_fused)), params.ffn)
    out = f_rgb.with_data(z_rgb.data + z_dt.data + flatten(fused).data)
    instrument.trace_shapes((f_rgb.data.shape, f_dt.data.shape), out.data.shape)
    return out
