"""Top-down decoder: four cascaded cross-modal integration units (CMIUs)
and the saliency predictor.

Level 1 is the finest pyramid level (a quarter of the input resolution);
level 4 is the coarsest.  Decoding runs CMIU4 -> CMIU1 and each unit after
the first receives the previous unit's output, upsampled by two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .blocks import (
    BatchNorm,
    Conv,
    CrossAttentionBlockParams,
    SelfAttentionBlockParams,
    cross_attention_block,
    self_attention_block,
)
from .errors import ConfigError, DimensionError, PatchError
from .instrument import scope
from .ptre import flatten, unflatten
from .tensor import bilinear_upsample, relu, sigmoid

RESNET_CHANNELS = (256, 512, 1024, 2048)


@dataclass(frozen=True)
class LevelSpec:
    h: int
    w: int
    channels: int

    def __str__(self) -> str:
        return f"{self.h}x{self.w}x{self.channels}"

    @classmethod
    def parse(cls, text: str) -> "LevelSpec":
        try:
            h, w, c = (int(t) for t in text.lower().split("x"))
        except ValueError:
            raise ConfigError(f"level spec must look like HxWxC, got {text!r}") from None
        return cls(h, w, c)


def pyramid(input_h: int, input_w: int | None = None, channels=RESNET_CHANNELS) -> tuple[LevelSpec, ...]:
    """Level geometry for an input image: 1/4, 1/8, 1/16, 1/32 resolution."""
    input_w = input_h if input_w is None else input_w
    return tuple(
        LevelSpec(input_h // (4 * 2**i), input_w // (4 * 2**i), c) for i, c in enumerate(channels)
    )


@dataclass(frozen=True)
class TippConfig:
    dim: int = 64
    heads: int = 2
    levels: tuple[LevelSpec, ...] = field(default_factory=lambda: pyramid(256))
    patch: tuple[int, ...] = (8, 8, 8, 8)
    ffn_hidden: int | None = None
    predictor_hidden: int = 32

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or self.dim

    @property
    def input_size(self) -> tuple[int, int]:
        return 4 * self.levels[0].h, 4 * self.levels[0].w

    def validate(self) -> "TippConfig":
        if len(self.levels) != 4 or len(self.patch) != 4:
            raise ConfigError("the decoder needs exactly four levels and four patch sizes")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"D={self.dim} must be a positive multiple of N_h={self.heads}")
        if self.hidden < 1 or self.predictor_hidden < 1:
            raise ConfigError("hidden widths must be positive")
        for i, (lv, p) in enumerate(zip(self.levels, self.patch), start=1):
            if min(lv.h, lv.w, lv.channels) < 1:
                raise ConfigError(f"level {i}: extents must be positive, got {lv}")
            if i > 1:
                prev = self.levels[i - 2]
                if (prev.h, prev.w) != (2 * lv.h, 2 * lv.w):
                    raise ConfigError(
                        f"level {i}: {lv.h}x{lv.w} is not half of level {i - 1} ({prev.h}x{prev.w})"
                    )
            if p < 1 or lv.h % p or lv.w % p:
                raise PatchError(lv.h, lv.w, p, level=i)
        return self

    def with_patch(self, patch) -> "TippConfig":
        return TippConfig(self.dim, self.heads, self.levels, tuple(patch), self.ffn_hidden, self.predictor_hidden)


@dataclass
class CmiuParams:
    embed_rgb: Conv = field(metadata={"key": "embed.rgb"})
    embed_dt: Conv = field(metadata={"key": "embed.dt"})
    imsa_rgb: SelfAttentionBlockParams
    imsa_dt: SelfAttentionBlockParams
    imca: CrossAttentionBlockParams
    cssa: SelfAttentionBlockParams

    def attentions(self):
        return (
            self.imsa_rgb.attn, self.imsa_dt.attn,
            self.imca.attn_rgb_query, self.imca.attn_dt_query,
            self.cssa.attn,
        )


@dataclass
class PredictorParams:
    conv3: Conv
    bn: BatchNorm
    conv1: Conv


@dataclass
class TippWeights:
    cmius: list[CmiuParams]  # index 0 is level 1
    predictor: PredictorParams


def zero_weights(config: TippConfig) -> TippWeights:
    """All-zero kernels and biases, identity batch norms, alpha = beta = 0.5."""
    config.validate()
    d, nh, hid = config.dim, config.heads, config.hidden
    cmius = []
    for lv, p in zip(config.levels, config.patch):
        imca = CrossAttentionBlockParams.zeros(d, nh, p, hid)
        blocks = [SelfAttentionBlockParams.zeros(d, nh, p, hid) for _ in range(3)]
        cmius.append(CmiuParams(
            Conv.zeros(d, lv.channels, 1), Conv.zeros(d, lv.channels, 1),
            blocks[0], blocks[1], imca, blocks[2],
        ))
    ph = config.predictor_hidden
    predictor = PredictorParams(Conv.zeros(ph, d, 3), BatchNorm.identity(ph), Conv.zeros(1, ph, 1))
    return TippWeights(cmius, predictor)


def _check_pair(level: int, f_rgb: np.ndarray, f_dt: np.ndarray, spec: LevelSpec | None = None) -> None:
    for name, f in (("rgb", f_rgb), ("d/t", f_dt)):
        if f.ndim != 3:
            raise DimensionError(f"level {level}: {name} feature must be H x W x C, got {f.shape}")
        if spec is not None and f.shape != (spec.h, spec.w, spec.channels):
            raise DimensionError(
                f"level {level}: {name} feature has shape {f.shape}, config expects {spec.h}x{spec.w}x{spec.channels}"
            )
    if f_rgb.shape[:2] != f_dt.shape[:2]:
        raise DimensionError(f"level {level}: rgb {f_rgb.shape[:2]} and d/t {f_dt.shape[:2]} extents differ")


def cmiu_forward(
    f_rgb: np.ndarray,
    f_dt: np.ndarray,
    f_prev: np.ndarray | None,
    params: CmiuParams,
    level: int = 0,
) -> np.ndarray:
    """One integration unit; returns the ``H x W x D`` fused map."""
    _check_pair(level, f_rgb, f_dt)
    h, w = f_rgb.shape[:2]
    d = params.cssa.attn.dim
    if f_prev is not None and (h % 2 or w % 2 or f_prev.shape != (h // 2, w // 2, d)):
        raise DimensionError(
            f"level {level}: previous output {f_prev.shape} is not half of {h}x{w} with D={d}"
        )
    with scope("embed"):
        e_rgb = flatten(params.embed_rgb(f_rgb))
        e_dt = flatten(params.embed_dt(f_dt))
        instrument.trace_shapes((f_rgb.shape, f_dt.shape), e_rgb.data.shape)
    with scope("imsa_rgb"):
        s_rgb = self_attention_block(e_rgb, params.imsa_rgb)
    with scope("imsa_dt"):
        s_dt = self_attention_block(e_dt, params.imsa_dt)
    with scope("imca"):
        fused = cross_attention_block(s_rgb, s_dt, params.imca)
    if f_prev is not None:
        fused = fused.with_data(fused.data + flatten(bilinear_upsample(f_prev, 2)).data)
    with scope("cssa"):
        out = unflatten(self_attention_block(fused, params.cssa))
    instrument.trace_shapes((f_rgb.shape, f_dt.shape) + ((f_prev.shape,) if f_prev is not None else ()), out.shape)
    return out


def predict(feature: np.ndarray, params: PredictorParams) -> np.ndarray:
    """Upsample x4 -> 3x3 conv -> BN -> ReLU -> 1x1 conv -> sigmoid."""
    up = bilinear_upsample(feature, 4)
    logits = params.conv1(relu(params.bn(params.conv3(up))))
    out = sigmoid(logits)
    instrument.trace_shapes((feature.shape,), out.shape)
    return out


def tipp_forward(features, config: TippConfig, weights: TippWeights) -> np.ndarray:
    """Decode four (rgb, d/t) feature pairs into an ``H_in x W_in x 1`` saliency map.

    ``features[0]`` is level 1 (finest).
    """
    config.validate()
    if len(features) != 4 or len(weights.cmius) != 4:
        raise ConfigError("need four feature pairs and four CMIU parameter sets")
    for i, ((f_rgb, f_dt), spec) in enumerate(zip(features, config.levels), start=1):
        _check_pair(i, f_rgb, f_dt, spec)
        cmiu = weights.cmius[i - 1]
        sides = {a.patch_side for a in cmiu.attentions()}
        if sides != {config.patch[i - 1]}:
            raise ConfigError(f"level {i}: weights use patch sides {sorted(sides)}, config says {config.patch[i - 1]}")
        if cmiu.embed_rgb.in_channels != spec.channels or cmiu.cssa.attn.dim != config.dim:
            raise DimensionError(f"level {i}: weights do not match config {spec} with D={config.dim}")
    f_prev = None
    for i in range(4, 0, -1):
        f_rgb, f_dt = features[i - 1]
        with scope(f"cmiu{i}"):
            f_prev = cmiu_forward(f_rgb, f_dt, f_prev, weights.cmius[i - 1], level=i)
    with scope("predictor"):
        return predict(f_prev, weights.predictor)
