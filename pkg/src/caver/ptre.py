"""Conversions between 2-D feature maps, pixel tokens and patch tokens.

Pixel tokens follow row-major raster order: pixel ``(i, j)`` of an ``H x W``
map becomes token ``i * W + j``.  Patch tokens group non-overlapping
``p x p`` windows, also in raster order; inside a patch the ``p * p * d``
values run pixel-raster-major, channel-minor.  None of this holds learned
state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PatchError


@dataclass(frozen=True)
class TokenSequence:
    """``N x dim`` tokens that remember the ``h x w`` map they came from."""

    data: np.ndarray
    h: int
    w: int

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimensionError(f"token data must be N x dim, got shape {self.data.shape}")
        if self.h * self.w != self.data.shape[0]:
            raise DimensionError(
                f"geometry {self.h}x{self.w} does not match {self.data.shape[0]} tokens"
            )

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "TokenSequence":
        return TokenSequence(data, self.h, self.w)


@dataclass(frozen=True)
class PatchTokenSequence:
    data: np.ndarray  # (H/p * W/p) x (p * p * d)
    patch_side: int
    origin_h: int
    origin_w: int

    def __post_init__(self):
        p = self.patch_side
        if p < 1 or self.origin_h % p or self.origin_w % p:
            raise PatchError(self.origin_h, self.origin_w, p)
        n_patches = (self.origin_h // p) * (self.origin_w // p)
        if self.data.ndim != 2 or self.data.shape[0] != n_patches or self.data.shape[1] % (p * p):
            raise DimensionError(
                f"patch data shape {self.data.shape} inconsistent with "
                f"{self.origin_h}x{self.origin_w} map and p={p}"
            )

    @property
    def n_patches(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.dim // (self.patch_side**2)


def flatten(fmap: np.ndarray) -> TokenSequence:
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be H x W x C, got shape {fmap.shape}")
    h, w, c = fmap.shape
    return TokenSequence(np.ascontiguousarray(fmap).reshape(h * w, c).copy(), h, w)


def unflatten(seq: TokenSequence) -> np.ndarray:
    return seq.data.reshape(seq.h, seq.w, seq.dim).copy()


def to_patch_tokens(fmap: np.ndarray, p: int) -> PatchTokenSequence:
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be H x W x C, got shape {fmap.shape}")
    h, w, d = fmap.shape
    if p < 1 or h % p or w % p:
        raise PatchError(h, w, p)
    blocks = fmap.reshape(h // p, p, w // p, p, d).transpose(0, 2, 1, 3, 4)
    data = np.ascontiguousarray(blocks).reshape((h // p) * (w // p), p * p * d)
    return PatchTokenSequence(data, p, h, w)


def from_patch_tokens(seq: PatchTokenSequence) -> np.ndarray:
    p, h, w = seq.patch_side, seq.origin_h, seq.origin_w
    d = seq.channels
    blocks = seq.data.reshape(h // p, w // p, p, p, d).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks).reshape(h, w, d)
