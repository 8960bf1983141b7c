"""Patch-wise view-mixed multi-head attention.

Each head projects its query source and key/value source to ``D / N_h``
channels.  The spatial view attends between patch tokens (tokens folded by
:func:`caver.ptre.to_patch_tokens`); the channel view attends between the
head's channels over all pixel tokens.  Heads are concatenated, projected
by ``w_s`` / ``w_c`` and mixed as ``alpha * Z_s + beta * Z_c``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .errors import DimensionError
from .instrument import scope
from .ptre import PatchTokenSequence, TokenSequence, from_patch_tokens, to_patch_tokens
from .tensor import matmul, softmax_rows, transpose2d

STATIC = {"static": True}

_flipped_spatial_scale: ContextVar[bool] = ContextVar("caver_fault_spatial_scale", default=False)


@contextmanager
def inject_spatial_scale_fault():
    """Test hook: multiply spatial logits by the scale instead of dividing.

    Exists so the verification suite can prove that its oracle checks are
    able to fail.
    """
    token = _flipped_spatial_scale.set(True)
    try:
        yield
    finally:
        _flipped_spatial_scale.reset(token)


@dataclass
class AttentionParams:
    """Weights of one view-mixed attention.

    ``w_q``, ``w_k``, ``w_v`` stack the per-head ``D x D/N_h`` projections
    along axis 0.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_s: np.ndarray
    w_c: np.ndarray
    alpha: float = 0.5
    beta: float = 0.5
    patch_side: int = field(default=1, metadata=STATIC)

    def __post_init__(self):
        if self.w_q.ndim != 3:
            raise DimensionError(f"w_q must be N_h x D x D/N_h, got {self.w_q.shape}")
        n_h, d_model, d_head = self.w_q.shape
        if d_model % n_h or d_head != d_model // n_h:
            raise DimensionError(f"w_q shape {self.w_q.shape} violates D/N_h head width")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise DimensionError(f"{name} shape {getattr(self, name).shape} != {self.w_q.shape}")
        for name in ("w_s", "w_c"):
            if getattr(self, name).shape != (d_model, d_model):
                raise DimensionError(f"{name} must be {d_model}x{d_model}, got {getattr(self, name).shape}")
        for name in ("alpha", "beta"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
            setattr(self, name, v)
        if self.patch_side < 1:
            raise ValueError(f"patch side must be positive, got {self.patch_side}")

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]

    @classmethod
    def zeros(cls, dim: int, n_heads: int, patch_side: int = 1, alpha=0.5, beta=0.5) -> "AttentionParams":
        if dim % n_heads:
            raise DimensionError(f"D={dim} is not divisible by N_h={n_heads}")
        proj = (n_heads, dim, dim // n_heads)
        return cls(
            np.zeros(proj), np.zeros(proj), np.zeros(proj),
            np.zeros((dim, dim)), np.zeros((dim, dim)),
            alpha, beta, patch_side,
        )


@dataclass
class HeadState:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 2:
            raise DimensionError(
                f"head Q/K/V shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    @property
    def scale_spatial(self) -> float:
        return math.sqrt(self.head_dim)

    @property
    def scale_channel(self) -> float:
        return math.sqrt(self.n_tokens)


def project_heads(x_q: np.ndarray, params: AttentionParams, x_kv: np.ndarray | None = None) -> list[HeadState]:
    """Per-head Q from ``x_q`` and K, V from ``x_kv`` (defaults to ``x_q``)."""
    x_kv = x_q if x_kv is None else x_kv
    for x in (x_q, x_kv):
        if x.ndim != 2 or x.shape[1] != params.dim:
            raise DimensionError(f"tokens of shape {x.shape} do not match D={params.dim}")
    heads = []
    for h in range(params.n_heads):
        with scope(f"head{h}"), scope("proj"):
            heads.append(HeadState(
                matmul(x_q, params.w_q[h]),
                matmul(x_kv, params.w_k[h]),
                matmul(x_kv, params.w_v[h]),
            ))
    return heads


def _spatial_core(q, k, v, scale: float, head: int) -> np.ndarray:
    with scope("spatial_core"):
        logits = matmul(q, transpose2d(k))
        logits = logits * scale if _flipped_spatial_scale.get() else logits / scale
        weights = softmax_rows(logits)
        instrument.tally_mem(weights.size)
        instrument.record_map("spatial", head, weights)
        return matmul(weights, v)


def spatial_head_attention(head: HeadState, index: int = 0) -> np.ndarray:
    """``Softmax(Q K^T / sqrt(D/N_h)) V`` over pixel tokens."""
    return _spatial_core(head.q, head.k, head.v, head.scale_spatial, index)


def channel_head_attention(head: HeadState, index: int = 0) -> np.ndarray:
    """Channel-view attention: ``(Softmax(Q^T K / sqrt(N)) V^T)^T``."""
    with scope("channel_core"):
        logits = matmul(transpose2d(head.q), head.k) / head.scale_channel
        weights = softmax_rows(logits)
        instrument.tally_mem(weights.size)
        instrument.record_map("channel", index, weights)
        return transpose2d(matmul(weights, transpose2d(head.v)))


def patchwise_spatial_head_attention(head: HeadState, p: int, h_src: int, w_src: int, index: int = 0) -> np.ndarray:
    """Spatial attention between ``p x p`` patch tokens.

    The logits are scaled by the square root of the patch-token width,
    ``sqrt(D/N_h * p^2)``.
    """
    if h_src * w_src != head.n_tokens:
        raise DimensionError(f"geometry {h_src}x{w_src} does not match {head.n_tokens} tokens")
    d = head.head_dim
    folded = [to_patch_tokens(m.reshape(h_src, w_src, d), p) for m in (head.q, head.k, head.v)]
    out = _spatial_core(folded[0].data, folded[1].data, folded[2].data, math.sqrt(d * p * p), index)
    return from_patch_tokens(PatchTokenSequence(out, p, h_src, w_src)).reshape(head.n_tokens, d)


def _check_pair(x_q: TokenSequence, x_kv: TokenSequence, params: AttentionParams) -> None:
    if x_q.data.shape != x_kv.data.shape or (x_q.h, x_q.w) != (x_kv.h, x_kv.w):
        raise DimensionError(
            f"query source {x_q.h}x{x_q.w}x{x_q.dim} and key/value source "
            f"{x_kv.h}x{x_kv.w}x{x_kv.dim} disagree"
        )
    if x_q.dim != params.dim:
        raise DimensionError(f"token width {x_q.dim} does not match D={params.dim}")


def view_mixed_branches(x_q: TokenSequence, x_kv: TokenSequence, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Unmixed spatial and channel outputs ``(Z_s, Z_c)``, each ``N x D``."""
    _check_pair(x_q, x_kv, params)
    n, d_model = x_q.data.shape
    instrument.record_call(n, d_model, params.n_heads, params.patch_side)
    heads = project_heads(x_q.data, params, x_kv.data)
    spatial, channel = [], []
    for i, head in enumerate(heads):
        with scope(f"head{i}"):
            spatial.append(patchwise_spatial_head_attention(head, params.patch_side, x_q.h, x_q.w, i))
            channel.append(channel_head_attention(head, i))
    with scope("out_proj"):
        z_s = matmul(np.concatenate(spatial, axis=1), params.w_s)
        z_c = matmul(np.concatenate(channel, axis=1), params.w_c)
    instrument.tally_mem(z_s.size + z_c.size)
    return z_s, z_c


def view_mixed_attention(x_q: TokenSequence, x_kv: TokenSequence, params: AttentionParams) -> TokenSequence:
    """``alpha * Z_s + beta * Z_c``; self-attention when ``x_q is x_kv``."""
    z_s, z_c = view_mixed_branches(x_q, x_kv, params)
    return x_q.with_data(params.alpha * z_s + params.beta * z_c)


def standard_attention(x: TokenSequence, params: AttentionParams) -> TokenSequence:
    """Plain multi-head spatial attention over pixel tokens, projected by ``w_s``.

    The baseline the view-mixed form is compared against in the cost model.
    """
    _check_pair(x, x, params)
    n, d_model = x.data.shape
    instrument.record_call(n, d_model, params.n_heads, 1, kind="standard")
    heads = project_heads(x.data, params)
    outs = []
    for i, head in enumerate(heads):
        with scope(f"head{i}"):
            outs.append(spatial_head_attention(head, i))
    with scope("out_proj"):
        z = matmul(np.concatenate(outs, axis=1), params.w_s)
    instrument.tally_mem(z.size)
    return x.with_data(z)
