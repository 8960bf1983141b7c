"""Dense float64 kernels for the decoder.

Tensors are plain ``numpy.ndarray`` objects of rank 1 to 4 in float64.
Feature maps are ``H x W x C`` (channel last) and token sequences ``N x D``.

Every reduction runs in ascending index order inside a compiled loop, so
results are bit-identical from run to run and match a naive Python loop
doing the same sums exactly.  Matmul and conv report multiply-adds to the
active :mod:`caver.instrument` probe.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from . import instrument
from .errors import DimensionError, NonFiniteError

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the same seed always yields the same stream."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(x, rank: int | tuple[int, ...] | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    ranks = (rank,) if isinstance(rank, int) else rank
    if not 1 <= arr.ndim <= 4:
        raise DimensionError(f"{name}: rank must be 1..4, got shape {arr.shape}")
    if ranks is not None and arr.ndim not in ranks:
        raise DimensionError(f"{name}: expected rank {ranks}, got shape {arr.shape}")
    if 0 in arr.shape:
        raise DimensionError(f"{name}: extents must be positive, got {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or infinity")
    return arr


# --------------------------------------------------------------------------
# compiled kernels; the inner loops fix the accumulation order
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for kk in range(k):
            x = a[i, kk]
            for j in range(p):
                out[i, j] += x * b[kk, j]
    return out


@numba.njit(cache=True)
def _softmax_kernel(a):
    m, p = a.shape
    out = np.empty((m, p))
    for i in range(m):
        top = a[i, 0]
        for j in range(1, p):
            if a[i, j] > top:
                top = a[i, j]
        total = 0.0
        for j in range(p):
            e = np.exp(a[i, j] - top)
            out[i, j] = e
            total += e
        for j in range(p):
            out[i, j] = out[i, j] / total
    return out


@numba.njit(cache=True)
def _conv_kernel(x, w, bias):
    # w is laid out (k, k, cin, cout); zero padding (k - 1) // 2
    h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    pad = (k - 1) // 2
    out = np.empty((h, wd, cout))
    acc = np.empty(cout)
    for y in range(h):
        for xx in range(wd):
            for co in range(cout):
                acc[co] = 0.0
            for ky in range(k):
                sy = y + ky - pad
                if sy < 0 or sy >= h:
                    continue
                for kx in range(k):
                    sx = xx + kx - pad
                    if sx < 0 or sx >= wd:
                        continue
                    for ci in range(cin):
                        v = x[sy, sx, ci]
                        for co in range(cout):
                            acc[co] += v * w[ky, kx, ci, co]
            for co in range(cout):
                out[y, xx, co] = acc[co] + bias[co]
    return out


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    """Matrix product with ascending-K accumulation."""
    a = as_tensor(a, 2, "matmul lhs")
    b = as_tensor(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    m, k = a.shape
    instrument.tally_macs(m * k * b.shape[1])
    out = _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return check_finite(out, "matmul result")


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    a = as_tensor(a, 2, "softmax input")
    return _softmax_kernel(np.ascontiguousarray(a))


def transpose2d(a) -> np.ndarray:
    a = as_tensor(a, 2, "transpose input")
    return np.ascontiguousarray(a.T)


def conv2d(x, kernel, bias=None) -> np.ndarray:
    """Same-size 2-D cross-correlation of an ``H x W x Cin`` map.

    ``kernel`` is ``Cout x Cin x k x k`` with ``k`` in {1, 3}.  Sums run over
    (ky, kx, ci) in ascending order and the bias is added last.
    """
    x = as_tensor(x, 3, "conv input")
    kernel = as_tensor(kernel, 4, "conv kernel")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if bias is None:
        bias = np.zeros(cout)
    bias = as_tensor(bias, 1, "conv bias")
    if bias.shape[0] != cout:
        raise DimensionError(f"conv2d: bias has {bias.shape[0]} entries, expected {cout}")
    h, w, _ = x.shape
    instrument.tally_macs(h * w * cout * cin * kh * kw)
    w_t = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0))
    out = _conv_kernel(np.ascontiguousarray(x), w_t, bias)
    return check_finite(out, "conv result")


def batch_norm_infer(x, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Inference-mode batch norm over the last (channel) axis."""
    x = as_tensor(x, name="batch norm input")
    c = x.shape[-1]
    stats = []
    for label, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        v = as_tensor(v, 1, f"batch norm {label}")
        if v.shape[0] != c:
            raise DimensionError(f"batch norm {label} has {v.shape[0]} entries, input has {c} channels")
        stats.append(v)
    mean, var, gamma, beta = stats
    if (var < 0).any():
        raise ValueError("batch norm variance must be non-negative")
    if not eps > 0:
        raise ValueError(f"batch norm eps must be positive, got {eps}")
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def _axis_weights(n_in: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_upsample(x, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor, half-pixel centres.

    Source coordinate for output index ``i`` is ``(i + 0.5) / factor - 0.5``,
    clamped to the valid range.
    """
    x = as_tensor(x, 3, "upsample input")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x.copy()
    h, w, _ = x.shape
    y0, y1, ly = _axis_weights(h, factor)
    x0, x1, lx = _axis_weights(w, factor)
    ly = ly[:, None, None]
    lx = lx[None, :, None]
    top = x[y0][:, x0] * (1.0 - lx) + x[y0][:, x1] * lx
    bottom = x[y1][:, x0] * (1.0 - lx) + x[y1][:, x1] * lx
    out = top * (1.0 - ly) + bottom * ly
    # rounding in the blend may step one ulp past the source range
    lo = np.minimum.reduce([x[y0][:, x0], x[y0][:, x1], x[y1][:, x0], x[y1][:, x1]])
    hi = np.maximum.reduce([x[y0][:, x0], x[y0][:, x1], x[y1][:, x0], x[y1][:, x1]])
    return np.clip(out, lo, hi)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x, name="relu input"), 0.0)


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x, name="sigmoid input")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def add(a, b) -> np.ndarray:
    a = as_tensor(a, name="add lhs")
    b = as_tensor(b, name="add rhs")
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return check_finite(a + b, "add result")


def scale(a, s: float) -> np.ndarray:
    if not math.isfinite(s):
        raise NonFiniteError(f"scale factor {s} is not finite")
    return check_finite(as_tensor(a, name="scale input") * float(s), "scale result")
