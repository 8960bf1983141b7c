"""Brute-force reference implementations built from plain Python loops.

These deliberately share no code with the production kernels: no numpy
reshapes, no compiled loops, no helpers from :mod:`caver.ptre`.  They are
slow and only meant for small inputs in tests and ``caver check``.
"""

from __future__ import annotations

import math

import numpy as np


def _rows(a) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(a)]


def matmul(a, b) -> np.ndarray:
    a, b = _rows(a), _rows(b)
    m, k, p = len(a), len(b), len(b[0])
    out = []
    for i in range(m):
        row = []
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            row.append(s)
        out.append(row)
    return np.array(out)


def softmax_row(row: list[float]) -> list[float]:
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    total = 0.0
    for e in exps:
        total += e
    return [e / total for e in exps]


def attention(q, k, v, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Three explicit steps: similarities, softmax, weighted sum of values.

    Returns ``(output, softmax_matrix)``.
    """
    q, k, v = _rows(q), _rows(k), _rows(v)
    n_q, n_k, width = len(q), len(k), len(v[0])
    weights = []
    for i in range(n_q):
        logits = []
        for j in range(n_k):
            s = 0.0
            for c in range(len(q[i])):
                s += q[i][c] * k[j][c]
            logits.append(s / scale)
        weights.append(softmax_row(logits))
    out = []
    for i in range(n_q):
        row = []
        for c in range(width):
            s = 0.0
            for j in range(n_k):
                s += weights[i][j] * v[j][c]
            row.append(s)
        out.append(row)
    return np.array(out), np.array(weights)


def patch_tokens(tokens, h: int, w: int, p: int) -> list[list[float]]:
    """Fold raster-ordered pixel tokens into p x p patch tokens by hand."""
    tokens = _rows(tokens)
    d = len(tokens[0])
    out = []
    for pi in range(h // p):
        for pj in range(w // p):
            tok = []
            for di in range(p):
                for dj in range(p):
                    pixel = tokens[(pi * p + di) * w + (pj * p + dj)]
                    for c in range(d):
                        tok.append(pixel[c])
            out.append(tok)
    return out


def unpatch_tokens(patches, h: int, w: int, p: int) -> np.ndarray:
    patches = _rows(patches)
    d = len(patches[0]) // (p * p)
    out = [[0.0] * d for _ in range(h * w)]
    for idx, tok in enumerate(patches):
        pi, pj = divmod(idx, w // p)
        pos = 0
        for di in range(p):
            for dj in range(p):
                for c in range(d):
                    out[(pi * p + di) * w + (pj * p + dj)][c] = tok[pos]
                    pos += 1
    return np.array(out)


def patch_attention(q, k, v, h: int, w: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(q).shape[1]
    qp, kp, vp = (patch_tokens(m, h, w, p) for m in (q, k, v))
    out, weights = attention(qp, kp, vp, math.sqrt(d * p * p))
    return unpatch_tokens(out, h, w, p), weights


def channel_attention(q, k, v) -> tuple[np.ndarray, np.ndarray]:
    """Channel-by-channel similarity over all tokens, scaled by sqrt(N)."""
    q, k, v = _rows(q), _rows(k), _rows(v)
    n, d = len(q), len(q[0])
    scale = math.sqrt(n)
    weights = []
    for a in range(d):
        logits = []
        for b in range(d):
            s = 0.0
            for t in range(n):
                s += q[t][a] * k[t][b]
            logits.append(s / scale)
        weights.append(softmax_row(logits))
    out = [[0.0] * d for _ in range(n)]
    for t in range(n):
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += weights[a][b] * v[t][b]
            out[t][a] = s
    return np.array(out), np.array(weights)


def conv2d(x, kernel, bias) -> np.ndarray:
    """Zero-padded same-size cross-correlation, sum order (ky, kx, ci)."""
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    h, w, cin = x.shape
    cout, _, k, _ = kernel.shape
    pad = (k - 1) // 2
    out = np.zeros((h, w, cout))
    for y in range(h):
        for xx in range(w):
            for co in range(cout):
                s = 0.0
                for ky in range(k):
                    for kx in range(k):
                        sy, sx = y + ky - pad, xx + kx - pad
                        if 0 <= sy < h and 0 <= sx < w:
                            for ci in range(cin):
                                s += float(x[sy, sx, ci]) * float(kernel[co, ci, ky, kx])
                out[y, xx, co] = s + float(bias[co])
    return out


def batch_norm(x, mean, var, gamma, beta, eps) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        c = idx[-1]
        out[idx] = (float(x[idx]) - float(mean[c])) / math.sqrt(float(var[c]) + eps) * float(gamma[c]) + float(beta[c])
    return out


def bilinear(x, factor: int) -> np.ndarray:
    """Per-pixel bilinear interpolation with half-pixel centres."""
    x = np.asarray(x, dtype=float)
    h, w, c = x.shape
    out = np.zeros((h * factor, w * factor, c))

    def source(i: int, n: int) -> tuple[int, int, float]:
        s = max((i + 0.5) / factor - 0.5, 0.0)
        lo = min(int(math.floor(s)), n - 1)
        return lo, min(lo + 1, n - 1), s - lo

    for i in range(h * factor):
        y0, y1, ly = source(i, h)
        for j in range(w * factor):
            x0, x1, lx = source(j, w)
            for ch in range(c):
                out[i, j, ch] = (
                    (1 - ly) * (1 - lx) * x[y0, x0, ch]
                    + (1 - ly) * lx * x[y0, x1, ch]
                    + ly * (1 - lx) * x[y1, x0, ch]
                    + ly * lx * x[y1, x1, ch]
                )
    return out
