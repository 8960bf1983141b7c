"""Randomised property and oracle checks behind ``caver check``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import instrument, oracles
from .attention import (
    AttentionParams,
    HeadState,
    channel_head_attention,
    inject_spatial_scale_fault,
    patchwise_spatial_head_attention,
    spatial_head_attention,
    view_mixed_attention,
    view_mixed_branches,
)
from .blocks import SelfAttentionBlockParams, self_attention_block
from .cost import crossover, report_from_probe, vma_attention_cost
from .io import write_cavr
from .ptre import TokenSequence, from_patch_tokens, to_patch_tokens
from .tensor import make_rng
from .tipp import pyramid

ORACLE_TOL = 1e-10
FAULTS = ("spatial-scale",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    counterexample: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


class _Failed(Exception):
    def __init__(self, detail: str, **arrays):
        super().__init__(detail)
        self.arrays = arrays


def _geometry(rng, p: int, max_tokens: int) -> tuple[int, int]:
    while True:
        h = p * int(rng.integers(1, max(2, int(math.isqrt(max_tokens)) // p + 1)))
        w = p * int(rng.integers(1, max(2, max_tokens // h // p + 1)))
        if h * w <= max_tokens:
            return h, w


def _head(rng, n: int, d: int) -> HeadState:
    return HeadState(*(rng.standard_normal((n, d)) for _ in range(3)))


def random_attention_params(rng, dim: int, heads: int, patch: int, alpha=0.5, beta=0.5) -> AttentionParams:
    proj = (heads, dim, dim // heads)
    s = 1 / math.sqrt(dim)
    return AttentionParams(
        *(rng.uniform(-s, s, proj) for _ in range(3)),
        rng.uniform(-s, s, (dim, dim)), rng.uniform(-s, s, (dim, dim)),
        alpha, beta, patch,
    )


def check_ptre_roundtrip(rng, cases: int = 200) -> str:
    for _ in range(cases):
        p = int(rng.choice([1, 2, 4, 8]))
        h, w = p * int(rng.integers(1, 5)), p * int(rng.integers(1, 5))
        d = int(rng.integers(1, 6))
        fmap = rng.standard_normal((h, w, d))
        back = from_patch_tokens(to_patch_tokens(fmap, p))
        if not np.array_equal(back, fmap):
            raise _Failed(f"roundtrip differs for H={h} W={w} d={d} p={p}", input=fmap)
    return f"{cases} cases bit-exact"


def check_spatial_oracle(rng, cases: int = 100) -> str:
    worst = 0.0
    for _ in range(cases):
        p = int(rng.choice([1, 2, 4]))
        h, w = _geometry(rng, p, 64)
        d = int(rng.integers(1, 5))
        head = _head(rng, h * w, d)
        got = patchwise_spatial_head_attention(head, p, h, w)
        want, _ = oracles.patch_attention(head.q, head.k, head.v, h, w, p)
        err = float(np.max(np.abs(got - want)))
        worst = max(worst, err)
        if err > ORACLE_TOL:
            raise _Failed(
                f"max abs error {err:.3g} > {ORACLE_TOL} at H={h} W={w} d={d} p={p}",
                q=head.q, k=head.k, v=head.v,
            )
    return f"{cases} cases, worst error {worst:.3g}"


def check_channel_oracle(rng, cases: int = 100) -> str:
    worst = 0.0
    for _ in range(cases):
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        head = _head(rng, n, d)
        got = channel_head_attention(head)
        want, _ = oracles.channel_attention(head.q, head.k, head.v)
        err = float(np.max(np.abs(got - want)))
        worst = max(worst, err)
        if err > ORACLE_TOL:
            raise _Failed(f"max abs error {err:.3g} > {ORACLE_TOL} at N={n} d={d}", q=head.q, k=head.k, v=head.v)
    return f"{cases} cases, worst error {worst:.3g}"


def check_p1_degeneracy(rng, cases: int = 50) -> str:
    for _ in range(cases):
        h, w = _geometry(rng, 1, 64)
        head = _head(rng, h * w, int(rng.integers(1, 9)))
        if not np.array_equal(patchwise_spatial_head_attention(head, 1, h, w), spatial_head_attention(head)):
            raise _Failed(f"p=1 differs from unpatched attention at H={h} W={w}", q=head.q, k=head.k, v=head.v)
    return f"{cases} cases bit-identical"


def check_view_mix_isolation(rng, cases: int = 20) -> str:
    for _ in range(cases):
        heads = int(rng.choice([1, 2]))
        dim = heads * int(rng.integers(1, 5))
        p = int(rng.choice([1, 2]))
        h, w = _geometry(rng, p, 64)
        x = TokenSequence(rng.standard_normal((h * w, dim)), h, w)
        params = random_attention_params(rng, dim, heads, p)
        z_s, z_c = view_mixed_branches(x, x, params)
        for (a, b), want in (((1.0, 0.0), z_s), ((0.0, 1.0), z_c)):
            params.alpha, params.beta = a, b
            if not np.array_equal(view_mixed_attention(x, x, params).data, want):
                raise _Failed(f"(alpha, beta)=({a}, {b}) does not isolate its branch", x=x.data)
        params.alpha = params.beta = 0.5
        mixed = view_mixed_attention(x, x, params).data
        if np.max(np.abs(mixed - (z_s + z_c) / 2)) > 1e-12:
            raise _Failed("(0.5, 0.5) is not the midpoint of the branches", x=x.data)
    return f"{cases} cases"


def check_residual_identity(rng, dim: int = 64, heads: int = 2, patch: int = 8) -> str:
    for lv in pyramid(256):
        x = TokenSequence(rng.standard_normal((lv.h * lv.w, dim)), lv.h, lv.w)
        out = self_attention_block(x, SelfAttentionBlockParams.zeros(dim, heads, patch))
        if not np.array_equal(out.data, x.data):
            raise _Failed(f"zero-weight block is not the identity at {lv.h}x{lv.w}", x=x.data)
    return "identity at 64x64, 32x32, 16x16, 8x8"


def check_crossover(rng) -> str:
    got = crossover(64, 2, 8)
    if got != 66:
        raise _Failed(f"crossover(64, 2, 8) = {got}, expected 66")
    return "crossover(64, 2, 8) = 66"


def closed_form_sweep():
    """Valid (N, D, N_h, p) combinations on square maps."""
    for n in (16, 64, 256, 1024):
        side = math.isqrt(n)
        for d in (8, 64):
            for nh in (1, 2):
                for p in (1, 2, 4, 8):
                    if side % p == 0:
                        yield n, d, nh, p


def check_closed_vs_instrumented(rng) -> str:
    count = 0
    for n, d, nh, p in closed_form_sweep():
        side = math.isqrt(n)
        x = TokenSequence(rng.standard_normal((n, d)), side, side)
        params = random_attention_params(rng, d, nh, p)
        with instrument.probe() as pr:
            with instrument.scope("vma"):
                view_mixed_attention(x, x, params)
        spatial, channel = pr.macs_where("spatial_core"), pr.macs_where("channel_core")
        if spatial * p * p != 2 * n * n * d or channel * nh != 2 * n * d * d:
            raise _Failed(f"N={n} D={d} N_h={nh} p={p}: spatial={spatial}, channel={channel}")
        report_from_probe(pr)
        count += 1
    return f"{count} configurations exact"


def check_cost_monotone(rng) -> str:
    for n, d, nh, _ in closed_form_sweep():
        side = math.isqrt(n)
        costs = [vma_attention_cost(n, d, nh, p).flops for p in (1, 2, 4, 8) if side % p == 0]
        if any(b > a for a, b in zip(costs, costs[1:])):
            raise _Failed(f"flops increase with p at N={n} D={d} N_h={nh}: {costs}")
    return "non-increasing in p"


def check_linearity(rng, cases: int = 50) -> str:
    worst = 0.0
    for _ in range(cases):
        p = int(rng.choice([1, 2]))
        h, w = _geometry(rng, p, 64)
        d = int(rng.integers(1, 6))
        q, k, v1, v2 = (rng.standard_normal((h * w, d)) for _ in range(4))
        a, b = rng.uniform(-2, 2, 2)
        for fn in (lambda v: patchwise_spatial_head_attention(HeadState(q, k, v), p, h, w),
                   lambda v: channel_head_attention(HeadState(q, k, v))):
            err = float(np.max(np.abs(fn(a * v1 + b * v2) - (a * fn(v1) + b * fn(v2)))))
            worst = max(worst, err)
            if err > ORACLE_TOL:
                raise _Failed(f"linearity error {err:.3g}", q=q, k=k, v1=v1, v2=v2)
    return f"{cases} cases, worst error {worst:.3g}"


def check_equivariance(rng, cases: int = 50) -> str:
    worst = 0.0
    for _ in range(cases):
        heads = int(rng.choice([1, 2]))
        dim = heads * int(rng.integers(1, 5))
        n = int(rng.integers(1, 65))
        x = TokenSequence(rng.standard_normal((n, dim)), n, 1)
        params = random_attention_params(rng, dim, heads, 1)
        perm = rng.permutation(n)
        xp = TokenSequence(x.data[perm], n, 1)
        base = view_mixed_branches(x, x, params)
        moved = view_mixed_branches(xp, xp, params)
        for b, m in zip(base, moved):
            err = float(np.max(np.abs(b[perm] - m)))
            worst = max(worst, err)
            if err > ORACLE_TOL:
                raise _Failed(f"permutation equivariance error {err:.3g}", x=x.data, perm=perm.astype(float))
    return f"{cases} cases, worst error {worst:.3g}"


CHECKS: dict[str, Callable] = {
    "ptre_roundtrip": check_ptre_roundtrip,
    "attention_oracle_spatial": check_spatial_oracle,
    "attention_oracle_channel": check_channel_oracle,
    "p1_degeneracy": check_p1_degeneracy,
    "view_mix_isolation": check_view_mix_isolation,
    "residual_identity": check_residual_identity,
    "crossover": check_crossover,
    "closed_vs_instrumented": check_closed_vs_instrumented,
    "cost_monotone_in_p": check_cost_monotone,
    "linearity_in_v": check_linearity,
    "permutation_equivariance": check_equivariance,
}


def run_checks(seed: int = 0, fault: str | None = None, names=None, out_dir: str | Path | None = None) -> list[CheckResult]:
    """Run the named checks (all by default).

    ``fault="spatial-scale"`` runs everything with the spatial scale
    factor flipped, which must make the spatial oracle check fail.
    Counterexamples of failing checks are written under
    ``out_dir/counterexamples/<check>/``.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    results = []
    for name in names or CHECKS:
        rng = make_rng(seed)
        start = time.perf_counter()
        try:
            if fault == "spatial-scale":
                with inject_spatial_scale_fault():
                    detail = CHECKS[name](rng)
            else:
                detail = CHECKS[name](rng)
            result = CheckResult(name, True, detail)
        except _Failed as exc:
            result = CheckResult(name, False, str(exc), counterexample=exc.arrays)
        result.seconds = time.perf_counter() - start
        if not result.passed and out_dir is not None and result.counterexample:
            where = Path(out_dir) / "counterexamples" / name
            for key, arr in result.counterexample.items():
                write_cavr(where / f"{key}.cavr", np.atleast_1d(arr))
        results.append(result)
    return results
