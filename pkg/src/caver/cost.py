"""Closed-form and instrumented attention cost accounting.

Counts are multiply-adds of the two attention matrix products (the
``Q K^T``-style similarity product and the product with ``V``).  Under
that convention plain attention over ``N`` tokens of width ``D`` costs
``2 N^2 D`` and the view-mixed form costs ``2 N^2 D / p^2 + 2 N D^2``.
All arithmetic is exact (``int`` / ``Fraction``).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from . import instrument
from .errors import CostMismatchError
from .instrument import Probe
from .tipp import tipp_forward
from .weights import repatch

Number = int | Fraction


def _exact(x: Fraction) -> Number:
    return int(x) if x.denominator == 1 else x


@dataclass(frozen=True)
class AttentionCost:
    flops: Number
    mem: Number
    flops_channel_per_head: Number = 0
    channel_term: Number = 0
    violations: tuple[str, ...] = ()

    @property
    def flops_per_head_variant(self) -> Number:
        """Total with the channel term counted per head, ``2 N D^2 / N_h``."""
        return self.flops - self.channel_term + self.flops_channel_per_head


def _check_positive(**kw) -> None:
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{k} must be a positive integer, got {v}")


def standard_attention_cost(n: int, d: int, n_heads: int) -> AttentionCost:
    """``2 N^2 D`` multiply-adds, ``N_h N^2 + N D`` elements."""
    _check_positive(n=n, d=d, n_heads=n_heads)
    if d % n_heads:
        raise ValueError(f"D={d} is not divisible by N_h={n_heads}")
    return AttentionCost(flops=2 * n * n * d, mem=n_heads * n * n + n * d)


def vma_attention_cost(n: int, d: int, n_heads: int, p: int) -> AttentionCost:
    """``2 N^2 D / p^2 + 2 N D^2`` multiply-adds and
    ``N_h N^2 / p^4 + D^2 / N_h + 2 N D`` elements.

    Non-integral terms are returned as exact fractions and listed in
    ``violations``.
    """
    _check_positive(n=n, d=d, n_heads=n_heads, p=p)
    if d % n_heads:
        raise ValueError(f"D={d} is not divisible by N_h={n_heads}")
    violations = []
    if n % (p * p):
        violations.append(f"p^2={p * p} does not divide N={n}")
    if (n_heads * n * n) % p**4:
        violations.append(f"p^4={p**4} does not divide N_h*N^2={n_heads * n * n}")
    spatial = Fraction(2 * n * n * d, p * p)
    channel = 2 * n * d * d
    mem = Fraction(n_heads * n * n, p**4) + Fraction(d * d, n_heads) + 2 * n * d
    return AttentionCost(
        flops=_exact(spatial + channel),
        mem=_exact(mem),
        flops_channel_per_head=_exact(Fraction(channel, n_heads)),
        violations=tuple(violations),
        channel_term=channel,
    )


def crossover(d: int, n_heads: int, p: int, per_head_channel: bool = False) -> int | None:
    """Smallest token count N at which view-mixed attention costs fewer
    multiply-adds than standard attention; ``None`` when it never does.

    Integer scan.  The scan stops once N passes ``D p^2 / (p^2 - 1)`` (scaled
    down by ``N_h`` for the per-head variant), beyond which the inequality
    cannot change sign again.
    """
    _check_positive(d=d, n_heads=n_heads, p=p)
    if p == 1:
        return None
    ch = Fraction(d * d, n_heads) if per_head_channel else Fraction(d * d)
    bound = ch * p * p / (d * (p * p - 1))
    n = 1
    while True:
        vma = Fraction(2 * n * n * d, p * p) + 2 * n * ch
        if vma < 2 * n * n * d:
            return n
        if n > bound + 1:
            return None  # unreachable for p > 1; guards the loop
        n += 1


# -- instrumented reports --------------------------------------------------


@dataclass(frozen=True)
class BreakdownRow:
    label: str
    macs: int
    mem: int


@dataclass(frozen=True)
class CostReport:
    """Costs of one instrumented forward pass.

    ``flops_closed_form`` counts the channel term at full width, ``2 N D^2``;
    ``flops_closed_per_head`` uses ``2 N D^2 / N_h``, which is what the
    per-head channel attention actually executes and what the counter
    must reproduce.
    """

    flops_closed_form: Number
    flops_closed_per_head: Number
    flops_instrumented: int
    mem_elements_closed_form: Number
    mem_elements_instrumented: int
    decoder_macs: int
    breakdown: tuple[BreakdownRow, ...] = field(default_factory=tuple)
    patch: tuple[int, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "patch": list(self.patch),
            "flops_closed": _jsonable(self.flops_closed_form),
            "flops_closed_per_head": _jsonable(self.flops_closed_per_head),
            "flops_measured": self.flops_instrumented,
            "mem_closed": _jsonable(self.mem_elements_closed_form),
            "mem_measured": self.mem_elements_instrumented,
            "decoder_macs": self.decoder_macs,
            "breakdown": [asdict(r) for r in self.breakdown],
        }


def _jsonable(x: Number):
    return x if isinstance(x, int) else str(x)


def _group(label: str, depth: int) -> str:
    return "/".join(label.split("/")[:depth]) or "<root>"


def report_from_probe(probe: Probe, depth: int = 2, patch=()) -> CostReport:
    """Compare the probe's attention-core tallies with the closed forms.

    Raises :class:`CostMismatchError` when any attention call's measured
    spatial or channel multiply-adds differ from ``2 N^2 D / p^2`` or
    ``2 N D^2 / N_h``.
    """
    closed = closed_head = mem_closed = 0
    for call in probe.calls:
        prefix = call.label + "/"
        spatial = sum(v for k, v in probe.macs.items() if k.startswith(prefix) and k.endswith("/spatial_core"))
        channel = sum(v for k, v in probe.macs.items() if k.startswith(prefix) and k.endswith("/channel_core"))
        if call.kind == "standard":
            cost = standard_attention_cost(call.n_tokens, call.dim, call.n_heads)
            want_spatial, want_channel = cost.flops, 0
            head_total = cost.flops
        else:
            cost = vma_attention_cost(call.n_tokens, call.dim, call.n_heads, call.patch)
            want_spatial = cost.flops - cost.channel_term
            want_channel = cost.flops_channel_per_head
            head_total = cost.flops_per_head_variant
        if spatial != want_spatial or channel != want_channel:
            raise CostMismatchError(
                f"{call.label}: measured spatial={spatial}, channel={channel}; "
                f"closed form spatial={want_spatial}, channel={want_channel}"
            )
        closed += cost.flops
        closed_head += head_total
        mem_closed += cost.mem

    groups: dict[str, list[int]] = {}
    for k, v in probe.macs.items():
        groups.setdefault(_group(k, depth), [0, 0])[0] += v
    for k, v in probe.mem.items():
        groups.setdefault(_group(k, depth), [0, 0])[1] += v
    breakdown = tuple(BreakdownRow(k, m, e) for k, (m, e) in sorted(groups.items()))
    return CostReport(
        flops_closed_form=closed,
        flops_closed_per_head=closed_head,
        flops_instrumented=probe.macs_where("spatial_core") + probe.macs_where("channel_core"),
        mem_elements_closed_form=mem_closed,
        mem_elements_instrumented=probe.mem_total(),
        decoder_macs=probe.total_macs,
        breakdown=breakdown,
        patch=tuple(patch),
    )


def instrument_forward(config, weights, features) -> CostReport:
    """Run the decoder under a probe and return its cost report."""
    with instrument.probe() as probe:
        tipp_forward(features, config, repatch(weights, config.patch))
    return report_from_probe(probe, patch=config.patch)


# -- serialisation ---------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["points"],
    "properties": {
        "points": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "patch", "flops_closed", "flops_closed_per_head", "flops_measured",
                    "mem_closed", "mem_measured", "decoder_macs", "breakdown", "crossover_n",
                ],
                "additionalProperties": False,
                "properties": {
                    "patch": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "flops_closed": {"type": ["integer", "string"]},
                    "flops_closed_per_head": {"type": ["integer", "string"]},
                    "flops_measured": {"type": "integer", "minimum": 0},
                    "mem_closed": {"type": ["integer", "string"]},
                    "mem_measured": {"type": "integer", "minimum": 0},
                    "decoder_macs": {"type": "integer", "minimum": 0},
                    "crossover_n": {"type": ["integer", "null"]},
                    "breakdown": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["label", "macs", "mem"],
                            "additionalProperties": False,
                            "properties": {
                                "label": {"type": "string"},
                                "macs": {"type": "integer", "minimum": 0},
                                "mem": {"type": "integer", "minimum": 0},
                            },
                        },
                    },
                },
            },
        },
    },
}


def sweep_document(reports: list[CostReport], crossovers: list[int | None]) -> dict:
    points = []
    for r, n in zip(reports, crossovers):
        doc = r.to_json_dict()
        doc["crossover_n"] = n
        points.append(doc)
    return {"points": points}


def format_table(reports: list[CostReport], crossovers: list[int | None], color: bool | None = None) -> str:
    if color is None:
        color = "CAVER_NO_COLOR" not in os.environ
    bold, reset = ("\x1b[1m", "\x1b[0m") if color else ("", "")
    header = ("patch", "flops_closed", "flops_per_head", "flops_measured", "mem_closed", "mem_measured", "decoder_macs", "crossover_N")
    rows = [
        (
            ",".join(map(str, r.patch)), str(r.flops_closed_form), str(r.flops_closed_per_head),
            str(r.flops_instrumented), str(r.mem_elements_closed_form), str(r.mem_elements_instrumented),
            str(r.decoder_macs), "-" if n is None else str(n),
        )
        for r, n in zip(reports, crossovers)
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = [bold + "  ".join(h.rjust(w) for h, w in zip(header, widths)) + reset]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"
