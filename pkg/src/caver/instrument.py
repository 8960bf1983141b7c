"""Per-invocation probes: multiply-add tallies, memory tallies, shape traces
and attention-map capture.

A probe is bound to the current context with :func:`probe`; kernels report
into whatever probe is active.  Nothing is shared between concurrent
invocations because the active probe and the label stack live in
``contextvars``.
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass
class AttentionCall:
    """One view-mixed (or standard) attention evaluated under a probe."""

    label: str
    n_tokens: int
    dim: int
    n_heads: int
    patch: int
    kind: str = "vma"


@dataclass
class CapturedMap:
    label: str
    kind: str  # "spatial" or "channel"
    head: int
    matrix: np.ndarray


@dataclass
class Probe:
    capture_maps: bool = False
    capture_prefix: str = ""
    macs: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    mem: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    calls: list[AttentionCall] = field(default_factory=list)
    maps: list[CapturedMap] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    def macs_where(self, leaf: str) -> int:
        return sum(v for k, v in self.macs.items() if k.rsplit("/", 1)[-1] == leaf)

    def mem_total(self) -> int:
        return sum(self.mem.values())


_probe: ContextVar[Probe | None] = ContextVar("caver_probe", default=None)
_labels: ContextVar[tuple[str, ...]] = ContextVar("caver_labels", default=())


@contextmanager
def probe(capture_maps: bool = False, capture_prefix: str = "") -> Iterator[Probe]:
    p = Probe(capture_maps=capture_maps, capture_prefix=capture_prefix)
    token = _probe.set(p)
    try:
        yield p
    finally:
        _probe.reset(token)


@contextmanager
def scope(name: str) -> Iterator[None]:
    token = _labels.set(_labels.get() + (name,))
    try:
        yield
    finally:
        _labels.reset(token)


def current_label() -> str:
    return "/".join(_labels.get())


def active() -> Probe | None:
    return _probe.get()


def tally_macs(n: int) -> None:
    p = _probe.get()
    if p is not None:
        p.macs[current_label()] += int(n)


def tally_mem(n: int) -> None:
    p = _probe.get()
    if p is not None:
        p.mem[current_label()] += int(n)


def record_call(n_tokens: int, dim: int, n_heads: int, patch: int, kind: str = "vma") -> None:
    p = _probe.get()
    if p is not None:
        p.calls.append(AttentionCall(current_label(), n_tokens, dim, n_heads, patch, kind))


def record_map(kind: str, head: int, matrix: np.ndarray) -> None:
    p = _probe.get()
    if p is not None and p.capture_maps:
        label = current_label()
        if label.startswith(p.capture_prefix):
            p.maps.append(CapturedMap(label, kind, head, matrix.copy()))


def trace_shapes(inputs: tuple, output: tuple) -> None:
    p = _probe.get()
    if p is not None:
        ins = ", ".join("x".join(map(str, s)) for s in inputs)
        out = "x".join(map(str, output))
        p.trace.append(f"{current_label() or '<root>'}: {ins} -> {out}")
